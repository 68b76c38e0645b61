"""Periodic grids, spectral fields and spatial norms.

Fields are stored with the component axis directly in front of the ``d``
spatial axes, ``values.shape == (..., N, n, ..., n)``.  Any leading axes are
treated as a batch (one entry per noise sample, time slice, ...), so every
operation here works unchanged on ensembles.

The box is equipped with the normalized measure (total mass 1): integrals are
grid means, and the spectral coefficient of ``exp(i k.x)`` is its amplitude.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from itertools import product

import numpy as np

MAX_DERIVATIVE_ORDER = 6  # 2 * m_max with m_max = 3


@dataclass(frozen=True)
class TorusGrid:
    """Uniform grid on the torus ``[0, period)^d`` with ``n`` points per axis."""

    d: int
    n: int
    period: float = 2 * math.pi

    def __post_init__(self):
        if self.d not in (1, 2, 3):
            raise ValueError(f"dimension must be 1, 2 or 3, got {self.d}")
        if self.n < 2 or self.n & (self.n - 1):
            raise ValueError(f"points per axis must be a power of two, got {self.n}")
        if not self.period > 0:
            raise ValueError("period must be positive")

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.n,) * self.d

    @property
    def size(self) -> int:
        return self.n**self.d

    @property
    def spacing(self) -> float:
        return self.period / self.n

    @property
    def cell_weight(self) -> float:
        # normalized measure: the box has mass one
        return 1.0 / self.size

    @property
    def axes(self) -> tuple[int, ...]:
        return tuple(range(-self.d, 0))

    @cached_property
    def coordinates(self) -> np.ndarray:
        """Physical points, shape ``(d, n, ..., n)``."""
        x = np.arange(self.n) * self.spacing
        return np.array(np.meshgrid(*([x] * self.d), indexing="ij"))

    @cached_property
    def frequency_index(self) -> np.ndarray:
        """Integer lattice indices ``m`` with ``-n/2 <= m < n/2``, shape ``(d, n, ..., n)``."""
        m = np.fft.fftfreq(self.n, 1.0 / self.n).astype(int)
        return np.array(np.meshgrid(*([m] * self.d), indexing="ij"))

    @cached_property
    def wavenumbers(self) -> np.ndarray:
        """Physical wave vectors ``k = 2 pi m / period``, shape ``(d, n, ..., n)``."""
        return (2 * math.pi / self.period) * self.frequency_index

    @cached_property
    def k2(self) -> np.ndarray:
        return np.sum(self.wavenumbers**2, axis=0)

    @cached_property
    def dealias_mask(self) -> np.ndarray:
        """Boolean 2/3-rule mask: keep modes with ``|m_i| < n/3`` on every axis."""
        return np.all(np.abs(self.frequency_index) < self.n / 3, axis=0)

    def nyquist_mask(self) -> np.ndarray:
        """True on modes whose index hits ``-n/2`` on some axis."""
        return np.any(self.frequency_index == -self.n // 2, axis=0)

    def describe(self) -> str:
        return f"d={self.d};n={self.n};L={self.period:.12g}"


def _check_values(grid: TorusGrid, values: np.ndarray) -> np.ndarray:
    values = np.asarray(values)
    if values.ndim < grid.d + 1 or values.shape[-grid.d:] != grid.shape:
        raise ValueError(
            f"values of shape {values.shape} do not end with (N,) + {grid.shape}")
    return values


@dataclass(frozen=True)
class Field:
    """A C^N-valued function sampled on a torus grid (possibly batched)."""

    grid: TorusGrid
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        object.__setattr__(self, "values", _check_values(self.grid, self.values))

    @property
    def N(self) -> int:
        return self.values.shape[-self.grid.d - 1]

    @property
    def batch_shape(self) -> tuple[int, ...]:
        return self.values.shape[: -self.grid.d - 1]

    def __add__(self, other: Field) -> Field:
        return Field(self.grid, self.values + other.values)

    def __sub__(self, other: Field) -> Field:
        return Field(self.grid, self.values - other.values)

    def __mul__(self, c) -> Field:
        return Field(self.grid, self.values * c)

    __rmul__ = __mul__

    def to_bytes(self) -> bytes:
        """Flat little-endian float64 layout: row-major points, interleaved
        components, each component as (real, imag)."""
        if self.batch_shape:
            raise ValueError("serialize one field at a time")
        v = np.moveaxis(self.values.astype(np.complex128), 0, -1)
        return np.ascontiguousarray(v).view("<f8").tobytes()

    @classmethod
    def from_bytes(cls, grid: TorusGrid, N: int, data: bytes) -> Field:
        flat = np.frombuffer(data, dtype="<f8")
        expected = 2 * N * grid.size
        if flat.size != expected:
            raise ValueError(f"expected {expected} floats, got {flat.size}")
        v = flat.view(np.complex128).reshape(grid.shape + (N,))
        return cls(grid, np.moveaxis(v, -1, 0).copy())


@dataclass(frozen=True)
class SpectralField:
    """Fourier coefficients of a field; ``coefficients[..., c, m]`` is the
    amplitude of ``exp(i k_m . x)`` in component ``c``."""

    grid: TorusGrid
    coefficients: np.ndarray = field(repr=False)

    def __post_init__(self):
        object.__setattr__(self, "coefficients",
                           _check_values(self.grid, self.coefficients))


def fft(grid: TorusGrid, values: np.ndarray) -> np.ndarray:
    return np.fft.fftn(values, axes=grid.axes) / grid.size


def ifft(grid: TorusGrid, coefficients: np.ndarray) -> np.ndarray:
    return np.fft.ifftn(coefficients, axes=grid.axes) * grid.size


def to_spectral(f: Field) -> SpectralField:
    return SpectralField(f.grid, fft(f.grid, f.values))


def to_physical(g: SpectralField) -> Field:
    return Field(g.grid, ifft(g.grid, g.coefficients))


def plane_wave(grid: TorusGrid, k, N: int = 1, component: int = 0) -> Field:
    """``exp(i k . x)`` in one component; ``k`` given in lattice units."""
    k = np.asarray(k, dtype=float).reshape(grid.d, *([1] * grid.d))
    phase = np.sum(k * (2 * math.pi / grid.period) * grid.coordinates, axis=0)
    values = np.zeros((N,) + grid.shape, dtype=complex)
    values[component] = np.exp(1j * phase)
    return Field(grid, values)


def random_field(grid: TorusGrid, rng: np.random.Generator, N: int = 1,
                 bandwidth: int | None = None, decay: float = 1.0,
                 real: bool = True, batch: tuple[int, ...] = ()) -> Field:
    """Random band-limited field with spectral amplitude ``(1+|m|^2)^(-decay/2)``."""
    shape = batch + (N,) + grid.shape
    coef = rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
    m2 = np.sum(grid.frequency_index.astype(float) ** 2, axis=0)
    coef *= (1 + m2) ** (-decay / 2)
    limit = bandwidth if bandwidth is not None else grid.n // 3
    coef *= np.all(np.abs(grid.frequency_index) <= limit, axis=0)
    values = ifft(grid, coef)
    if real:
        values = values.real.astype(complex)
    return Field(grid, values)


def derivative_symbol(grid: TorusGrid, alpha) -> np.ndarray:
    """Multiplier ``(i k)^alpha``; odd-order factors vanish on the Nyquist plane."""
    alpha = tuple(int(a) for a in alpha)
    if len(alpha) != grid.d or min(alpha) < 0:
        raise ValueError(f"multi-index {alpha} does not match d={grid.d}")
    if sum(alpha) > MAX_DERIVATIVE_ORDER:
        raise ValueError(f"|alpha| = {sum(alpha)} exceeds {MAX_DERIVATIVE_ORDER}")
    symbol = np.ones(grid.shape, dtype=complex)
    for axis, a in enumerate(alpha):
        if a == 0:
            continue
        factor = (1j * grid.wavenumbers[axis]) ** a
        if a % 2:
            factor = np.where(grid.frequency_index[axis] == -grid.n // 2, 0, factor)
        symbol = symbol * factor
    return symbol


def apply_derivative(f: Field, alpha) -> Field:
    sym = derivative_symbol(f.grid, alpha)
    return Field(f.grid, ifft(f.grid, sym * fft(f.grid, f.values)))


def gradient(grid: TorusGrid, values: np.ndarray) -> np.ndarray:
    """Spectral gradient; a new axis of length ``d`` is inserted before the
    component axis."""
    coef = fft(grid, values)
    out = []
    for axis in range(grid.d):
        alpha = [0] * grid.d
        alpha[axis] = 1
        out.append(ifft(grid, derivative_symbol(grid, alpha) * coef))
    return np.stack(out, axis=-grid.d - 2)


def apply_multiplier(grid: TorusGrid, values: np.ndarray, symbol: np.ndarray) -> np.ndarray:
    return ifft(grid, symbol * fft(grid, values))


def bessel_symbol(grid: TorusGrid, s: float) -> np.ndarray:
    return (1.0 + grid.k2) ** (s / 2)


def lq_norm(grid: TorusGrid, values: np.ndarray, q: float = 2.0,
            component_axes: int = 1) -> np.ndarray:
    """Grid ``L^q`` norm for the normalized measure.

    The trailing ``component_axes`` axes in front of the spatial ones are
    combined with the Euclidean norm (system components, noise directions).
    """
    if q < 1:
        raise ValueError("q must be >= 1")
    values = np.asarray(values)
    ax = tuple(range(-grid.d - component_axes, -grid.d))
    pointwise = np.sqrt(np.sum(np.abs(values) ** 2, axis=ax)) if ax else np.abs(values)
    if q == 2:
        return np.sqrt(np.mean(pointwise**2, axis=grid.axes))
    return np.mean(pointwise**q, axis=grid.axes) ** (1 / q)


def bessel_values(grid: TorusGrid, values: np.ndarray, s: float) -> np.ndarray:
    if s == 0:
        return np.asarray(values)
    return apply_multiplier(grid, values, bessel_symbol(grid, s))


def bessel_norm(f: Field, s: float, q: float) -> float | np.ndarray:
    """``|| F^{-1}[(1+|k|^2)^{s/2} f^] ||_{L^q}`` on the grid."""
    return lq_norm(f.grid, bessel_values(f.grid, f.values, s), q)


# Littlewood-Paley blocks: raised-cosine partition of unity in log2|k|.
def littlewood_paley_weights(grid: TorusGrid, j: int) -> np.ndarray:
    kabs = np.sqrt(grid.k2)
    with np.errstate(divide="ignore"):
        rho = np.log2(np.where(kabs > 0, kabs, 1.0))
    rho = np.where(kabs > 0, rho, -np.inf)
    inside = np.abs(rho - j) < 1
    bump = np.where(inside, np.cos(np.pi / 2 * np.where(inside, rho - j, 0.0)) ** 2, 0.0)
    if j == 0:
        bump = np.where(rho <= 0, 1.0, bump)
    return bump


def littlewood_paley_blocks(grid: TorusGrid) -> range:
    kmax = math.sqrt(float(grid.k2.max()))
    return range(0, max(1, int(math.ceil(math.log2(max(kmax, 1.0)))) + 2))


def besov_norm(f: Field, s: float, q: float, p: float) -> float | np.ndarray:
    """``l^p`` sum over dyadic blocks of ``2^{js} ||Delta_j f||_{L^q}``."""
    if s < 0:
        raise ValueError("besov_norm requires s >= 0")
    coef = fft(f.grid, f.values)
    terms = []
    for j in littlewood_paley_blocks(f.grid):
        w = littlewood_paley_weights(f.grid, j)
        if not w.any():
            continue
        block = ifft(f.grid, w * coef)
        terms.append(2.0 ** (j * s) * lq_norm(f.grid, block, q))
    terms = np.stack(terms)
    if math.isinf(p):
        return terms.max(axis=0)
    return np.sum(terms**p, axis=0) ** (1 / p)


def multi_indices(d: int, order: int) -> list[tuple[int, ...]]:
    """All multi-indices of length ``d`` and total order ``order``, lexicographic."""
    return sorted((a for a in product(range(order + 1), repeat=d) if sum(a) == order),
                  reverse=True)

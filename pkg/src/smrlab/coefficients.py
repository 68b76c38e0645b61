"""Coefficient processes for A(t, omega) and the gradient-noise operators, and
checkers for the structural assumptions placed on them.

A realized coefficient is a finite sum of products ``tau_r(t, omega) * T_r(x)``
of scalar adapted time factors and fixed tensors.  Every built-in family has
this form, and so do the derived operators (convex blends, the drift-corrected
operator of the gradient-noise transform), which keeps evaluation at one time
step cheap even for x-dependent coefficients.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .grid import TorusGrid, fft, ifft, derivative_symbol, lq_norm, multi_indices
from .noise import NoisePath, stream

TIME_KINDS = ("constant", "sinusoid", "piecewise")
SPACE_KINDS = ("uniform", "smooth", "jump", "divfree")


@dataclass(frozen=True)
class CoefficientFamily:
    """Descriptor of how a base tensor is modulated in time and space.

    time: ``constant``; ``sinusoid`` (1 + amp sin(2 pi nu t)); ``piecewise``
    (1 + amp xi_k on random dyadic switch intervals, xi_k driven by the noise
    observed at the switch).
    space: ``uniform``; ``smooth`` (1 + amp phi(x), phi a trigonometric
    polynomial with sup 1); ``jump`` (1 + amp sign); ``divfree`` (base + amp C(x)
    with divergence-free columns, second order only).
    """

    time: str = "constant"
    space: str = "uniform"
    time_amplitude: float = 0.0
    frequency: float = 1.0
    switches: int = 4
    levels: int = 16
    space_amplitude: float = 0.0
    modes: int = 2

    def __post_init__(self):
        if self.time not in TIME_KINDS:
            raise ValueError(f"unknown time family {self.time!r}; choose from {TIME_KINDS}")
        if self.space not in SPACE_KINDS:
            raise ValueError(f"unknown space family {self.space!r}; choose from {SPACE_KINDS}")
        if self.time == "piecewise" and not 0 <= self.switches < self.levels:
            raise ValueError("need 0 <= switches < levels")
        if abs(self.time_amplitude) >= 1 and self.time != "constant":
            raise ValueError("|time_amplitude| must be < 1 to keep the sign of the base")

    @property
    def x_dependent(self) -> bool:
        return self.space != "uniform"

    @property
    def random(self) -> bool:
        return self.time == "piecewise"


def isotropic_tensor(d: int, m: int, N: int = 1, c: float = 1.0) -> np.ndarray:
    """``a_{alpha beta}`` with ``A = c (-Delta)^m`` (diagonal in the multi-index)."""
    idx = multi_indices(d, m)
    a = np.zeros((len(idx), len(idx), N, N), dtype=complex)
    for p, gamma in enumerate(idx):
        a[p, p] = c * math.factorial(m) / math.prod(math.factorial(g) for g in gamma) * np.eye(N)
    return a


def second_order_tensor(a_ij, N: int = 1) -> np.ndarray:
    """Lift a ``(d, d)`` or ``(d, d, N, N)`` array into the ``(P, P, N, N)`` layout."""
    a = np.asarray(a_ij, dtype=complex)
    if a.ndim == 2:
        a = a[:, :, None, None] * np.eye(N)
    return a


@dataclass(frozen=True)
class OperatorSpec:
    """``A u = (-1)^m sum a_{alpha beta} D^alpha D^beta u + shift * u``.

    ``base`` has shape ``(P, P, N, N)`` indexed by the multi-indices of order
    ``m`` (see :func:`multi_indices`).  ``form='divergence'`` (second order only)
    reads the operator as ``-div(a grad u)`` when coefficients depend on x.
    """

    d: int
    m: int
    base: np.ndarray = field(repr=False)
    family: CoefficientFamily = CoefficientFamily()
    K: float = 10.0
    shift: float = 0.0
    form: str = "nondivergence"

    def __post_init__(self):
        if self.m not in (1, 2, 3):
            raise ValueError("order parameter m must be 1, 2 or 3")
        P = len(multi_indices(self.d, self.m))
        base = np.asarray(self.base, dtype=complex)
        if base.shape[:2] != (P, P) or base.ndim != 4 or base.shape[2] != base.shape[3]:
            raise ValueError(f"base must have shape ({P}, {P}, N, N), got {base.shape}")
        object.__setattr__(self, "base", base)
        if self.form not in ("nondivergence", "divergence"):
            raise ValueError("form must be 'nondivergence' or 'divergence'")
        if self.family.space == "divfree" and self.m != 1:
            raise ValueError("divergence-free family needs a second-order operator")

    @property
    def N(self) -> int:
        return self.base.shape[-1]

    @property
    def x_dependent(self) -> bool:
        return self.family.x_dependent

    @classmethod
    def laplacian(cls, d: int, N: int = 1, m: int = 1, c: float = 1.0, **kw) -> OperatorSpec:
        return cls(d, m, isotropic_tensor(d, m, N, c), **kw)

    def sample(self, noise: NoisePath, seed: int = 0, grid: TorusGrid | None = None):
        return sample_coefficient_path(self, noise, seed, grid)


@dataclass(frozen=True)
class GradientNoiseSpec:
    """``(b_n u)_k = sum_j sigma_{jkn} d_j u_k`` with real ``base[j, k, n]``."""

    d: int
    base: np.ndarray = field(repr=False)
    family: CoefficientFamily = CoefficientFamily()
    K: float = 10.0

    def __post_init__(self):
        base = np.asarray(self.base, dtype=float)
        if base.ndim != 3 or base.shape[0] != self.d:
            raise ValueError(f"sigma base must have shape (d, N, J), got {base.shape}")
        object.__setattr__(self, "base", base)
        if self.family.space == "divfree":
            raise ValueError("divergence-free family applies to operator coefficients")

    @property
    def N(self) -> int:
        return self.base.shape[1]

    @property
    def J(self) -> int:
        return self.base.shape[2]

    @property
    def x_dependent(self) -> bool:
        return self.family.x_dependent

    @classmethod
    def scalar(cls, d: int, sigma, **kw) -> GradientNoiseSpec:
        """One noise direction per entry of ``sigma`` (length d), N = 1."""
        s = np.asarray(sigma, dtype=float).reshape(d, 1, 1)
        return cls(d, s, **kw)

    def sample(self, noise: NoisePath, seed: int = 0, grid: TorusGrid | None = None):
        return sample_coefficient_path(self, noise, seed, grid)


@dataclass(frozen=True)
class CoefficientPath:
    """Realized coefficient ``sum_r tau_r(t_i) T_r`` on a time grid.

    ``terms[r] = (tau_r, T_r)`` with ``tau_r`` of shape ``(*batch, M+1)`` (or
    ``(M+1,)``) and ``T_r`` of shape ``tensor_shape (+ grid.shape)``.
    """

    times: np.ndarray = field(repr=False)
    terms: tuple = field(repr=False)
    tensor_shape: tuple
    seed: int = 0
    grid: TorusGrid | None = None

    @property
    def spatial(self) -> bool:
        return any(T.ndim > len(self.tensor_shape) for _, T in self.terms)

    @property
    def batch_shape(self) -> tuple[int, ...]:
        return np.broadcast_shapes(*(tau.shape[:-1] for tau, _ in self.terms))

    def _expand(self, tau_i: np.ndarray, T: np.ndarray) -> np.ndarray:
        return tau_i.reshape(tau_i.shape + (1,) * T.ndim) * T

    def at(self, i: int) -> np.ndarray:
        """Tensor at time index ``i``: ``(*batch, *tensor_shape[, *space])``."""
        out = None
        for tau, T in self.terms:
            if T.ndim == len(self.tensor_shape) and self.spatial:
                T = T.reshape(T.shape + (1,) * (self.grid.d if self.grid else 0))
            v = self._expand(np.asarray(tau)[..., i], T)
            out = v if out is None else out + v
        return out

    @property
    def values(self) -> np.ndarray:
        """Materialized ``(*batch, M+1, *tensor_shape[, *space])``."""
        return np.stack([self.at(i) for i in range(len(self.times))],
                        axis=len(self.batch_shape))

    def changed(self, i: int) -> bool:
        """Whether any time factor differs between steps ``i-1`` and ``i``."""
        if i == 0:
            return True
        return any(not np.array_equal(np.asarray(tau)[..., i], np.asarray(tau)[..., i - 1])
                   for tau, _ in self.terms)

    def distinct_tensors(self) -> list[np.ndarray]:
        """The distinct realized tensors over all times and ensemble members."""
        taus = [np.broadcast_to(np.asarray(tau), self.batch_shape + (len(self.times),))
                for tau, _ in self.terms]
        rows = np.stack([t.reshape(-1) for t in taus], axis=-1)
        rows = np.unique(rows, axis=0)
        out = []
        for row in rows:
            acc = None
            for c, (_, T) in zip(row, self.terms):
                if T.ndim == len(self.tensor_shape) and self.spatial:
                    T = T.reshape(T.shape + (1,) * self.grid.d)
                acc = c * T if acc is None else acc + c * T
            out.append(acc)
        return out

    def window(self, i0: int, i1: int) -> CoefficientPath:
        """Restriction to the time indices ``i0..i1``."""
        terms = tuple((np.asarray(tau)[..., i0:i1 + 1], T) for tau, T in self.terms)
        return CoefficientPath(self.times[i0:i1 + 1], terms, self.tensor_shape, self.seed, self.grid)

    def scaled(self, c: float) -> CoefficientPath:
        terms = tuple((c * np.asarray(tau), T) for tau, T in self.terms)
        return CoefficientPath(self.times, terms, self.tensor_shape, self.seed, self.grid)

    def __add__(self, other: CoefficientPath) -> CoefficientPath:
        if self.tensor_shape != other.tensor_shape or len(self.times) != len(other.times):
            raise ValueError("incompatible coefficient paths")
        return CoefficientPath(self.times, self.terms + other.terms, self.tensor_shape,
                               self.seed, self.grid or other.grid)


class CoefficientBoundError(ValueError):
    pass


# --- family realization -----------------------------------------------------

def _time_factor(family: CoefficientFamily, noise: NoisePath, seed: int, tag: int) -> np.ndarray:
    times = noise.times
    if family.time == "constant":
        return np.ones(len(times))
    if family.time == "sinusoid":
        return 1 + family.time_amplitude * np.sin(2 * np.pi * family.frequency * times)
    # piecewise: switch times on the dyadic lattice T/levels, adapted values
    T = noise.T
    w = noise.brownian()[..., 0]
    flat_w = w.reshape(-1, len(times))
    seeds = np.broadcast_to(noise.seeds, noise.batch_shape).reshape(-1)
    tau = np.empty_like(flat_w)
    for b in range(flat_w.shape[0]):
        rng = stream(seed, int(seeds[b]), tag, 0x7069)
        lattice = np.arange(1, family.levels) * T / family.levels
        switch = np.sort(rng.choice(lattice, size=family.switches, replace=False))
        u = rng.uniform(-1, 1, size=family.switches + 1)
        idx = np.searchsorted(times, switch - 1e-12 * T)
        xi = np.empty(family.switches + 1)
        xi[0] = math.tanh(u[0])
        for k, i in enumerate(idx):
            xi[k + 1] = math.tanh(u[k + 1] + flat_w[b, i])
        level = np.searchsorted(idx, np.arange(len(times)), side="right")
        tau[b] = 1 + family.time_amplitude * xi[level]
    return tau.reshape(noise.batch_shape + (len(times),))


def _trig_polynomial(grid: TorusGrid, rng: np.random.Generator, modes: int) -> np.ndarray:
    """Real trigonometric polynomial with sup norm 1 and lattice frequencies
    of max-norm at most ``modes``."""
    x = grid.coordinates * (2 * math.pi / grid.period)
    phi = np.zeros(grid.shape)
    for _ in range(max(1, modes)):
        k = rng.integers(-modes, modes + 1, size=grid.d)
        if not k.any():
            k[0] = 1
        phase = rng.uniform(0, 2 * math.pi)
        phi += rng.uniform(0.5, 1.0) * np.cos(np.tensordot(k, x, axes=1) + phase)
    return phi / np.abs(phi).max()


def divergence_free_field(grid: TorusGrid, rng: np.random.Generator, modes: int = 2) -> np.ndarray:
    """``(d, d, *space)`` matrix field whose columns are divergence free,
    scaled to pointwise operator norm at most 1."""
    d = grid.d
    C = np.zeros((d, d) + grid.shape)
    if d == 1:
        return C
    for j in range(d):
        if d == 2:
            psi = fft(grid, _trig_polynomial(grid, rng, modes))
            C[0, j] = ifft(grid, derivative_symbol(grid, (0, 1)) * psi).real
            C[1, j] = -ifft(grid, derivative_symbol(grid, (1, 0)) * psi).real
        else:
            F = [fft(grid, _trig_polynomial(grid, rng, modes)) for _ in range(3)]

            def dd(axis, comp):
                a = [0, 0, 0]
                a[axis] = 1
                return ifft(grid, derivative_symbol(grid, a) * F[comp]).real
            C[0, j] = dd(1, 2) - dd(2, 1)
            C[1, j] = dd(2, 0) - dd(0, 2)
            C[2, j] = dd(0, 1) - dd(1, 0)
    opnorm = np.linalg.norm(np.moveaxis(C.reshape(d, d, -1), -1, 0), ord=2, axis=(1, 2)).max()
    return C / opnorm if opnorm > 0 else C


def _spatial_tensor(spec, grid: TorusGrid | None, seed: int, tag: int) -> np.ndarray:
    fam = spec.family
    base = spec.base
    if fam.space == "uniform":
        return base
    if grid is None:
        raise ValueError(f"space family {fam.space!r} needs a grid")
    rng = stream(seed, tag, 0x7370)
    if fam.space == "smooth":
        s = 1 + fam.space_amplitude * _trig_polynomial(grid, rng, fam.modes)
    elif fam.space == "jump":
        s = 1 + fam.space_amplitude * np.where(grid.coordinates[0] < grid.period / 2, 1.0, -1.0)
    else:
        C = divergence_free_field(grid, rng, fam.modes)
        N = base.shape[-1]
        lift = C[:, :, None, None] * np.eye(N).reshape((1, 1, N, N) + (1,) * grid.d)
        return base.reshape(base.shape + (1,) * grid.d) + fam.space_amplitude * lift
    return base.reshape(base.shape + (1,) * grid.d) * s


def _max_entry_norm(tensor: np.ndarray, n_tensor_axes: int, kind: str) -> float:
    """Largest pointwise entry norm: operator norm of each N x N block
    (operators) or l^2 over noise directions (sigma)."""
    if kind == "operator":
        P = tensor.shape[0]
        N = tensor.shape[2]
        blocks = np.moveaxis(tensor.reshape(P * P, N, N, -1), -1, 1).reshape(-1, N, N)
        if N == 1:
            return float(np.abs(blocks).max())
        return float(np.linalg.norm(blocks, ord=2, axis=(1, 2)).max())
    return float(np.sqrt(np.sum(np.abs(tensor) ** 2, axis=2)).max())


def sample_coefficient_path(spec, noise: NoisePath, seed: int = 0,
                            grid: TorusGrid | None = None) -> CoefficientPath:
    """Realize ``spec`` along ``noise``; deterministic in (seed, noise prefix).

    Raises :class:`CoefficientBoundError` when the realized coefficient breaks
    the declared sup bound ``spec.K``.
    """
    kind = "operator" if isinstance(spec, OperatorSpec) else "sigma"
    tag = 1 if kind == "operator" else 2
    tau = _time_factor(spec.family, noise, seed, tag)
    T = _spatial_tensor(spec, grid, seed, tag)
    bound = _max_entry_norm(T, T.ndim, kind) * float(np.abs(tau).max())
    if bound > spec.K * (1 + 1e-12):
        raise CoefficientBoundError(
            f"{kind} coefficient reaches sup norm {bound:.6g} > declared K = {spec.K}")
    tensor_shape = spec.base.shape
    return CoefficientPath(noise.times, ((tau, T),), tensor_shape, seed, grid)


# --- quasi-random sphere samples ---------------------------------------------

def sphere_samples(d: int, count: int) -> np.ndarray:
    """Low-discrepancy unit vectors (half sphere suffices: forms are even)."""
    if d == 1:
        return np.ones((1, 1))
    if d == 2:
        phi = np.pi * (np.arange(count) + 0.5) / count
        return np.stack([np.cos(phi), np.sin(phi)], axis=1)
    i = np.arange(count) + 0.5
    z = i / count  # upper half sphere
    golden = np.pi * (3 - math.sqrt(5))
    r = np.sqrt(1 - z**2)
    return np.stack([r * np.cos(golden * i), r * np.sin(golden * i), z], axis=1)


def _monomials(xi: np.ndarray, d: int, m: int) -> np.ndarray:
    idx = np.array(multi_indices(d, m))
    powers = idx[:, None, :] + idx[None, :, :]  # (P, P, d)
    return np.prod(xi[:, None, None, :] ** powers[None], axis=-1)  # (S, P, P)


def _form_minimum(tensors, d: int, m: int, samples: int) -> tuple[float, tuple]:
    """Min over tensors, points x and unit xi of the smallest eigenvalue of the
    Hermitian part of ``sum xi^{alpha+beta} a_{alpha beta}``."""
    xi = sphere_samples(d, samples)
    best, where = np.inf, None
    for ti, T in enumerate(tensors):
        P, _, N, _ = T.shape[:4]
        flat = T.reshape(P, P, N, N, -1)
        X = flat.shape[-1]
        chunk = max(1, 2_000_000 // max(1, X * N * N))
        for start in range(0, len(xi), chunk):
            mono = _monomials(xi[start:start + chunk], d, m)
            Mx = np.einsum("spq,pqabx->sxab", mono, flat)
            if N == 1:
                vals = Mx[..., 0, 0].real
            else:
                H = 0.5 * (Mx + np.conj(np.swapaxes(Mx, -1, -2)))
                vals = np.linalg.eigvalsh(H)[..., 0]
            k = np.unravel_index(np.argmin(vals), vals.shape)
            if vals[k] < best:
                best, where = float(vals[k]), (ti, start + k[0], k[1])
    if d == 3 and where is not None:
        best = _polish(tensors[where[0]], xi[where[1]], where[2], m, best)
    return best, where


def _polish(T, xi0, x_index, m, best):
    from scipy.optimize import minimize

    P, _, N, _ = T.shape[:4]
    A = T.reshape(P, P, N, N, -1)[..., x_index]

    def f(angles):
        th, ph = angles
        xi = np.array([[math.sin(th) * math.cos(ph), math.sin(th) * math.sin(ph), math.cos(th)]])
        M = np.einsum("spq,pqab->sab", _monomials(xi, 3, m), A)[0]
        return float(np.linalg.eigvalsh(0.5 * (M + M.conj().T))[0])

    th0 = math.acos(np.clip(xi0[2], -1, 1))
    ph0 = math.atan2(xi0[1], xi0[0])
    res = minimize(f, [th0, ph0], method="Nelder-Mead", options={"xatol": 1e-10, "fatol": 1e-14})
    return min(best, float(res.fun))


def _as_tensors(a) -> list[np.ndarray]:
    if isinstance(a, CoefficientPath):
        return a.distinct_tensors()
    a = np.asarray(a)
    return [a]


def ellipticity_margin_2m(path, m: int, samples: int = 2**14, d: int | None = None) -> float:
    """Min of ``Re sum xi^alpha xi^beta (a_{alpha beta} theta, theta)`` over unit
    xi, unit theta in C^N, sampled times and grid points.

    ``path`` is a :class:`CoefficientPath` or a single ``(P, P, N, N[, *space])``
    tensor.  The minimum over theta is exact (smallest eigenvalue of the
    Hermitian part); xi is sampled quasi-randomly.
    """
    tensors = _as_tensors(path)
    if d is None:
        d = path.grid.d if isinstance(path, CoefficientPath) and path.grid else _infer_d(tensors[0], m)
    return _form_minimum(tensors, d, m, samples)[0]


def _infer_d(T: np.ndarray, m: int) -> int:
    P = T.shape[0]
    for d in (1, 2, 3):
        if len(multi_indices(d, m)) == P:
            return d
    raise ValueError("cannot infer dimension from tensor shape")


def parabolicity_correction(sigma: np.ndarray) -> np.ndarray:
    """``Sigma_{ij}``: diagonal N x N blocks ``1/2 sum_n sigma_{ikn} sigma_{jkn}``.

    ``sigma`` has shape ``(..., d, N, J[, *space])``; the result has shape
    ``(..., d, d, N, N[, *space])`` with the spatial axes (if any) last.
    """
    sigma = np.asarray(sigma, dtype=float)
    d, N = sigma.shape[0], sigma.shape[1]
    diag = 0.5 * np.einsum("ikn...,jkn...->ijk...", sigma, sigma)
    out = np.zeros((d, d, N, N) + diag.shape[3:])
    for k in range(N):
        out[:, :, k, k] = diag[:, :, k]
    return out


def tilde_path(a_path: CoefficientPath, sigma_path: CoefficientPath) -> CoefficientPath:
    """Coefficient path of ``a_ij - Sigma_ij`` (second order)."""
    terms = list(a_path.terms)
    for r, (tau_r, S_r) in enumerate(sigma_path.terms):
        for s, (tau_s, S_s) in enumerate(sigma_path.terms):
            corr = 0.5 * np.einsum("ikn...,jkn...->ijk...", S_r, S_s)
            d, N = S_r.shape[0], S_r.shape[1]
            full = np.zeros((d, d, N, N) + corr.shape[3:], dtype=complex)
            for k in range(N):
                full[:, :, k, k] = corr[:, :, k]
            terms.append((-np.asarray(tau_r) * np.asarray(tau_s), full))
    return CoefficientPath(a_path.times, tuple(terms), a_path.tensor_shape, a_path.seed,
                           a_path.grid or sigma_path.grid)


def stochastic_parabolicity_margin(a_path, sigma_path, samples: int = 2**14) -> float:
    """Min of ``Re sum xi_i xi_j ((a_ij - Sigma_ij) theta, theta)`` over unit
    xi and theta.  Accepts coefficient paths or plain tensors
    (``(d, d, N, N[, *space])`` and ``(d, N, J[, *space])``)."""
    if isinstance(a_path, CoefficientPath):
        return ellipticity_margin_2m(tilde_path(a_path, sigma_path), 1, samples)
    a = np.asarray(a_path, dtype=complex)
    corr = parabolicity_correction(sigma_path)
    return ellipticity_margin_2m(a - corr, 1, samples)


def divergence_free_defect(a: np.ndarray, grid: TorusGrid) -> float:
    """``max_j || sum_i d_i a_ij ||_{L^2}`` computed spectrally; ``a`` has shape
    ``(d, d, [N, N,] *space)``."""
    a = np.asarray(a)
    d = grid.d
    if a.shape[-d:] != grid.shape:
        a = np.broadcast_to(a.reshape(a.shape + (1,) * d), a.shape + grid.shape)
    coef = fft(grid, a)
    worst = 0.0
    for j in range(d):
        div = 0
        for i in range(d):
            alpha = [0] * d
            alpha[i] = 1
            div = div + derivative_symbol(grid, alpha) * coef[i, j]
        v = ifft(grid, div).reshape((-1,) + grid.shape)
        worst = max(worst, float(lq_norm(grid, v, 2)))
    return worst


def lift_second_order(a: np.ndarray, grid: TorusGrid) -> np.ndarray:
    """Bring ``(d, d[, *space])`` scalar entries into ``(d, d, 1, 1[, *space])``."""
    a = np.asarray(a)
    d = grid.d
    if a.ndim == 2 or (a.ndim == 2 + d and a.shape[2:] == grid.shape):
        return a[:, :, None, None]
    return a


def matvec(block: np.ndarray, v: np.ndarray, d: int) -> np.ndarray:
    """``block v`` on the component axis; ``block`` is ``(N, N[, *space])``."""
    sp = "xyz"[:d]
    if block.ndim == 2:
        return np.einsum(f"ab,...b{sp}->...a{sp}", block, v)
    return np.einsum(f"ab{sp},...b{sp}->...a{sp}", block, v)


def _unit(d: int, i: int) -> list[int]:
    e = [0] * d
    e[i] = 1
    return e


def apply_second_order(grid: TorusGrid, a: np.ndarray, u: np.ndarray,
                       form: str = "nondivergence", dealias: bool = True) -> np.ndarray:
    """``-sum a_ij d_i d_j u`` or ``-div(a grad u)``.

    ``a`` has shape ``(d, d[, N, N][, *space])`` (scalar entries act diagonally),
    ``u`` has shape ``(..., N, *space)``.  Products with x-dependent entries are
    formed in physical space and 2/3-dealiased when ``dealias`` is set.
    """
    d = grid.d
    a = lift_second_order(a, grid)
    coef = fft(grid, u)
    grads = [derivative_symbol(grid, _unit(d, i)) for i in range(d)]
    if a.ndim == 4:
        out = 0
        for i in range(d):
            for j in range(d):
                out = out - matvec(a[i, j], grads[i] * grads[j] * coef, d)
        return ifft(grid, out)
    mask = grid.dealias_mask if dealias else 1.0
    if form == "divergence":
        du = [ifft(grid, grads[j] * coef) for j in range(d)]
        out = 0
        for i in range(d):
            flux = sum(matvec(a[i, j], du[j], d) for j in range(d))
            out = out - grads[i] * (fft(grid, flux) * mask)
        return ifft(grid, out)
    acc = 0
    for i in range(d):
        for j in range(d):
            acc = acc + matvec(a[i, j], ifft(grid, grads[i] * grads[j] * coef), d)
    return -ifft(grid, fft(grid, acc) * mask)


def w22_norm(grid: TorusGrid, u: np.ndarray) -> np.ndarray:
    """``(||u||^2 + sum_i ||d_i u||^2 + sum_{i,j} ||d_i d_j u||^2)^{1/2}``."""
    coef = fft(grid, u)
    k2 = grid.k2
    weight = 1 + k2 + k2**2
    ax = tuple(range(-grid.d - 1, 0))
    return np.sqrt(np.sum(weight * np.abs(coef) ** 2, axis=ax))


def bounded_L_ratio(a: np.ndarray, grid: TorusGrid, corpus: np.ndarray) -> float:
    """``max ||L u||_2 / ||u||_{W^{2,2}}`` over a corpus for ``L = -div a grad``.

    ``corpus`` has shape ``(K, 1, *space)`` (scalar test fields)."""
    Lu = apply_second_order(grid, a, corpus, form="divergence", dealias=False)
    num = lq_norm(grid, Lu, 2)
    den = w22_norm(grid, corpus)
    return float(np.max(num / den))

"""Weighted space-time norms of sample paths and Monte-Carlo aggregation.

Spatial norms are described by small tuples:

* ``("L", q)``: grid ``L^q``
* ``("H", s, q)``: Bessel potential ``H^{s,q}``
* ``("D", k, q)``: ``L^q`` norm of ``(sum_{|a|=k} |d^a u|^2)^{1/2}``
* ``("B", s, q, p)``: Littlewood-Paley Besov ``B^s_{q,p}``

or any callable mapping ``(grid, values)`` to norms over the trailing
``(N, *space)`` axes.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .evolution import SpaceTimePath
from .grid import (Field, TorusGrid, besov_norm, bessel_symbol, bessel_values, derivative_symbol,
                   fft, ifft, lq_norm, multi_indices)


@dataclass(frozen=True)
class WeightSpec:
    """Power weight ``w_alpha(t) = t^alpha`` on ``(0, T)`` for exponent ``p``."""

    p: float = 2.0
    alpha: float = 0.0
    T: float = 1.0

    def __post_init__(self):
        if self.p < 2:
            raise ValueError("p must be >= 2")
        if self.alpha < 0:
            raise ValueError("only alpha >= 0 is supported")
        if self.alpha > 0 and not self.alpha < self.p / 2 - 1:
            raise ValueError(f"alpha = {self.alpha} not admissible for p = {self.p} "
                             f"(need alpha < p/2 - 1)")

    def __call__(self, t):
        return np.asarray(t, dtype=float) ** self.alpha

    @property
    def delta(self) -> float:
        """Trace exponent ``1 - (1 + alpha)/p``."""
        return 1 - (1 + self.alpha) / self.p


@dataclass(frozen=True)
class _RawWeight:
    p: float
    alpha: float

    def __call__(self, t):
        return np.asarray(t, dtype=float) ** self.alpha


@dataclass(frozen=True)
class NormEstimate:
    value: float
    half_width: float
    samples: int
    grid: str
    descriptor: str
    extra: dict = field(default_factory=dict)

    @property
    def interval(self) -> tuple[float, float]:
        return self.value - self.half_width, self.value + self.half_width

    def row(self) -> dict:
        return {"norm_id": self.descriptor, "value": self.value, "ci": self.half_width,
                "seeds": self.samples, "grid": self.grid, **self.extra}


# --- spatial norms ----------------------------------------------------------------------

def derivative_magnitude(grid: TorusGrid, values: np.ndarray, k: int) -> np.ndarray:
    """Pointwise ``(sum_{|a|=k} |d^a u|^2)^{1/2}`` stacked as a component axis."""
    coef = fft(grid, values)
    parts = [ifft(grid, derivative_symbol(grid, a) * coef) for a in multi_indices(grid.d, k)]
    return np.concatenate(parts, axis=-grid.d - 1)


def spatial_norms(grid: TorusGrid, values: np.ndarray, spec=("L", 2.0)) -> np.ndarray:
    if callable(spec):
        return np.asarray(spec(grid, values))
    kind = spec[0]
    if kind == "L":
        return lq_norm(grid, values, spec[1])
    if kind == "H":
        return lq_norm(grid, bessel_values(grid, values, spec[1]), spec[2])
    if kind == "D":
        return lq_norm(grid, derivative_magnitude(grid, values, int(spec[1])), spec[2])
    if kind == "B":
        return np.asarray(besov_norm(Field(grid, values), spec[1], spec[2], spec[3]))
    raise ValueError(f"unknown spatial norm {spec!r}")


def _hilbert_features(grid: TorusGrid, values: np.ndarray, spec):
    """Coefficient features whose Euclidean distance is the spatial distance,
    available for ``L^2`` and ``H^{s,2}`` norms (Parseval); None otherwise."""
    if callable(spec) or spec[0] not in ("L", "H") or spec[-1] != 2:
        return None
    s = 0.0 if spec[0] == "L" else spec[1]
    coef = fft(grid, values) * bessel_symbol(grid, s)
    flat = coef.reshape(coef.shape[: -grid.d - 1] + (-1,))
    scale = np.abs(flat).reshape(-1, flat.shape[-1]).max(axis=0)
    keep = scale > 1e-14 * max(scale.max(), 1e-300)
    return flat[..., keep] if keep.any() else flat[..., :1] * 0


def _pair_norms(grid, values, spec, time_axis: int, power: float = 1.0):
    """Returns ``dist(k)``: ``||u(t_{i+k}) - u(t_i)||^power`` for all valid ``i``,
    shape ``(*batch, M+1-k)``."""
    feats = _hilbert_features(grid, values, spec)
    if feats is not None:
        f = np.moveaxis(feats, time_axis, 0)

        def dist(k):
            diff = f[k:] - f[:-k]
            sq = np.sum(diff.real**2 + diff.imag**2, axis=-1)
            return np.moveaxis(sq if power == 2 else sq ** (power / 2), 0, -1)
        return dist
    v = np.moveaxis(values, time_axis, 0)

    def dist(k):
        n = spatial_norms(grid, v[k:] - v[:-k], spec)
        return np.moveaxis(n**power, 0, -1)
    return dist


# --- time norms ---------------------------------------------------------------------------

def weighted_lp_time_norm(path: SpaceTimePath, w, spatial=("L", 2.0)) -> np.ndarray:
    """``(int_0^T ||u(t)||_X^p t^alpha dt)^{1/p}`` by the midpoint rule (fields
    at cell midpoints linearly interpolated); one value per batch entry.

    ``w`` is a :class:`WeightSpec` or a bare ``(p, alpha)`` pair; the pair skips
    the admissibility check, the quadrature is meaningful for any alpha > -1.
    """
    if not isinstance(w, WeightSpec):
        p_exp, alpha = w
        w = _RawWeight(float(p_exp), float(alpha))
    ax = path.time_axis
    v = path.values
    mid = 0.5 * (np.take(v, range(1, v.shape[ax]), axis=ax) + np.take(v, range(0, v.shape[ax] - 1), axis=ax))
    t = path.times
    tm = 0.5 * (t[1:] + t[:-1])
    norms = spatial_norms(path.grid, mid, spatial)
    integrand = norms ** w.p * w(tm) * np.diff(t)
    return np.sum(integrand, axis=-1) ** (1 / w.p)


def fractional_seminorm(path: SpaceTimePath, beta: float, p: float = 2.0, alpha: float = 0.0,
                        spatial=("L", 2.0)) -> np.ndarray:
    """``(int int ||u(s+h) - u(s)||^p s^alpha h^{-beta p - 1} dh ds)^{1/p}``.

    Double Riemann sum on a uniform grid: ``h = k dt`` for ``k >= 1`` and ``s``
    over the cells ``[t_i, t_{i+1}]`` with ``t_{i+k} <= T``, the weight taken at
    the cell midpoint.
    """
    t = path.times
    dt = np.diff(t)
    if not np.allclose(dt, dt[0], rtol=1e-9):
        raise ValueError("fractional seminorm needs a uniform time grid")
    if not 0 < beta < 1:
        raise ValueError("beta must lie in (0, 1)")
    h0 = dt[0]
    M = len(t) - 1
    dist = _pair_norms(path.grid, path.values, spatial, path.time_axis, power=p)
    s_weight = ((t[:-1] + 0.5 * h0) ** alpha) * h0
    total = 0.0
    for k in range(1, M + 1):
        total = total + (dist(k) @ s_weight[: M + 1 - k]) * (k * h0) ** (-beta * p - 1) * h0
    return total ** (1 / p)


def holder_seminorm(path: SpaceTimePath, gamma: float, eps: float = 0.0,
                    spatial=("L", 2.0)) -> np.ndarray:
    """``max_{s<t in [eps,T]} ||u(t) - u(s)|| / |t-s|^gamma`` over grid pairs."""
    if not 0 < gamma < 1:
        raise ValueError("gamma must lie in (0, 1)")
    sel = path.times >= eps - 1e-12
    v = np.compress(sel, path.values, axis=path.time_axis)
    t = path.times[sel]
    dist = _pair_norms(path.grid, v, spatial, path.time_axis)
    best = 0.0
    for k in range(1, len(t)):
        ratio = dist(k) / (t[k:] - t[:-k]) ** gamma
        best = np.maximum(best, np.max(ratio, axis=-1))
    return best


def holder_norm(path: SpaceTimePath, gamma: float, eps: float = 0.0,
                spatial=("L", 2.0)) -> np.ndarray:
    """Hölder seminorm plus the sup norm on ``[eps, T]``."""
    sel = path.times >= eps - 1e-12
    sup = np.max(spatial_norms(path.grid, np.compress(sel, path.values, axis=path.time_axis),
                               spatial), axis=-1)
    return holder_seminorm(path, gamma, eps, spatial) + sup


def smr_surrogate(path: SpaceTimePath, beta: float, theta: float, p: float = 2.0,
                  alpha: float = 0.0, m: int = 1, q: float = 2.0):
    """Unguarded surrogate: ``(||U||_{L^p(w; H^{2m(1-theta),q})},
    [U]_{W^{beta,p}(w; H^{2m(1-theta),q})})`` per batch entry."""
    spatial = ("H", 2 * m * (1 - theta), q)
    w = WeightSpec(p, alpha, float(path.times[-1]))
    return (weighted_lp_time_norm(path, w, spatial),
            fractional_seminorm(path, beta, p, alpha, spatial))


def smr_norm(path: SpaceTimePath, theta: float, p: float = 2.0, alpha: float = 0.0, m: int = 1,
             q: float = 2.0, gap: float = 0.05) -> np.ndarray:
    """Computable upper surrogate of the ``H^{theta,p}(I, w_alpha; H^{2m(1-theta),q})``
    norm: the weighted ``L^p`` part plus the difference seminorm at
    ``beta = theta + gap``."""
    if not 0 <= theta < 0.5:
        raise ValueError("theta must lie in [0, 1/2)")
    if not 0 < theta + gap < 1:
        raise ValueError("theta + gap must lie in (0, 1)")
    lp, semi = smr_surrogate(path, theta + gap, theta, p, alpha, m, q)
    return lp + semi


# --- aggregation over omega -------------------------------------------------------------------

def mc_lp_omega(values, p: float = 2.0, n_boot: int = 2000, seed: int = 0,
                descriptor: str = "", grid: str = "") -> NormEstimate:
    """``(mean |x|^p)^{1/p}`` over seeds with a 95% percentile-bootstrap half width."""
    x = np.abs(np.asarray(values, dtype=float)).reshape(-1)
    if x.size < 2:
        raise ValueError("need at least two seeds for a Monte-Carlo estimate")
    value = float(np.mean(x**p) ** (1 / p))
    rng = np.random.default_rng(seed)
    stats = np.empty(n_boot)
    xp = x**p
    for b in range(0, n_boot, 200):
        idx = rng.integers(0, x.size, size=(min(200, n_boot - b), x.size))
        stats[b:b + idx.shape[0]] = np.mean(xp[idx], axis=1) ** (1 / p)
    lo, hi = np.quantile(stats, [0.025, 0.975])
    return NormEstimate(value, float(max(hi - value, value - lo)), x.size, grid, descriptor)


def mc_mean(values, n_boot: int = 2000, seed: int = 0, descriptor: str = "") -> NormEstimate:
    """Sample mean with a 95% percentile-bootstrap half width."""
    x = np.asarray(values, dtype=float).reshape(-1)
    if x.size < 2:
        raise ValueError("need at least two seeds for a Monte-Carlo estimate")
    rng = np.random.default_rng(seed)
    stats = np.array([x[rng.integers(0, x.size, x.size)].mean() for _ in range(n_boot)])
    lo, hi = np.quantile(stats, [0.025, 0.975])
    m = float(x.mean())
    return NormEstimate(m, float(max(hi - m, m - lo)), x.size, "", descriptor)


def empirical_order(steps, errors) -> float:
    """Least-squares slope of ``log error`` against ``log step``."""
    return float(np.polyfit(np.log(np.asarray(steps, float)), np.log(np.asarray(errors, float)), 1)[0])

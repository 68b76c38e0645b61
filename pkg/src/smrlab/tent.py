"""Tent-space norms, aperture change, off-diagonal profiles and maximal
regularity experiments on the torus.

Time lives on a log grid: cells ``[t_l, t_l r]`` with values at the geometric
midpoints, so ``int h(t) dt / t^{1+sigma}`` becomes
``sum_l h(t_l) t_l^{-sigma} dlog_l``.  Cone averages use periodic balls of
radius ``aperture * sqrt(t)`` normalized by their point count, which makes
the ``p = 2`` norm equal to the weighted ``L^2`` norm up to rounding.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .coefficients import (CoefficientPath, _trig_polynomial, apply_second_order,
                           divergence_free_defect, divergence_free_field)
from .evolution import (EvolutionFamily, deterministic_convolution, stochastic_convolution)
from .grid import TorusGrid, fft, gradient, ifft
from .noise import generate_noise, stream
from .normlab import NormEstimate


def log_time_grid(t_min: float, t_max: float, r: float = 2 ** 0.25):
    """Edges, geometric midpoints and log widths of cells covering
    ``[t_min, t_max]``; the ratio is shrunk so the cells tile exactly."""
    if not 0 < t_min < t_max:
        raise ValueError("need 0 < t_min < t_max")
    cells = max(1, math.ceil(math.log(t_max / t_min) / math.log(r) - 1e-9))
    edges = np.geomspace(t_min, t_max, cells + 1)
    mids = np.sqrt(edges[1:] * edges[:-1])
    return edges, mids, np.diff(np.log(edges))


@dataclass
class TentField:
    """``g(t, x)`` on log-cell midpoints; ``values`` is ``(*batch, L, K, *space)``."""

    grid: TorusGrid
    edges: np.ndarray = field(repr=False)
    values: np.ndarray = field(repr=False)
    sigma: float = 0.0

    def __post_init__(self):
        self.edges = np.asarray(self.edges, dtype=float)
        if np.any(np.diff(self.edges) <= 0) or self.edges[0] <= 0:
            raise ValueError("log time edges must be positive and strictly increasing")
        if self.edges[-1] > (self.grid.period / 2) ** 2 * (1 + 1e-12):
            raise ValueError("t_max exceeds (period/2)^2: cones would wrap around the torus")
        L = len(self.edges) - 1
        if self.values.shape[self.time_axis] != L:
            raise ValueError(f"values carry {self.values.shape[self.time_axis]} time slices, "
                             f"grid has {L} cells")
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")

    @property
    def time_axis(self) -> int:
        return self.values.ndim - self.grid.d - 2

    @property
    def times(self) -> np.ndarray:
        return np.sqrt(self.edges[1:] * self.edges[:-1])

    @property
    def dlog(self) -> np.ndarray:
        return np.diff(np.log(self.edges))

    @property
    def K(self) -> int:
        return self.values.shape[-self.grid.d - 1]

    @classmethod
    def from_function(cls, grid: TorusGrid, edges, fn, sigma: float = 0.0) -> TentField:
        """Sample ``fn(t) -> (*batch, K, *space)`` at the cell midpoints."""
        edges = np.asarray(edges, dtype=float)
        mids = np.sqrt(edges[1:] * edges[:-1])
        vals = [np.asarray(fn(t)) for t in mids]
        base = vals[0].ndim - grid.d - 1
        return cls(grid, edges, np.stack(vals, axis=base), sigma)

    def with_values(self, values) -> TentField:
        return TentField(self.grid, self.edges, values, self.sigma)

    def piecewise(self, times: np.ndarray, extra: int = 0) -> np.ndarray:
        """Values on an arbitrary time grid inside the edges, constant per cell
        (zero outside); the time axis sits before ``extra + 1 + d`` axes."""
        idx = np.searchsorted(self.edges, times, side="right") - 1
        ax = self.time_axis
        inside = (idx >= 0) & (idx < len(self.edges) - 1)
        out = np.take(self.values, np.clip(idx, 0, len(self.edges) - 2), axis=ax)
        mask = inside.reshape((-1,) + (1,) * (self.values.ndim - ax - 1))
        return out * mask


@dataclass(frozen=True)
class TentNormParams:
    p: float = 2.0
    sigma: float = 0.0
    aperture: float = 1.0

    def __post_init__(self):
        if not 1 <= self.p < math.inf:
            raise ValueError("p must lie in [1, inf)")
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")
        if self.aperture < 1:
            raise ValueError("aperture must be >= 1")


def periodic_ball(grid: TorusGrid, radius: float) -> np.ndarray:
    """Indicator of the periodic ball around the origin, normalized to sum 1."""
    x = grid.coordinates
    dist2 = np.sum(np.minimum(x, grid.period - x) ** 2, axis=0)
    ball = (dist2 <= radius**2 * (1 + 1e-12)).astype(float)
    return ball / ball.sum()


def ball_average(grid: TorusGrid, values: np.ndarray, radius: float) -> np.ndarray:
    """Periodic ball means of ``values`` over the trailing spatial axes."""
    axes = tuple(range(-grid.d, 0))
    kernel = np.fft.fftn(periodic_ball(grid, radius), axes=axes)
    return np.fft.ifftn(np.fft.fftn(values, axes=axes) * kernel, axes=axes).real


def _params(p, sigma, aperture, g):
    return TentNormParams(p, g.sigma if sigma is None else sigma, aperture)


def square_function(g: TentField, sigma: float | None = None, aperture: float = 1.0) -> np.ndarray:
    """``x -> int avg_{B(x, aperture sqrt t)} |g|^2 dt / t^{1+sigma}``, shape ``(*batch, *space)``."""
    sigma = g.sigma if sigma is None else sigma
    grid = g.grid
    sq = np.sum(np.abs(g.values) ** 2, axis=-grid.d - 1)
    ax = g.time_axis
    total = 0.0
    for l, (t, w) in enumerate(zip(g.times, g.dlog)):
        sl = np.take(sq, l, axis=ax)
        total = total + ball_average(grid, sl, aperture * math.sqrt(t)) * (t ** -sigma * w)
    return np.asarray(total)


def tent_norm(g: TentField, p: float = 2.0, sigma: float | None = None,
              aperture: float = 1.0) -> np.ndarray:
    """``T^{p,2}_sigma`` norm, one value per batch entry (torus volume 1)."""
    prm = _params(p, sigma, aperture, g)
    S = square_function(g, prm.sigma, prm.aperture)
    axes = tuple(range(-g.grid.d, 0))
    return np.mean(np.maximum(S, 0.0) ** (prm.p / 2), axis=axes) ** (1 / prm.p)


def weighted_l2(g: TentField, sigma: float | None = None) -> np.ndarray:
    """``(int int |g|^2 dx dt / t^{1+sigma})^{1/2}`` with the same quadrature."""
    sigma = g.sigma if sigma is None else sigma
    grid = g.grid
    sq = np.sum(np.abs(g.values) ** 2, axis=-grid.d - 1)
    per_t = np.mean(sq, axis=tuple(range(-grid.d, 0)))
    return np.sqrt(np.sum(per_t * g.times ** -sigma * g.dlog, axis=-1))


def aperture_ratio(g: TentField, p: float = 2.0, sigma: float | None = None,
                   alpha: float = 1.0) -> np.ndarray:
    """Tent norm at aperture ``alpha`` over the norm at aperture 1."""
    if alpha < 1:
        raise ValueError("alpha must be >= 1")
    if alpha == 1:
        return np.ones(np.shape(tent_norm(g, p, sigma)))
    return tent_norm(g, p, sigma, alpha) / tent_norm(g, p, sigma, 1.0)


def aperture_slope(g: TentField, p: float, sigma: float | None = None,
                   alphas=(1, 2, 4, 8)) -> np.ndarray:
    """Least-squares slope of ``log ratio`` against ``log alpha`` per batch entry."""
    la = np.log(np.asarray(alphas, dtype=float))
    ratios = np.stack([np.log(aperture_ratio(g, p, sigma, a)) for a in alphas], axis=-1)
    la = la - la.mean()
    return (ratios - ratios.mean(axis=-1, keepdims=True)) @ la / (la @ la)


def random_tent_corpus(grid: TorusGrid, edges, size: int, seed: int = 0, K: int = 1,
                       localized: bool = True) -> TentField:
    """Random fields; ``localized`` ones are Gaussian bumps at random centers,
    widths and times (the extreme cases for aperture change)."""
    rng = stream(seed, 0x7465)
    edges = np.asarray(edges)
    L = len(edges) - 1
    vals = np.zeros((size, L, K) + grid.shape)
    x = grid.coordinates
    for b in range(size):
        if localized:
            for _ in range(3):
                c = rng.uniform(0, grid.period, size=grid.d).reshape((grid.d,) + (1,) * grid.d)
                diff = np.abs(x - c)
                diff = np.minimum(diff, grid.period - diff)
                l = rng.integers(0, L)
                width = math.sqrt(edges[l]) * rng.uniform(0.2, 1.0)
                amp = rng.normal(size=K).reshape((K,) + (1,) * grid.d)
                vals[b, l] += amp * np.exp(-np.sum(diff**2, axis=0) / (2 * width**2))
        else:
            vals[b] = rng.normal(size=(L, K) + grid.shape)
    return TentField(grid, edges, vals)


# --- off-diagonal decay -------------------------------------------------------------------------

def heat_family(grid: TorusGrid):
    """``K(t, s) = exp((t-s) Delta)``."""
    def K(t, s, u):
        return ifft(grid, np.exp(-(t - s) * grid.k2) * fft(grid, u))
    return K


def resolvent_family(grid: TorusGrid, a, form: str = "divergence"):
    """``K(t, s) = tau L(t) (I - tau Delta)^{-1}`` with ``tau = t - s`` and
    ``L(t) = -div a(t) grad``; ``a`` is a tensor field ``(d, d[, *space])`` or a
    callable ``t -> tensor``.  The Nyquist modes are removed first: the grid
    operator annihilates them, so they would pass as a non-local identity."""
    keep = ~grid.nyquist_mask()

    def K(t, s, u):
        tau = t - s
        v = ifft(grid, fft(grid, u) * keep / (1 + tau * grid.k2))
        coef = a(t) if callable(a) else a
        return tau * apply_second_order(grid, coef, v, form, dealias=False)
    return K


def strip_sets(grid: TorusGrid, width: int, gap: int):
    """Masks of ``F = {i_0 < width}`` and ``E = {width + gap <= i_0 < 2 width + gap}``
    (strips across the first axis) and their periodic distance."""
    n = grid.n
    if 2 * (width + gap) > n:
        raise ValueError("strips do not fit: need 2 (width + gap) <= n")
    idx = np.indices(grid.shape)[0]
    F = idx < width
    E = (idx >= width + gap) & (idx < 2 * width + gap)
    return E, F, set_distance(grid, E, F)


def set_distance(grid: TorusGrid, E: np.ndarray, F: np.ndarray) -> float:
    """Periodic distance between the point sets."""
    x = grid.coordinates.reshape(grid.d, -1)
    pe = x[:, E.reshape(-1)]
    pf = x[:, F.reshape(-1)]
    best = math.inf
    for i in range(pf.shape[1]):
        diff = np.abs(pe - pf[:, i:i + 1])
        diff = np.minimum(diff, grid.period - diff)
        best = min(best, float(np.sqrt(np.min(np.sum(diff**2, axis=0)))))
    return best


def strip_probes(grid: TorusGrid, width: int, count: int = 24, seed: int = 0,
                 modes: int = 3) -> np.ndarray:
    """Smooth probes supported in the strip ``0 <= x_0 < width h``: a
    ``C^infinity`` bump across the strip times random trigonometric
    polynomials.  Point masses are avoided on purpose: their spectral images
    ring across the whole grid."""
    x0 = grid.coordinates[0]
    s = x0 / (width * grid.spacing)
    inside = (s > 0) & (s < 1)
    bump = np.zeros(grid.shape)
    si = s[inside]
    bump[inside] = np.exp(-1.0 / (si * (1 - si)) + 4.0)
    rng = stream(seed, 0x7072)
    out = np.empty((count, 1) + grid.shape, dtype=complex)
    k = np.arange(-modes, modes + 1).reshape((-1,) + (1,) * grid.d)
    waves = np.exp(2j * math.pi * k * s)
    for c in range(count):
        amp = rng.normal(size=len(k)) + 1j * rng.normal(size=len(k))
        across = np.tensordot(amp, waves, axes=1)
        if grid.d > 1:
            across = across * (1.5 + _trig_polynomial(grid, rng, modes))
        out[c, 0] = bump * across
    return out


def attenuation(grid: TorusGrid, K, t: float, s: float, E, F, probes=None, chunk: int = 256,
                rcond: float = 1e-6) -> float:
    """``sup ||1_E K(t,s) 1_F u||_2 / ||1_F u||_2``.

    With ``probes`` the supremum runs over their linear span (a small
    generalized singular value problem).  Without, it runs over all of
    ``L^2(F)`` on the grid via point masses, which also picks up grid-scale
    ringing of spectral operators.
    """
    if probes is None:
        pts = np.flatnonzero(F.reshape(-1))
        probes = np.zeros((len(pts), 1, grid.size), dtype=complex)
        probes[np.arange(len(pts)), 0, pts] = 1.0
        probes = probes.reshape((len(pts), 1) + grid.shape)
    u = np.asarray(probes, dtype=complex) * F
    rows = np.flatnonzero(E.reshape(-1))
    images = np.concatenate([(K(t, s, u[c0:c0 + chunk])).reshape(len(u[c0:c0 + chunk]), -1)[:, rows]
                             for c0 in range(0, len(u), chunk)], axis=0)
    # u = W S Vh, so the rows of Vh (orthonormal) are (W^H u) / S
    W, sv, _ = np.linalg.svd(u.reshape(len(u), -1), full_matrices=False)
    keep = sv > rcond * sv[0]
    coeff = W[:, keep].conj() / sv[keep]
    return float(np.linalg.norm(coeff.T @ images, ord=2))


def offdiag_profile(grid: TorusGrid, K, pairs, elapsed, probes=None) -> list[dict]:
    """Rows ``(distance2, elapsed, ratio, attenuation)`` for every set pair
    ``(E, F)`` and every ``(t, s)``."""
    rows = []
    for E, F in pairs:
        dist = set_distance(grid, E, F)
        for t, s in elapsed:
            att = attenuation(grid, K, t, s, E, F, probes)
            rows.append({"distance2": dist**2, "elapsed": t - s, "ratio": dist**2 / (t - s),
                         "attenuation": att})
    return rows


def profile_at_ratios(grid: TorusGrid, K, ratios, width: int, gap: int, probes="smooth"):
    """Profile over ``distance^2 / elapsed`` values for one strip pair, varying
    the elapsed time at fixed distance; ``probes="smooth"`` uses
    :func:`strip_probes`."""
    E, F, dist = strip_sets(grid, width, gap)
    if isinstance(probes, str):
        probes = strip_probes(grid, width)
    elapsed = [(dist**2 / r, 0.0) for r in ratios]
    return offdiag_profile(grid, K, [(E, F)], elapsed, probes)


def grid_leakage(grid: TorusGrid, width: int, gap: int, family=None, ratio: float = 4096.0) -> float:
    """Attenuation of an ``a = 1`` family (heat by default) at a ratio where
    the continuum value is negligible: what remains is discretization leakage."""
    K = heat_family(grid) if family is None else family
    return profile_at_ratios(grid, K, [ratio], width, gap)[0]["attenuation"]


def fit_decay_order(rows, leakage: float = 0.0) -> float:
    """``m`` in ``attenuation ~ C (1 + ratio)^{-m}`` by least squares after
    subtracting ``leakage``; rows at or below the leakage are dropped."""
    r = np.array([row["ratio"] for row in rows])
    a = np.array([row["attenuation"] for row in rows]) - leakage
    keep = a > 0
    if keep.sum() < 2:
        raise ValueError("fewer than two rows above the leakage floor")
    slope = np.polyfit(np.log1p(r[keep]), np.log(a[keep]), 1)[0]
    return float(-slope)


# --- rough coefficients -----------------------------------------------------------------------

def rough_coefficient(grid: TorusGrid, times, edges, seed: int = 0, divergence_free: bool = False,
                      switches: int = 6, time_amplitude: float = 0.5,
                      space_amplitude: float = 0.5, modes: int = 2) -> CoefficientPath:
    """``a(t, x) = tau(t) (I + e C(x))`` with ``tau`` piecewise constant, jumping
    at ``switches`` of the log-cell edges.  ``C`` is a divergence-free matrix
    field or the scalar trigonometric polynomial times ``I``.  The realization
    depends on ``seed`` and the edges only, so it is shared across solver grids."""
    rng = stream(seed, 0x7275)
    d = grid.d
    edges = np.asarray(edges)
    inner = edges[1:-1]
    jumps = np.sort(rng.choice(inner, size=min(switches, len(inner)), replace=False))
    xi = rng.uniform(-1, 1, size=len(jumps) + 1)
    level = np.searchsorted(jumps, np.asarray(times) + 1e-12 * edges[-1], side="right")
    tau = 1 + time_amplitude * xi[level]
    eye = np.eye(d).reshape(d, d, 1, 1)
    space_rng = stream(seed, 0x7370)
    if divergence_free:
        C = divergence_free_field(grid, space_rng, modes)
    else:
        C = _trig_polynomial(grid, space_rng, modes) * np.eye(d).reshape((d, d) + (1,) * d)
    spatial = eye.reshape(eye.shape + (1,) * d) + space_amplitude * C[:, :, None, None]
    return CoefficientPath(np.asarray(times), ((tau, spatial),), (d, d, 1, 1), seed, grid)


def solver_times(edges, substeps: int, t0: float | None = None) -> np.ndarray:
    """Geometric refinement of every log cell into ``2 substeps`` steps (the
    cell midpoints become nodes), preceded by ``t0`` when given."""
    edges = np.asarray(edges)
    parts = [np.geomspace(a, b, 2 * substeps + 1)[:-1] for a, b in zip(edges[:-1], edges[1:])]
    t = np.concatenate(parts + [edges[-1:]])
    if t0 is not None:
        t = np.concatenate([[t0], t])
    return t


def _midpoint_stride(times, L: int) -> int:
    """Largest stride whose stored slices include every cell midpoint."""
    steps = len(times) - 1
    return steps // (2 * L) if steps % (2 * L) == 0 else 1


def _at_midpoints(path_values, times, mids, time_axis):
    idx = np.searchsorted(times, mids - 1e-12 * mids)
    if not np.allclose(times[idx], mids, rtol=1e-12):
        raise ValueError("solver grid does not contain the cell midpoints")
    return np.take(path_values, idx, axis=time_axis)


def tent_maxreg_experiment(a: CoefficientPath, f: TentField, p: float = 2.0,
                           sigma: float | None = None, grid_label: str = ""):
    """``||M f||_{T^{p,2}_{sigma+2}} / ||f||_{T^{p,2}_sigma}`` with
    ``M f(t) = int_0^t Gamma(t, s) f(s) ds`` and ``f`` constant per log cell.

    ``a`` must be realized on a solver grid containing the log-cell edges and
    midpoints of ``f`` (see :func:`solver_times`).
    """
    sigma = f.sigma if sigma is None else sigma
    den = tent_norm(f, p, sigma)
    if not np.any(den):
        return 0.0, NormEstimate(0.0, 0.0, 1, grid_label, f"maxreg p={p} sigma={sigma}")
    gamma = EvolutionFamily(f.grid, a)
    times = gamma.times
    forcing = f.piecewise(times[:-1])
    forcing = np.concatenate([forcing, np.take(forcing, [-1], axis=f.time_axis)], axis=f.time_axis)
    U = deterministic_convolution(gamma, forcing, _midpoint_stride(times, len(f.times)))
    Mf = f.with_values(_at_midpoints(U.values, U.times, f.times, U.time_axis))
    ratio = float(np.max(tent_norm(Mf, p, sigma + 2) / den))
    return ratio, NormEstimate(ratio, 0.0, 1, grid_label, f"maxreg p={p} sigma={sigma}")


def tent_stochastic_experiment(a: CoefficientPath, g: TentField, seeds, p: float = 2.0,
                               sigma: float | None = None, defect_tol: float = 1e-8,
                               grid_label: str = "", chunk: int = 50):
    """``E||U||^p_{T_{sigma+2}} / (E||g||^p_{T_{sigma+1}(H)} + E||grad g||^p_{T_sigma(H^d)})``
    for ``dU + L U dt = g dW``, ``U(0) = 0``; ``g`` has one component per
    noise direction (``K = J``) and is deterministic, hence adapted.

    Returns ``(ratio, NormEstimate)``; the estimate carries a bootstrap half
    width and, when ``a`` is not divergence free, a warning in ``extra``.
    """
    from .normlab import mc_mean

    sigma = g.sigma if sigma is None else sigma
    grid = g.grid
    d = grid.d
    extra = {}
    defect = max(divergence_free_defect(a.at(i), grid) for i in range(len(a.times))
                 if i == 0 or a.changed(i))
    if defect > defect_tol:
        extra["warning"] = f"divergence-free defect {defect:.3e}"
    grad = g.with_values(gradient(grid, g.values).reshape(
        g.values.shape[:-d - 1] + (d * g.K,) + grid.shape))
    den = float(tent_norm(g, p, sigma + 1) ** p + tent_norm(grad, p, sigma) ** p)
    label = f"stochastic p={p} sigma={sigma}"
    if den == 0:
        return 0.0, NormEstimate(0.0, 0.0, np.size(seeds), grid_label, label, extra)
    gamma = EvolutionFamily(grid, a)
    stride = _midpoint_stride(gamma.times, len(g.times))
    gv = g.piecewise(gamma.times)[:, :, None]          # (M+1, J = K, N = 1, *space)
    seeds = np.atleast_1d(np.asarray(seeds))
    per_seed = []
    for c0 in range(0, len(seeds), chunk):
        noise = generate_noise(g.K, gamma.times, seeds[c0:c0 + chunk])
        U = stochastic_convolution(gamma, gv, noise, stride)
        Uc = g.with_values(_at_midpoints(U.values, U.times, g.times, U.time_axis))
        per_seed.append(tent_norm(Uc, p, sigma + 2) ** p)
    per_seed = np.concatenate(per_seed)
    est = mc_mean(per_seed, descriptor=label)
    ratio = est.value / den
    return ratio, NormEstimate(ratio, est.half_width / den, est.samples, grid_label, label, extra)

"""Picard iteration for ``dU + A U dt = F(t, U) dt + (B U + G(t, U)) dW``.

The linearized map ``L(phi)`` solves the linear problem with forcings
``F(t, phi)`` and ``G(t, phi)``.  Contraction is measured in

    |||phi||| = ||phi||_{Z1} + M ||phi||_{Z0},
    M = (1 - nu)^{-1} (K_det Lt_F + K_st Lt_G),

with ``Z1 = L^p(Omega; L^p(I, w_alpha; H^{2m,q}))`` and
``Z0 = L^p(Omega; L^p(I, w_alpha; L^q))``.  The horizon is covered by windows
whose length is bisected until the measured one-window ratio is at most
``1 - nu/2``; each window restarts from the value reached at its left end.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .coefficients import sphere_samples, multi_indices
from .evolution import (LinearProblem, SpaceTimePath, _initial, _resolve_forcing, realize,
                        solve_linear)
from .grid import Field, TorusGrid, fft, ifft, random_field
from .noise import NoisePath
from .normlab import WeightSpec, spatial_norms, weighted_lp_time_norm

ZERO_SUM_SLACK = 0.5  # 1 - nu used when every top-order Lipschitz constant vanishes


class ContractionError(ValueError):
    """Declared constants violate ``K_det L_F + K_st L_G < 1``."""


class LipschitzViolation(ValueError):
    pass


# --- nonlinearities ------------------------------------------------------------------------

@dataclass(frozen=True)
class Nonlinearity:
    """Field map with declared Lipschitz split.

    For drifts: ``||F(u) - F(v)||_{L^q} <= L ||D^{2m}(u-v)||_{L^q} + Lt ||u-v||_{H^{2m-1,q}}``.
    For noise terms the left side is ``||G(u) - G(v)||_{H^{m,q}(l^2)}`` and the
    output carries a noise-direction axis in front of N.
    ``radius`` bounds the sup norm of the fields on which the constants hold.
    """

    name: str
    fn: object = field(repr=False)
    L: float = 0.0
    Lt: float = 0.0
    noise: bool = False
    radius: float = math.inf

    def __call__(self, t, u):
        return self.fn(t, u)


def laplacian_power_constant(d: int, m: int, samples: int = 4096) -> float:
    """``sup |k|^{2m} / (sum_{|a|=2m} k^{2a})^{1/2}`` over unit ``k``: bounds
    ``||Delta^m w||_2`` by ``||D^{2m} w||_2``."""
    xi = sphere_samples(d, samples)
    powers = np.array(multi_indices(d, 2 * m))
    denom = np.sqrt(np.sum(np.prod(xi[:, None, :] ** (2 * powers[None]), axis=-1), axis=1))
    return float(np.max(1.0 / denom))


def make_nonlinearity(kind: str, grid: TorusGrid, m: int = 1, J: int = 1, noise: bool = False,
                      **params) -> Nonlinearity:
    """Catalog: ``zero``; ``linear`` (``lam u + mu Delta^m u``, noise terms
    ``lam u e_1``); ``sine`` (``c (sin Re u + i sin Im u)``, drift only);
    ``polynomial`` (``c P[u - u|u|^2/(3R^2)]`` with 2/3 truncation ``P``,
    drift only, constants valid for ``|u| <= R``)."""
    d = grid.d
    if kind == "zero":
        if noise:
            return Nonlinearity("zero", lambda t, u: np.zeros(u.shape[:-d - 1] + (J,) + u.shape[-d - 1:],
                                                           dtype=complex), noise=True)
        return Nonlinearity("zero", lambda t, u: np.zeros_like(u))
    if kind == "linear":
        lam = float(params.get("lam", 0.0))
        if noise:
            def G(t, u):
                out = np.zeros(u.shape[:-d - 1] + (J,) + u.shape[-d - 1:], dtype=complex)
                out[(Ellipsis, 0) + (slice(None),) * (d + 1)] = lam * u
                return out
            return Nonlinearity("linear", G, 0.0, abs(lam), noise=True)
        mu = float(params.get("mu", 0.0))
        sym = (-grid.k2) ** m

        def F(t, u):
            out = lam * u
            if mu:
                out = out + mu * ifft(grid, sym * fft(grid, u))
            return out
        return Nonlinearity("linear", F, abs(mu) * laplacian_power_constant(d, m), abs(lam))
    if noise:
        raise ValueError(f"nonlinearity {kind!r} is offered for drifts only")
    if kind == "sine":
        c = float(params.get("c", 0.1))
        return Nonlinearity("sine", lambda t, u: c * (np.sin(u.real) + 1j * np.sin(u.imag)),
                            0.0, abs(c))
    if kind == "polynomial":
        c = float(params.get("c", 0.1))
        R = float(params.get("radius", 1.0))
        mask = grid.dealias_mask

        def P(t, u):
            return c * ifft(grid, mask * fft(grid, u - u * np.abs(u) ** 2 / (3 * R**2)))
        return Nonlinearity("polynomial", P, 0.0, 2 * abs(c), radius=R)
    raise ValueError(f"unknown nonlinearity {kind!r}")


def verify_lipschitz(nl: Nonlinearity, grid: TorusGrid, m: int, q: float = 2.0, N: int = 1,
                     pairs: int = 16, seed: int = 0) -> float:
    """Largest ``lhs / rhs`` over random field pairs (at most 1 when the declared
    constants hold on the sample)."""
    rng = np.random.default_rng(seed)
    u = random_field(grid, rng, N, decay=1.0, real=False, batch=(pairs,)).values
    v = random_field(grid, rng, N, decay=1.0, real=False, batch=(pairs,)).values
    if math.isfinite(nl.radius):
        for w in (u, v):
            scale = np.max(np.abs(w), axis=tuple(range(1, w.ndim)), keepdims=True)
            w *= nl.radius / scale
    diff = u - v
    top = spatial_norms(grid, diff, ("D", 2 * m, q))
    low = spatial_norms(grid, diff, ("H", 2 * m - 1, q))
    if nl.noise:
        out = nl(0.0, u) - nl(0.0, v)
        out = out.reshape((pairs, -1) + grid.shape)
        lhs = spatial_norms(grid, out, ("H", m, q))
    else:
        lhs = spatial_norms(grid, nl(0.0, u) - nl(0.0, v), ("L", q))
    rhs = nl.L * top + nl.Lt * low
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(rhs > 0, lhs / rhs, np.where(lhs > 1e-12, np.inf, 0.0))
    return float(np.max(ratio))


@dataclass
class SemilinearProblem:
    linear: LinearProblem
    F: Nonlinearity
    G: Nonlinearity
    q: float = 2.0
    p: float = 2.0
    verify: bool = True

    def __post_init__(self):
        if not self.G.noise:
            raise ValueError("G must be a noise-type nonlinearity")
        if self.verify:
            for nl in (self.F, self.G):
                r = verify_lipschitz(nl, self.linear.grid, self.linear.A.m, self.q, self.linear.N)
                if r > 1 + 1e-9:
                    raise LipschitzViolation(
                        f"declared constants of {nl.name!r} violated by factor {r:.4g}")

    @property
    def weight(self) -> WeightSpec:
        return WeightSpec(self.p, self.linear.alpha, self.linear.T)


@dataclass
class PicardDiagnostics:
    residuals: list                      # per window: residual sequence
    ratio: float                         # fitted geometric ratio (worst window)
    window_ratio: float                  # measured one-window contraction (worst window)
    kappa: float                         # length of the first window
    windows: int
    iterations: list
    nu: float
    M: float
    K_det: float
    K_st: float
    converged: bool = True
    report: str = ""

    @property
    def target(self) -> float:
        return 1 - self.nu / 2


# --- norms ----------------------------------------------------------------------------------------

def z_norm(path: SpaceTimePath, w, spatial, keep_axes: int = 0) -> np.ndarray:
    """``L^p(Omega; L^p(I, w; X))``: the batch axes after ``keep_axes`` are seeds."""
    per = np.asarray(weighted_lp_time_norm(path, w, spatial))
    p = w.p if hasattr(w, "p") else w[0]
    axes = tuple(range(keep_axes, per.ndim))
    return np.mean(per**p, axis=axes) ** (1 / p) if axes else per


def _noise_path_norm(grid, values, times, w, m, q, keep_axes=0):
    """``Z^gamma_{1/2}`` norm of a ``(..., M+1, J, N, *space)`` array."""
    flat = values.reshape(values.shape[: -grid.d - 2] + (-1,) + grid.shape)
    return z_norm(SpaceTimePath(grid, times, flat), w, ("H", m, q), keep_axes)


# --- constants -------------------------------------------------------------------------------------

def estimate_mr_constants(p: LinearProblem, noise: NoisePath, probes: int = 8, seed: int = 0,
                          p_exp: float = 2.0, q: float = 2.0, bandwidth: int | None = None):
    """Empirical ``(K_det, K_st)``: largest ``||U||_{Z1} / ||f||_{Z0}`` over random
    band-limited, time-constant probes ``f`` (``g = 0``, ``u0 = 0``), and the
    analogue with ``||g||_{Z^gamma_{1/2}}``.  These are lower bounds of the
    operator norms."""
    grid = p.grid
    m = p.A.m
    w = WeightSpec(p_exp, p.alpha, p.T)
    rng = np.random.default_rng(seed)
    times = noise.times
    M1 = len(times)
    N = p.N
    J = noise.J
    f = random_field(grid, rng, N, bandwidth, decay=0.0, real=False, batch=(probes,)).values
    f_t = np.broadcast_to(f[:, None, None], (probes, 1, M1) + f.shape[1:])
    Uf = solve_linear(p.replace(f=f_t, g=None, u0=None), noise)
    nf = z_norm(SpaceTimePath(grid, times, f_t[:, 0]), w, ("L", q), keep_axes=1)
    uf = z_norm(Uf, w, ("H", 2 * m, q), keep_axes=1)
    g = random_field(grid, rng, J * N, bandwidth, decay=0.0, real=False, batch=(probes,)).values
    g = g.reshape((probes, J, N) + grid.shape)
    g_t = np.broadcast_to(g[:, None, None], (probes, 1, M1) + g.shape[1:])
    Ug = solve_linear(p.replace(f=None, g=g_t, u0=None), noise)
    ng = _noise_path_norm(grid, g_t[:, 0], times, w, m, q, keep_axes=1)
    ug = z_norm(Ug, w, ("H", 2 * m, q), keep_axes=1)
    K_det = float(np.max(np.where(nf > 0, uf / np.where(nf > 0, nf, 1), 0.0)))
    K_st = float(np.max(np.where(ng > 0, ug / np.where(ng > 0, ng, 1), 0.0)))
    return K_det, K_st


# --- Picard engine -------------------------------------------------------------------------------

class _Window:
    """Linearized solve map restricted to time indices ``i0..i1``."""

    def __init__(self, sp: SemilinearProblem, noise: NoisePath, A_path, B_path, i0, i1, u_start):
        self.sp = sp
        self.grid = sp.linear.grid
        self.noise = NoisePath(noise.times[i0:i1 + 1], noise.increments[..., i0:i1, :],
                               noise.seeds, noise.level)
        self.A_path = A_path.window(i0, i1)
        self.B_path = B_path.window(i0, i1) if B_path is not None else None
        self.u_start = u_start
        self.span = (i0, i1)
        self.all_times = noise.times
        self.problem = sp.linear.replace(T=float(noise.times[i1]), f=None, g=None)

    def forcings(self, phi: np.ndarray | None):
        """``F(t, phi)`` and ``G(t, phi)`` on the window grid plus linear data."""
        lin = self.sp.linear
        times = self.noise.times
        grid = self.grid
        d = grid.d
        batch = self.noise.batch_shape
        shape = batch + (len(times), lin.N) + grid.shape
        if phi is None:
            phi = np.zeros(shape, dtype=complex)
        tt = times.reshape((len(times),) + (1,) * (1 + d))
        f = self.sp.F(tt, phi)
        g = self.sp.G(tt, phi)
        f = f + _sample_forcing(lin.f, grid, self.all_times, self.span, 0, shape)
        g = g + _sample_forcing(lin.g, grid, self.all_times, self.span, 1, g.shape)
        return f, g

    def L(self, phi):
        f, g = self.forcings(phi)
        prob = self.problem.replace(f=f, g=g, u0=self.u_start)
        return solve_linear(prob, self.noise, A_path=self.A_path, B_path=self.B_path).values


def _sample_forcing(obj, grid, times, span, extra, shape):
    """Linear data on the window ``span`` of the full time grid."""
    acc = _resolve_forcing(obj, grid, times, extra)
    if acc is None:
        return 0.0
    axis = len(shape) - (2 + extra + grid.d)
    return np.stack([np.broadcast_to(acc(i), shape[:axis] + shape[axis + 1:])
                     for i in range(span[0], span[1] + 1)], axis=axis)


def picard_solve(sp: SemilinearProblem, noise: NoisePath, constants=None, tol: float = 1e-10,
                 max_iter: int = 60, windows: int | None = None, initial_guess=None,
                 probes: int = 8):
    """Fixed point of the linearized solve map, window by window.

    ``constants=(K_det, K_st)`` skips the estimation.  ``windows`` forces an
    equal split instead of the bisection on the window length.
    ``initial_guess`` (values on the full grid) replaces the default start
    ``L(0)``.  Returns ``(SpaceTimePath, PicardDiagnostics)``.
    """
    lin = sp.linear
    grid = lin.grid
    if constants is None:
        constants = estimate_mr_constants(lin, noise, probes, p_exp=sp.p, q=sp.q)
    K_det, K_st = constants
    top = K_det * sp.F.L + K_st * sp.G.L
    nu = 1 - top
    if nu <= 0:
        raise ContractionError(
            f"K_det L_F + K_st L_G = {K_det:.4g}*{sp.F.L:.4g} + {K_st:.4g}*{sp.G.L:.4g}"
            f" = {top:.4g} >= 1")
    slack = top if top > 0 else ZERO_SUM_SLACK
    if top == 0:
        nu = 1 - slack
    M = (K_det * sp.F.Lt + K_st * sp.G.Lt) / slack
    target = 1 - nu / 2
    m = lin.A.m
    w = WeightSpec(sp.p, lin.alpha, lin.T)

    def triple(values, times):
        path = SpaceTimePath(grid, times, values)
        return float(z_norm(path, w, ("H", 2 * m, sp.q)) + M * z_norm(path, w, ("L", sp.q)))

    A_path = realize(lin.A, noise, lin.seed, grid)
    B_path = realize(lin.B, noise, lin.seed, grid)
    u = _initial(lin.u0, grid, lin.N)
    u = np.broadcast_to(u, noise.batch_shape + u.shape[-grid.d - 1:]).astype(complex)

    def window_ratio(i0, i1, u_start):
        win = _Window(sp, noise, A_path, B_path, i0, i1, u_start)
        t = win.noise.times
        a = win.L(None)
        b = win.L(a)
        den = triple(b - a, t)
        if den == 0:
            return 0.0
        return triple(win.L(b) - b, t) / den

    M_steps = noise.M
    ta = noise.batch_shape
    out = [np.expand_dims(u, len(ta))]
    residuals, iterations, fitted, measured = [], [], [], []
    kappa_steps = None
    i0 = 0
    converged = True
    report = ""
    forced = None
    if windows is not None:
        forced = np.linspace(0, M_steps, windows + 1).round().astype(int)
    w_index = 0
    while i0 < M_steps:
        if forced is not None:
            i1 = int(forced[w_index + 1])
            r = window_ratio(i0, i1, u)
        else:
            length = kappa_steps or (M_steps - i0)
            length = min(length, M_steps - i0)
            r = window_ratio(i0, i0 + length, u)
            if r > target:
                fail = length
                while r > target and length > 1:
                    fail = length
                    length = max(1, length // 2)
                    r = window_ratio(i0, i0 + length, u)
                lo, hi = length, fail
                for _ in range(4):
                    if hi - lo <= 1:
                        break
                    mid = (lo + hi) // 2
                    rm = window_ratio(i0, i0 + mid, u)
                    if rm <= target:
                        lo, r = mid, rm
                    else:
                        hi = mid
                length = lo
            if kappa_steps is None:
                kappa_steps = length
            i1 = i0 + length
        measured.append(r)
        win = _Window(sp, noise, A_path, B_path, i0, i1, u)
        t = win.noise.times
        if initial_guess is not None:
            guess = np.asarray(initial_guess)
            phi = np.take(guess, range(i0, i1 + 1), axis=len(ta))
        else:
            phi = win.L(None)
        res = []
        for it in range(1, max_iter + 1):
            new = win.L(phi)
            res.append(triple(new - phi, t))
            phi = new
            scale = max(triple(phi, t), 1e-300)
            if res[-1] <= tol * scale:
                break
        else:
            converged = False
            report = (f"window [{noise.times[i0]:.4g}, {noise.times[i1]:.4g}]: residual "
                      f"{res[-1]:.3e} above tolerance after {max_iter} iterations")
        residuals.append(res)
        iterations.append(len(res))
        fitted.append(_geometric_ratio(res))
        out.append(np.take(phi, range(1, phi.shape[len(ta)]), axis=len(ta)))
        u = np.take(phi, phi.shape[len(ta)] - 1, axis=len(ta))
        i0 = i1
        w_index += 1
    values = np.concatenate(out, axis=len(ta))
    first = forced[1] if forced is not None else kappa_steps
    diag = PicardDiagnostics(residuals, max(fitted), max(measured), float(noise.times[first]),
                             len(residuals), iterations, nu, M, K_det, K_st, converged, report)
    return SpaceTimePath(grid, noise.times, values, noise.seeds), diag


def _geometric_ratio(res) -> float:
    """Geometric mean of successive residual ratios after the first iteration."""
    r = [b / a for a, b in zip(res[:-1], res[1:]) if a > 0 and b > 0]
    if not r:
        return 0.0
    return float(np.exp(np.mean(np.log(r))))


def continuous_dependence(sp: SemilinearProblem, u01, u02, noise: NoisePath, constants=None,
                          **kw) -> float:
    """``||U^1 - U^2||_{Z1} / ||u0^1 - u0^2||_{B^{2m delta}_{q,p}}``, ``delta = 1 - (1+alpha)/p``;
    NaN for identical data."""
    lin = sp.linear
    grid = lin.grid
    a = u01.values if isinstance(u01, Field) else np.asarray(u01)
    b = u02.values if isinstance(u02, Field) else np.asarray(u02)
    diff = a - b
    if not np.any(diff):
        return float("nan")
    w = WeightSpec(sp.p, lin.alpha, lin.T)
    if constants is None:
        constants = estimate_mr_constants(lin, noise, p_exp=sp.p, q=sp.q)
    U1, _ = picard_solve(SemilinearProblem(lin.replace(u0=a), sp.F, sp.G, sp.q, sp.p, False),
                         noise, constants, **kw)
    U2, _ = picard_solve(SemilinearProblem(lin.replace(u0=b), sp.F, sp.G, sp.q, sp.p, False),
                         noise, constants, **kw)
    num = float(z_norm(U1 - U2, w, ("H", 2 * lin.A.m, sp.q)))
    den = float(np.mean(spatial_norms(grid, diff, ("B", 2 * lin.A.m * w.delta, sp.q, sp.p))))
    return num / den

"""Removal of gradient noise through ``U(t) = S_B(zeta(t)) U~(t)``.

With x-independent ``sigma`` every ``B_n`` is a Fourier multiplier, the groups
``exp(s B_n)`` are translations, and ``S_B(a) = exp(sum_j a_j B_j)`` is the
phase multiplier ``exp(sum_j a_j sum_i sigma_{icj} i k_i)`` per component.

A realized sigma path ``sum_r tau_r(t) S_r`` has generators ``B_{r,n}`` (the
multiplier of ``S_r[:, :, n]``) and accumulated processes
``zeta_{r,n}(t) = int_0^t tau_r dw_n``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .coefficients import CoefficientPath, tilde_path
from .evolution import (LinearProblem, SpaceTimePath, _flat, _resolve_forcing, _unflat,
                        noise_symbols, realize, solve_linear_spectral)
from .grid import Field, TorusGrid, fft, ifft
from .noise import NoisePath, ZetaPath, zeta_path


def _generator_symbols(grid: TorusGrid, sigma) -> np.ndarray:
    """``(J', N, K)`` multipliers of the generators of a constant sigma tensor."""
    if not isinstance(sigma, np.ndarray):
        sigma = getattr(sigma, "base", sigma)
    sigma = np.asarray(sigma, dtype=float)
    if sigma.ndim != 3:
        raise ValueError("shift operators need x-independent sigma of shape (d, N, J)")
    path = CoefficientPath(np.zeros(1), ((np.ones(1), sigma),), sigma.shape)
    return noise_symbols(grid, path)[0][1]


def shift_operator(a, sigma, grid: TorusGrid):
    """``S_B(a)`` as a map on fields or arrays ``(..., N, *space)``.

    ``a`` has shape ``(*batch, J')``; ``sigma`` is a constant ``(d, N, J')``
    tensor or a uniform :class:`GradientNoiseSpec`.
    """
    if getattr(sigma, "x_dependent", False):
        raise ValueError("x-dependent sigma does not generate translation groups")
    gens = _generator_symbols(grid, sigma)
    a = np.asarray(a, dtype=float)
    phase = np.exp(np.einsum("...j,jck->...ck", a, gens))

    def S(u):
        vals = u.values if isinstance(u, Field) else np.asarray(u)
        out = ifft(grid, _unflat(grid, phase * _flat(grid, fft(grid, vals))))
        return Field(grid, out) if isinstance(u, Field) else out
    return S


@dataclass(frozen=True)
class TildeOperator:
    """``A~ = A + 1/2 sum_n B_n^2`` realized path-wise; coefficient ``a - Sigma``."""

    A: object
    B: object

    @property
    def d(self) -> int:
        return self.A.d

    @property
    def m(self) -> int:
        return self.A.m

    @property
    def N(self) -> int:
        return self.A.N

    @property
    def shift(self) -> float:
        return self.A.shift

    @property
    def form(self) -> str:
        return self.A.form

    @property
    def x_dependent(self) -> bool:
        return self.A.x_dependent or self.B.x_dependent

    def sample(self, noise, seed=0, grid=None) -> CoefficientPath:
        return tilde_path(self.A.sample(noise, seed, grid), self.B.sample(noise, seed, grid))


def build_tilde_A(A, sigma) -> object:
    """Operator with symbol ``A_hat + 1/2 sum_n B_hat_n^2``; ``A`` unchanged when
    ``sigma`` is absent."""
    if sigma is None:
        return A
    if A.m != 1:
        raise ValueError("gradient noise is paired with second-order operators")
    if sigma.x_dependent:
        raise ValueError("the transform needs x-independent sigma")
    return TildeOperator(A, sigma)


@dataclass
class TransformedProblem:
    """Additive-noise problem for ``U~`` together with the realized ``zeta``.

    ``problem.f`` already contains the commutator drift ``-sum_n B_n g~_n``.
    """

    problem: LinearProblem
    zeta: ZetaPath = field(repr=False)
    generators: np.ndarray = field(repr=False)  # (J', N, K)
    commutator: np.ndarray | None = field(default=None, repr=False)
    sigma_path: CoefficientPath | None = field(default=None, repr=False)

    def shift(self, i: int, sign: float = 1.0) -> np.ndarray:
        """Phase multiplier of ``S_B(sign * zeta(t_i))``, shape ``(*batch, N, K)``."""
        z = self.zeta.values[..., i, :]
        return np.exp(sign * np.einsum("...j,jck->...ck", z, self.generators))


def _forcing_array(obj, grid, times, extra, batch):
    acc = _resolve_forcing(obj, grid, times, extra)
    if acc is None:
        return None
    first = np.asarray(acc(0))
    shape = np.broadcast_shapes(batch + first.shape[-(1 + extra + grid.d):], first.shape)
    return np.stack([np.broadcast_to(acc(i), shape) for i in range(len(times))],
                    axis=len(shape) - (1 + extra + grid.d))


def transform_problem(p: LinearProblem, noise: NoisePath) -> TransformedProblem:
    """Data of the equation for ``U~ = S_B(-zeta) U``:

    ``dU~ + A~ U~ dt = (f~ - sum_n B_n g~_n) dt + g~ dW`` with
    ``f~ = S_B(-zeta) f`` and ``g~ = S_B(-zeta) g``.
    """
    grid = p.grid
    if p.B is None:
        zeros = np.zeros(noise.batch_shape + (noise.M + 1, 1))
        gens = np.zeros((1, p.N, grid.size), dtype=complex)
        return TransformedProblem(p, ZetaPath(zeros, noise), gens)
    if p.B.x_dependent:
        raise ValueError("the transform needs x-independent sigma")
    B_path = realize(p.B, noise, p.seed, grid)
    J = noise.J
    taus, gens = [], []
    for tau, Bs in noise_symbols(grid, B_path):
        taus.append(np.broadcast_to(tau, noise.batch_shape + (noise.M + 1,)))
        gens.append(Bs)
    R = len(taus)
    b = np.zeros(noise.batch_shape + (noise.M + 1, R * J, J))
    for r, tau in enumerate(taus):
        for n in range(J):
            b[..., r * J + n, n] = tau
    zeta = zeta_path(b, noise)
    generators = np.concatenate(gens, axis=0)
    tp = TransformedProblem(p, zeta, generators, sigma_path=B_path)

    times = noise.times
    batch = noise.batch_shape
    f = _forcing_array(p.f, grid, times, 0, batch)
    g = _forcing_array(p.g, grid, times, 1, batch)
    f_new = None
    g_new = None
    comm = None
    if g is not None:
        g_hat = _flat(grid, fft(grid, g))  # (*batch, M+1, J, N, K)
        g_new_hat = np.empty(np.broadcast_shapes(g_hat.shape, batch + g_hat.shape[-4:]),
                             dtype=complex)
        comm_hat = np.zeros(g_new_hat.shape[:-3] + g_new_hat.shape[-2:], dtype=complex)
        for i in range(noise.M + 1):
            gi = tp.shift(i, -1.0)[..., None, :, :] * g_hat[..., i, :, :, :]
            g_new_hat[..., i, :, :, :] = gi
            for r, tau in enumerate(taus):
                comm_hat[..., i, :, :] -= tau[..., i, None, None] * np.sum(gens[r] * gi, axis=-3)
        g_new = ifft(grid, _unflat(grid, g_new_hat))
        comm = ifft(grid, _unflat(grid, comm_hat))
    if f is not None:
        f_hat = _flat(grid, fft(grid, f))
        f_new_hat = np.stack([tp.shift(i, -1.0) * f_hat[..., i, :, :] for i in range(noise.M + 1)],
                             axis=len(batch))
        f_new = ifft(grid, _unflat(grid, f_new_hat))
    if comm is not None:
        f_new = comm if f_new is None else f_new + comm
    tp.problem = p.replace(A=build_tilde_A(p.A, p.B), B=None, f=f_new, g=g_new)
    tp.commutator = comm
    return tp


def untransform(U_tilde: SpaceTimePath, tp: TransformedProblem) -> SpaceTimePath:
    """``S_B(zeta(t_i)) U~(t_i)`` on the stored time slices."""
    grid = U_tilde.grid
    all_times = tp.zeta.noise.times
    idx = np.searchsorted(all_times, U_tilde.times - 1e-12 * max(all_times[-1], 1.0))
    coef = _flat(grid, fft(grid, U_tilde.values))
    ax = U_tilde.time_axis
    out = np.stack([tp.shift(int(i), 1.0) * np.take(coef, k, axis=ax) for k, i in enumerate(idx)],
                   axis=ax)
    return SpaceTimePath(grid, U_tilde.times, ifft(grid, _unflat(grid, out)), U_tilde.seeds)


def l2_space_time(path: SpaceTimePath) -> float:
    """``(E int_0^T ||u(t)||_2^2 dt)^{1/2}`` by the left-point rule over the
    stored slices, averaged over the batch."""
    sq = path.spatial_norms(2.0) ** 2
    dt = np.diff(path.times)
    vals = np.sum(sq[..., :-1] * dt, axis=-1)
    return float(np.sqrt(np.mean(vals)))


def equivalence_error(p: LinearProblem, noises, stride: int = 1) -> list[float]:
    """``||U_direct - S_B(zeta) U~||_{L^2(Omega x I x box)}`` per noise level."""
    out = []
    for noise in noises:
        direct = solve_linear_spectral(p, noise, stride)
        tp = transform_problem(p, noise)
        U_tilde = solve_linear_spectral(tp.problem, noise, stride)
        out.append(l2_space_time(direct - untransform(U_tilde, tp)))
    return out

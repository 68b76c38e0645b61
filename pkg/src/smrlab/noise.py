"""Truncated cylindrical Brownian motion and Ito sums of step processes.

A :class:`NoisePath` carries increments ``dw[..., i, n]`` of ``J`` independent
Brownian motions on a time grid.  Leading axes index an ensemble of seeds.
Every (seed, direction) pair draws from its own counter-based Philox stream, so
direction ``n`` does not depend on how many other directions were requested.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .grid import Field, TorusGrid

_BRIDGE_TAG = 0x6272  # stream tag for Brownian-bridge refinement draws


def uniform_times(T: float, M: int) -> np.ndarray:
    if M < 1:
        raise ValueError("need at least one time step")
    return np.linspace(0.0, T, M + 1)


def stream(*key: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(list(key))))


@dataclass(frozen=True)
class NoisePath:
    times: np.ndarray = field(repr=False)
    increments: np.ndarray = field(repr=False)  # (*batch, M, J)
    seeds: np.ndarray = field(repr=False)       # (*batch,)
    level: int = 0                              # bridge refinements applied

    @property
    def M(self) -> int:
        return len(self.times) - 1

    @property
    def J(self) -> int:
        return self.increments.shape[-1]

    @property
    def T(self) -> float:
        return float(self.times[-1])

    @property
    def dt(self) -> np.ndarray:
        return np.diff(self.times)

    @property
    def batch_shape(self) -> tuple[int, ...]:
        return self.increments.shape[:-2]

    def brownian(self) -> np.ndarray:
        """``w_n(t_i)``, shape ``(*batch, M+1, J)`` starting at zero."""
        w = np.cumsum(self.increments, axis=-2)
        zero = np.zeros(self.batch_shape + (1, self.J))
        return np.concatenate([zero, w], axis=-2)

    def truncate(self, i: int, replacement: float = 0.0) -> NoisePath:
        """Same path with every increment at index ``>= i`` replaced."""
        inc = self.increments.copy()
        inc[..., i:, :] = replacement
        return replace(self, increments=inc)

    def perturb_after(self, i: int, seed: int = 12345) -> NoisePath:
        """Same prefix, freshly drawn increments from index ``i`` on."""
        inc = self.increments.copy()
        rng = stream(seed, i)
        tail = inc[..., i:, :]
        inc[..., i:, :] = rng.standard_normal(tail.shape) * np.sqrt(self.dt[i:])[:, None]
        return replace(self, increments=inc)

    def select(self, index) -> NoisePath:
        return replace(self, increments=self.increments[index], seeds=self.seeds[index])


def generate_noise(J: int, times, seed) -> NoisePath:
    """Increments of ``J`` Brownian motions on ``times`` for one seed or an
    array of seeds (one ensemble member each)."""
    times = np.asarray(times, dtype=float)
    if times.ndim != 1 or len(times) < 2 or np.any(np.diff(times) <= 0):
        raise ValueError("times must be strictly increasing with at least one step")
    if J < 1:
        raise ValueError("J must be >= 1")
    seeds = np.asarray(seed, dtype=np.int64)
    sqrt_dt = np.sqrt(np.diff(times))
    flat = seeds.reshape(-1)
    inc = np.empty((flat.size, len(times) - 1, J))
    for b, s in enumerate(flat):
        for n in range(J):
            inc[b, :, n] = stream(int(s), n).standard_normal(len(times) - 1) * sqrt_dt
    return NoisePath(times, inc.reshape(seeds.shape + inc.shape[1:]), seeds)


def refine(noise: NoisePath) -> NoisePath:
    """Halve every time step with a Brownian bridge; the coarse increments are
    exactly the pairwise sums of the new ones (same omega, finer grid)."""
    t = noise.times
    mid = 0.5 * (t[:-1] + t[1:])
    times = np.empty(2 * noise.M + 1)
    times[0::2] = t
    times[1::2] = mid
    level = noise.level + 1
    z = np.empty(noise.increments.shape)
    flat_seeds = noise.seeds.reshape(-1)
    zf = z.reshape((flat_seeds.size,) + noise.increments.shape[-2:])
    for b, s in enumerate(flat_seeds):
        for n in range(noise.J):
            zf[b, :, n] = stream(int(s), n, _BRIDGE_TAG, level).standard_normal(noise.M)
    h = noise.dt
    first = 0.5 * noise.increments + 0.5 * np.sqrt(h)[:, None] * z
    second = noise.increments - first
    inc = np.empty(noise.batch_shape + (2 * noise.M, noise.J))
    inc[..., 0::2, :] = first
    inc[..., 1::2, :] = second
    return NoisePath(times, inc, noise.seeds, level)


def coarsen(noise: NoisePath, factor: int) -> NoisePath:
    if noise.M % factor:
        raise ValueError("factor must divide the number of steps")
    inc = noise.increments.reshape(noise.batch_shape + (noise.M // factor, factor, noise.J))
    return NoisePath(noise.times[::factor], inc.sum(axis=-2), noise.seeds, noise.level)


def coupled_refinements(J: int, T: float, M0: int, levels: int, seed) -> list[NoisePath]:
    """Noise on ``M0, 2 M0, ..., 2^levels M0`` steps sharing one omega."""
    paths = [generate_noise(J, uniform_times(T, M0), seed)]
    for _ in range(levels):
        paths.append(refine(paths[-1]))
    return paths


def is_adapted(process, noise: NoisePath, checkpoints=None, atol: float = 0.0) -> bool:
    """Regeneration check for adaptedness.

    ``process(noise)`` must return an array whose axis ``len(noise.batch_shape)``
    is the time index.  Entries at times ``<= t_i`` may not move when the
    increments from ``t_i`` on are redrawn.
    """
    base = np.asarray(process(noise))
    axis = len(noise.batch_shape)
    if checkpoints is None:
        checkpoints = sorted({1, noise.M // 3, noise.M // 2, noise.M - 1} - {0})
    for i in checkpoints:
        other = np.asarray(process(noise.perturb_after(i)))
        head = np.take(base, range(0, i + 1), axis=axis)
        head_other = np.take(other, range(0, i + 1), axis=axis)
        if not np.allclose(head, head_other, rtol=0, atol=atol):
            return False
    return True


class AdaptednessError(ValueError):
    pass


def ito_integral(G, noise: NoisePath, grid: TorusGrid, check: bool = True) -> Field:
    """``sum_i sum_n G(t_i) e_n dw_n(t_i)`` for a step process ``G``.

    ``G`` is either an array of shape ``(*batch, M, J, N, *space)`` (taken as
    deterministic/known) or a callable ``G(noise)`` returning such an array;
    callables are run through the regeneration check first.
    """
    if callable(G):
        if check and not is_adapted(G, noise):
            raise AdaptednessError("integrand depends on future noise increments")
        G = G(noise)
    G = np.asarray(G)
    d = grid.d
    dw = noise.increments.reshape(noise.increments.shape + (1,) * (d + 1))
    return Field(grid, np.sum(G * dw, axis=(-d - 3, -d - 2)))


@dataclass(frozen=True)
class ZetaPath:
    values: np.ndarray = field(repr=False)  # (*batch, M+1, J')
    noise: NoisePath = field(repr=False)

    def at(self, t: float) -> np.ndarray:
        """Piecewise-linear reconstruction between grid times."""
        times = self.noise.times
        i = int(np.clip(np.searchsorted(times, t, side="right") - 1, 0, len(times) - 2))
        lam = (t - times[i]) / (times[i + 1] - times[i])
        return (1 - lam) * self.values[..., i, :] + lam * self.values[..., i + 1, :]


def zeta_path(b, noise: NoisePath) -> ZetaPath:
    """``zeta_j(t_i) = sum_{l<i} sum_n b_{j,n}(t_l) dw_n(t_l)``.

    ``b`` has shape ``(*batch, M(+1), J', J)``: the H-coordinates of each
    ``b_j`` at the left end of every cell.
    """
    b = np.asarray(b, dtype=float)
    b = b[..., : noise.M, :, :]
    incr = np.einsum("...ijn,...in->...ij", b, noise.increments)
    zero = np.zeros(incr.shape[:-2] + (1, incr.shape[-1]))
    return ZetaPath(np.concatenate([zero, np.cumsum(incr, axis=-2)], axis=-2), noise)

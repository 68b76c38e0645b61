"""Linear solvers for ``dU + A U dt = f dt + (B U + g) dW``, evolution
families of divergence-form operators and the associated convolutions.

Spectral arrays inside the solvers are flattened over the frequency lattice:
``u_hat`` has shape ``(*batch, N, K)`` with ``K = n**d``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import expm

from .coefficients import (CoefficientPath, GradientNoiseSpec, OperatorSpec,
                           apply_second_order, ellipticity_margin_2m, multi_indices,
                           stochastic_parabolicity_margin, tilde_path)
from .grid import Field, TorusGrid, derivative_symbol, fft, ifft, lq_norm
from .noise import NoisePath, generate_noise

BLOWUP_FACTOR = 1e6


class BlowUpError(RuntimeError):
    """Numerical blow-up; ``stage`` names the solver and step."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"{stage}: {message}")
        self.stage = stage


# --- containers ---------------------------------------------------------------

@dataclass(frozen=True)
class SpaceTimePath:
    """Fields on a time grid: ``values.shape == (*batch, len(times), N, *space)``."""

    grid: TorusGrid
    times: np.ndarray = field(repr=False)
    values: np.ndarray = field(repr=False)
    seeds: np.ndarray = field(default_factory=lambda: np.zeros((), dtype=np.int64), repr=False)

    def __post_init__(self):
        v = np.asarray(self.values)
        d = self.grid.d
        if v.ndim < d + 2 or v.shape[-d:] != self.grid.shape:
            raise ValueError(f"values of shape {v.shape} do not fit grid {self.grid.shape}")
        if v.shape[-d - 2] != len(self.times):
            raise ValueError("time axis does not match the time grid")
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "times", np.asarray(self.times, dtype=float))

    @property
    def N(self) -> int:
        return self.values.shape[-self.grid.d - 1]

    @property
    def batch_shape(self) -> tuple[int, ...]:
        return self.values.shape[: -self.grid.d - 2]

    @property
    def time_axis(self) -> int:
        return len(self.batch_shape)

    def field(self, i: int) -> Field:
        return Field(self.grid, np.take(self.values, i, axis=self.time_axis))

    def final(self) -> Field:
        return self.field(len(self.times) - 1)

    def select(self, index) -> SpaceTimePath:
        seeds = np.asarray(self.seeds)
        return SpaceTimePath(self.grid, self.times, self.values[index],
                             seeds[index] if seeds.ndim else seeds)

    def __add__(self, other: SpaceTimePath) -> SpaceTimePath:
        return SpaceTimePath(self.grid, self.times, self.values + other.values, self.seeds)

    def __sub__(self, other: SpaceTimePath) -> SpaceTimePath:
        return SpaceTimePath(self.grid, self.times, self.values - other.values, self.seeds)

    def spatial_norms(self, q: float = 2.0) -> np.ndarray:
        """``||U(t_i)||_{L^q}``, shape ``(*batch, len(times))``."""
        return lq_norm(self.grid, self.values, q)

    def to_bytes(self) -> bytes:
        """JSON header line, then every time slice in the flat field layout."""
        if self.batch_shape:
            raise ValueError("serialize one sample at a time")
        header = {"d": self.grid.d, "n": self.grid.n, "period": self.grid.period,
                  "N": self.N, "times": [float(t).hex() for t in self.times],
                  "seed": int(np.asarray(self.seeds).reshape(-1)[0])}
        body = b"".join(self.field(i).to_bytes() for i in range(len(self.times)))
        return json.dumps(header, sort_keys=True).encode() + b"\n" + body

    @classmethod
    def from_bytes(cls, data: bytes) -> SpaceTimePath:
        head, body = data.split(b"\n", 1)
        h = json.loads(head)
        grid = TorusGrid(h["d"], h["n"], h["period"])
        times = np.array([float.fromhex(t) for t in h["times"]])
        size = 16 * h["N"] * grid.size
        if len(body) != size * len(times):
            raise ValueError("payload length does not match header")
        fields = [Field.from_bytes(grid, h["N"], body[i * size:(i + 1) * size]).values
                  for i in range(len(times))]
        return cls(grid, times, np.stack(fields), np.array(h["seed"]))


@dataclass(frozen=True)
class BlendedOperator:
    """``sum_r w_r A_r`` of operator specs sharing (d, m, N)."""

    parts: tuple  # ((weight, spec), ...)

    @property
    def d(self) -> int:
        return self.parts[0][1].d

    @property
    def m(self) -> int:
        return self.parts[0][1].m

    @property
    def N(self) -> int:
        return self.parts[0][1].N

    @property
    def shift(self) -> float:
        return sum(w * op.shift for w, op in self.parts)

    @property
    def form(self) -> str:
        return self.parts[0][1].form

    @property
    def x_dependent(self) -> bool:
        return any(op.x_dependent for w, op in self.parts if w != 0)

    def sample(self, noise, seed=0, grid=None) -> CoefficientPath:
        path = None
        for w, op in self.parts:
            p = op.sample(noise, seed, grid).scaled(w)
            path = p if path is None else path + p
        return path


@dataclass(frozen=True)
class ScaledNoise:
    """``c B`` for a gradient-noise spec ``B``."""

    B: object
    c: float

    def __getattr__(self, name):
        return getattr(self.B, name)

    def sample(self, noise, seed=0, grid=None) -> CoefficientPath:
        return self.B.sample(noise, seed, grid).scaled(self.c)


@dataclass
class LinearProblem:
    """Data of ``dU + A U dt = f dt + (B U + g) dW`` on a torus.

    ``f``: None, a Field, an array ``([*batch,] [M+1,] N, *space)``, a
    :class:`SpaceTimePath` or a callable ``t -> (N, *space)``.
    ``g``: same with an extra noise-direction axis in front of ``N``.
    ``seed`` drives the coefficient families (one omega per noise seed).
    """

    grid: TorusGrid
    A: object
    B: object = None
    f: object = None
    g: object = None
    u0: object = None
    T: float = 1.0
    alpha: float = 0.0
    seed: int = 0

    @property
    def N(self) -> int:
        return self.A.N

    @property
    def J(self) -> int:
        if self.B is not None:
            return self.B.J
        if self.g is None:
            return 1
        g = self.g.values if isinstance(self.g, SpaceTimePath) else self.g
        if callable(g):
            return np.asarray(g(0.0)).shape[0]
        return np.asarray(g).shape[-self.grid.d - 2]

    def replace(self, **kw) -> LinearProblem:
        data = dict(self.__dict__)
        data.update(kw)
        return LinearProblem(**data)


# --- data access ---------------------------------------------------------------

def _resolve_forcing(obj, grid: TorusGrid, times: np.ndarray, extra: int):
    """Return ``i -> array`` or None; ``extra`` counts axes in front of N."""
    if obj is None:
        return None
    base = 1 + extra + grid.d
    if isinstance(obj, SpaceTimePath):
        arr = obj.values
    elif isinstance(obj, Field):
        arr = obj.values
    elif callable(obj):
        return lambda i: np.asarray(obj(times[i]))
    else:
        arr = np.asarray(obj)
    if arr.ndim == base:
        return lambda i: arr
    axis = arr.ndim - base - 1
    if arr.shape[axis] != len(times):
        raise ValueError(f"forcing time axis has length {arr.shape[axis]}, expected {len(times)}")
    return lambda i: np.take(arr, i, axis=axis)


def _initial(u0, grid: TorusGrid, N: int) -> np.ndarray:
    if u0 is None:
        return np.zeros((N,) + grid.shape, dtype=complex)
    if isinstance(u0, Field):
        return u0.values.astype(complex)
    return np.asarray(u0, dtype=complex)


def _flat(grid: TorusGrid, a: np.ndarray) -> np.ndarray:
    return a.reshape(a.shape[: a.ndim - grid.d] + (grid.size,))


def _unflat(grid: TorusGrid, a: np.ndarray) -> np.ndarray:
    return a.reshape(a.shape[:-1] + grid.shape)


def realize(op, noise: NoisePath, seed: int, grid: TorusGrid) -> CoefficientPath | None:
    if op is None:
        return None
    if isinstance(op, CoefficientPath):
        return op
    return op.sample(noise, seed, grid)


def _check_times(noise: NoisePath, T: float):
    if not np.isclose(noise.T, T):
        raise ValueError(f"noise horizon {noise.T} differs from problem horizon {T}")


def _store_indices(M: int, stride: int) -> np.ndarray:
    if stride < 1 or M % stride:
        raise ValueError("stride must divide the number of time steps")
    return np.arange(0, M + 1, stride)


# --- spectral symbols -------------------------------------------------------------

def operator_symbols(grid: TorusGrid, path: CoefficientPath, m: int) -> list:
    """Per term ``(tau_r, S_r)`` with ``S_r`` of shape ``(K, N, N)`` such that
    ``A_hat(t_i, k) = sum_r tau_r[..., i] S_r[k]``."""
    idx = multi_indices(grid.d, m)
    D = np.array([[_flat(grid, derivative_symbol(grid, np.add(a, b))) for b in idx] for a in idx])
    out = []
    for tau, T in path.terms:
        if T.ndim != 4:
            raise ValueError("spectral symbols need x-independent coefficients")
        S = (-1) ** m * np.einsum("pqab,pqk->kab", T, D)
        out.append((np.asarray(tau), S))
    return out


def noise_symbols(grid: TorusGrid, path: CoefficientPath) -> list:
    """Per term ``(tau_r, Bs_r)`` with ``Bs_r[n, c, k] = sum_j sigma_{jcn} i k_j``."""
    grads = np.array([_flat(grid, derivative_symbol(grid, _unit(grid.d, j)))
                      for j in range(grid.d)])
    out = []
    for tau, S in path.terms:
        if S.ndim != 3:
            raise ValueError("spectral symbols need x-independent noise coefficients")
        out.append((np.asarray(tau), np.einsum("jcn,jk->nck", S, grads)))
    return out


def _unit(d: int, j: int) -> list[int]:
    e = [0] * d
    e[j] = 1
    return e


def _symbol_at(syms, i, shift: float, N: int):
    out = None
    for tau, S in syms:
        t = tau[..., i]
        v = t.reshape(t.shape + (1, 1, 1)) * S
        out = v if out is None else out + v
    if shift:
        out = out + shift * np.eye(N)
    return out


def _noise_multiplier(bsyms, i: int, dw: np.ndarray):
    """``sum_n B_hat_n(t_i) dw_n``, shape ``(*batch, N, K)``."""
    out = None
    for tau, Bs in bsyms:
        t = tau[..., i]
        v = np.einsum("nck,...n->...ck", Bs, dw) * t.reshape(t.shape + (1, 1))
        out = v if out is None else out + v
    return out


def propagator(symbol: np.ndarray, dt: float) -> np.ndarray:
    """``exp(-A_hat dt)`` per mode for ``(..., N, N)`` symbols."""
    if symbol.shape[-1] == 1:
        return np.exp(-symbol * dt)
    return expm(-symbol * dt)


def _apply(E: np.ndarray, u: np.ndarray) -> np.ndarray:
    if E.shape[-1] == 1:
        return E[..., 0, 0][..., None, :] * u
    return np.einsum("...kab,...bk->...ak", E, u)


def _changed(syms, i: int) -> bool:
    return i == 0 or any(not np.array_equal(tau[..., i], tau[..., i - 1]) for tau, _ in syms)


# --- solvers ---------------------------------------------------------------------

def _exponential_euler(grid, syms, shift, N, bsyms, f_at, g_at, u_hat, noise, stride,
                       stage="spectral"):
    """``u_{i+1} = E_i (u_i + f_i dt + sum_n (B_n u_i + g_n) dw_n)`` with
    ``E_i = exp(-A_hat(t_i) dt_i)``; returns stored spectral slices."""
    M = noise.M
    keep = set(_store_indices(M, stride).tolist())
    stored = [u_hat] if 0 in keep else []
    dts = noise.dt
    E = None
    for i in range(M):
        dt = dts[i]
        if E is None or _changed(syms, i) or dt != dts[i - 1]:
            sym = _symbol_at(syms, i, shift, N)
            E = propagator(sym, dt) if sym is not None else None
        dw = noise.increments[..., i, :]
        rhs = u_hat
        if f_at is not None:
            rhs = rhs + f_at(i) * dt
        if bsyms:
            rhs = rhs + _noise_multiplier(bsyms, i, dw) * u_hat
        if g_at is not None:
            rhs = rhs + np.einsum("...nck,...n->...ck", g_at(i), dw)
        u_hat = _apply(E, rhs) if E is not None else rhs
        if not np.all(np.isfinite(u_hat)):
            raise BlowUpError(f"{stage} step {i + 1}", "non-finite values")
        if i + 1 in keep:
            stored.append(u_hat)
    return stored


def _spectral_forcings(p: LinearProblem, noise: NoisePath):
    grid = p.grid
    f = _resolve_forcing(p.f, grid, noise.times, 0)
    g = _resolve_forcing(p.g, grid, noise.times, 1)
    f_hat = (lambda i: _flat(grid, fft(grid, f(i)))) if f is not None else None
    g_hat = (lambda i: _flat(grid, fft(grid, g(i)))) if g is not None else None
    return f_hat, g_hat


def solve_linear_spectral(p: LinearProblem, noise: NoisePath, stride: int = 1,
                          A_path: CoefficientPath | None = None,
                          B_path: CoefficientPath | None = None) -> SpaceTimePath:
    """Exponential Euler-Maruyama per Fourier mode (x-independent coefficients).

    Strong order 1/2 with multiplicative noise, order 1 for deterministic data.
    """
    _check_times(noise, p.T)
    if getattr(p.A, "x_dependent", False) or (p.B is not None and getattr(p.B, "x_dependent", False)):
        raise ValueError("x-dependent coefficients: use solve_linear_pseudospectral")
    grid = p.grid
    A_path = A_path or realize(p.A, noise, p.seed, grid)
    B_path = B_path or realize(p.B, noise, p.seed, grid)
    syms = operator_symbols(grid, A_path, p.A.m)
    bsyms = noise_symbols(grid, B_path) if B_path is not None else []
    f_hat, g_hat = _spectral_forcings(p, noise)
    u_hat = _flat(grid, fft(grid, _initial(p.u0, grid, p.N)))
    u_hat = np.broadcast_to(u_hat, noise.batch_shape + u_hat.shape[-2:]).copy() \
        if u_hat.ndim == 2 else u_hat
    stored = _exponential_euler(grid, syms, p.A.shift, p.N, bsyms, f_hat, g_hat, u_hat, noise, stride)
    return _path_from_spectral(grid, noise, stored, stride)


def _path_from_spectral(grid, noise, stored, stride) -> SpaceTimePath:
    batch = np.broadcast_shapes(*(s.shape[:-2] for s in stored))
    stored = [np.broadcast_to(s, batch + s.shape[-2:]) for s in stored]
    coef = np.stack(stored, axis=len(batch))
    values = ifft(grid, _unflat(grid, coef))
    times = noise.times[_store_indices(noise.M, stride)]
    return SpaceTimePath(grid, times, values, noise.seeds)


def stabilization_constant(path: CoefficientPath) -> float:
    """Largest eigenvalue of the Hermitian part of ``(a_ij)`` as a ``dN x dN``
    matrix over the realized coefficient (at least a tiny positive number)."""
    c = 0.0
    for T in path.distinct_tensors():
        d, _, N = T.shape[:3]
        X = T.reshape(d, d, N, N, -1)
        mats = np.transpose(X, (4, 0, 2, 1, 3)).reshape(-1, d * N, d * N)
        herm = 0.5 * (mats + np.conj(np.swapaxes(mats, 1, 2)))
        c = max(c, float(np.linalg.eigvalsh(herm)[:, -1].max()))
    return max(c, 1e-12)


def _second_order_terms(path: CoefficientPath, d: int):
    return [(np.asarray(tau), T) for tau, T in path.terms]


def _apply_A(grid, terms, i, u, form, batch_ndim_pad):
    out = 0
    for tau, T in terms:
        t = tau[..., i]
        Au = apply_second_order(grid, T, u, form=form)
        out = out + t.reshape(t.shape + (1,) * batch_ndim_pad) * Au
    return out


def _apply_B(grid, terms, i, u, dw):
    """``sum_n (b_n u) dw_n`` for sigma terms ``(d, N, J[, *space])``."""
    d = grid.d
    grad = np.stack([ifft(grid, derivative_symbol(grid, _unit(d, j)) * fft(grid, u))
                     for j in range(d)], axis=-d - 2)  # (..., d, N, *space)
    out = 0
    spatial = False
    for tau, S in terms:
        t = tau[..., i]
        if S.ndim == 3:
            c = np.einsum("jcn,...n->...jc", S, dw)
            c = c.reshape(c.shape + (1,) * d)
        else:
            spatial = True
            sp = "xyz"[:d]
            c = np.einsum(f"jcn{sp},...n->...jc{sp}", S, dw)
        c = c * t.reshape(t.shape + (1,) * (c.ndim - t.ndim))
        out = out + np.sum(c * grad, axis=-d - 2)
    if spatial:
        out = ifft(grid, fft(grid, out) * grid.dealias_mask)
    return out


def solve_linear_pseudospectral(p: LinearProblem, noise: NoisePath, stride: int = 1,
                                A_path: CoefficientPath | None = None,
                                B_path: CoefficientPath | None = None) -> SpaceTimePath:
    """Semi-implicit stepping for second-order operators with x-dependent
    coefficients:

    ``(1 + dt (c |k|^2 + shift)) u_{i+1} = u_i - dt (A_i u_i - c(-Delta) u_i)
    + dt f_i + sum_n (b_n u_i + g_n) dw_n``

    with ``c`` the largest eigenvalue of the realized coefficient.  Variable
    products are formed in physical space and 2/3-dealiased.
    """
    _check_times(noise, p.T)
    if p.A.m != 1:
        raise ValueError("pseudo-spectral stepping handles second-order operators only")
    grid = p.grid
    d = grid.d
    A_path = A_path or realize(p.A, noise, p.seed, grid)
    B_path = B_path or realize(p.B, noise, p.seed, grid)
    c = stabilization_constant(A_path)
    a_terms = _second_order_terms(A_path, d)
    b_terms = list((np.asarray(t), S) for t, S in B_path.terms) if B_path is not None else []
    f = _resolve_forcing(p.f, grid, noise.times, 0)
    g = _resolve_forcing(p.g, grid, noise.times, 1)
    u = _initial(p.u0, grid, p.N)
    u = np.broadcast_to(u, noise.batch_shape + u.shape[-d - 1:]).copy() if u.ndim == d + 1 else u
    ref = max(float(np.max(lq_norm(grid, u, 2))), 1.0)
    keep = set(_store_indices(noise.M, stride).tolist())
    stored = [u] if 0 in keep else []
    k2 = grid.k2
    pad = 1 + d
    for i in range(noise.M):
        dt = noise.dt[i]
        dw = noise.increments[..., i, :]
        Au = _apply_A(grid, a_terms, i, u, p.A.form, pad)
        lap = ifft(grid, k2 * fft(grid, u))
        rhs = u - dt * (Au - c * lap)
        if f is not None:
            rhs = rhs + dt * f(i)
        if b_terms:
            rhs = rhs + _apply_B(grid, b_terms, i, u, dw)
        if g is not None:
            rhs = rhs + _noise_sum(g(i), dw, d)
        u = ifft(grid, fft(grid, rhs) / (1 + dt * (c * k2 + p.A.shift)))
        norm = np.max(lq_norm(grid, u, 2))
        if not np.isfinite(norm) or norm > BLOWUP_FACTOR * ref:
            raise BlowUpError(f"pseudospectral step {i + 1}",
                              f"norm {norm:.3g} exceeds {BLOWUP_FACTOR:.0e} x initial scale")
        if i + 1 in keep:
            stored.append(u)
    batch = np.broadcast_shapes(*(s.shape[:-d - 1] for s in stored))
    stored = [np.broadcast_to(s, batch + s.shape[-d - 1:]) for s in stored]
    values = np.stack(stored, axis=len(batch))
    return SpaceTimePath(grid, noise.times[_store_indices(noise.M, stride)], values, noise.seeds)


def _noise_sum(g: np.ndarray, dw: np.ndarray, d: int) -> np.ndarray:
    """``sum_n g_n dw_n`` for ``g`` of shape ``(..., J, N, *space)``."""
    w = dw.reshape(dw.shape + (1,) * (1 + d))
    return np.sum(g * w, axis=-d - 2)


def solve_linear(p: LinearProblem, noise: NoisePath, stride: int = 1, **kw) -> SpaceTimePath:
    """Dispatch on whether the coefficients depend on x."""
    x_dep = getattr(p.A, "x_dependent", False) or (p.B is not None and getattr(p.B, "x_dependent", False))
    if x_dep:
        return solve_linear_pseudospectral(p, noise, stride, **kw)
    return solve_linear_spectral(p, noise, stride, **kw)


# --- evolution families -------------------------------------------------------------

class EvolutionFamily:
    """Discrete evolution family of ``u' + L(t) u = 0``, ``L = -div a grad``.

    ``step(i, v)`` maps a field at ``t_i`` to ``t_{i+1}``; ``apply(i, j, v)``
    gives ``Gamma(t_i, t_j) v`` for ``j <= i``.  The discrete cocycle law
    holds by construction.
    """

    def __init__(self, grid: TorusGrid, path: CoefficientPath, form: str = "divergence"):
        self.grid = grid
        self.path = path
        self.times = np.asarray(path.times)
        self.form = form
        self.spatial = path.spatial
        if self.spatial:
            self.c = stabilization_constant(path)
            self._terms = _second_order_terms(path, grid.d)
        else:
            self._syms = operator_symbols(grid, path, 1)
            self._E = {}

    @property
    def M(self) -> int:
        return len(self.times) - 1

    def _propagator(self, i: int):
        dt = self.times[i + 1] - self.times[i]
        key = (tuple(tuple(np.ravel(tau[..., i]).tolist()) for tau, _ in self._syms), dt)
        E = self._E.get(key)
        if E is None:
            E = propagator(_symbol_at(self._syms, i, 0.0, self.path.tensor_shape[-1]), dt)
            if len(self._E) > 256:
                self._E.clear()
            self._E[key] = E
        return E

    def step(self, i: int, v: np.ndarray) -> np.ndarray:
        grid = self.grid
        dt = self.times[i + 1] - self.times[i]
        if not self.spatial:
            return ifft(grid, _unflat(grid, _apply(self._propagator(i), _flat(grid, fft(grid, v)))))
        Lv = _apply_A(grid, self._terms, i, v, self.form, 1 + grid.d)
        lap = ifft(grid, grid.k2 * fft(grid, v))
        rhs = v - dt * (Lv - self.c * lap)
        return ifft(grid, fft(grid, rhs) / (1 + dt * self.c * grid.k2))

    def apply(self, i: int, j: int, v) -> np.ndarray:
        if j > i:
            raise ValueError("Gamma(t_i, t_j) needs j <= i")
        v = np.asarray(v.values if isinstance(v, Field) else v, dtype=complex)
        for k in range(j, i):
            v = self.step(k, v)
        return v

    def matrix(self, i: int, j: int) -> np.ndarray:
        """Materialized ``Gamma(t_i, t_j)`` for scalar fields on small 1-D grids."""
        if self.grid.d != 1 or self.grid.n > 256:
            raise ValueError("materialized matrices only for d = 1 and n <= 256")
        basis = np.eye(self.grid.n, dtype=complex)[:, None, :]
        return self.apply(i, j, basis)[:, 0, :].T

    def cocycle_defect(self, i: int, j: int, k: int, v) -> float:
        """``||Gamma(i,j) Gamma(j,k) v - Gamma(i,k) v||_2``."""
        a = self.apply(i, j, self.apply(j, k, v))
        b = self.apply(i, k, v)
        return float(np.max(lq_norm(self.grid, a - b, 2)))

    def uniform_bound(self, corpus, pairs) -> float:
        """``max ||Gamma(t,s) v||_2 / ||v||_2`` over a corpus and index pairs."""
        v = np.asarray(corpus, dtype=complex)
        base = lq_norm(self.grid, v, 2)
        worst = 0.0
        for i, j in pairs:
            worst = max(worst, float(np.max(lq_norm(self.grid, self.apply(i, j, v), 2) / base)))
        return worst


def assemble_evolution_family(a, grid: TorusGrid, times=None, noise: NoisePath | None = None,
                              seed: int = 0, samples: int = 2**10) -> EvolutionFamily:
    """Evolution family of ``-div a grad`` for a realized path or an operator spec.

    A spec is realized along ``noise`` (drawn from ``seed`` on ``times`` when
    absent).  Rejects coefficients whose ellipticity margin is not positive.
    """
    if isinstance(a, CoefficientPath):
        path = a
    else:
        if getattr(a, "m", 1) != 1:
            raise ValueError("evolution families are built for second-order operators")
        if noise is None:
            if times is None:
                raise ValueError("need a time grid or a noise path")
            noise = generate_noise(1, times, seed)
        path = a.sample(noise, seed, grid)
    margin = ellipticity_margin_2m(path, 1, samples, d=grid.d)
    if margin <= 0:
        raise ValueError(f"coefficient is not elliptic: margin {margin:.4g}")
    return EvolutionFamily(grid, path)


def deterministic_convolution(gamma: EvolutionFamily, f, stride: int = 1) -> SpaceTimePath:
    """``Mf(t_i) = sum_{j<i} Gamma(t_i, t_j) f(t_j) dt_j`` by the recursion
    ``Mf_{i+1} = Gamma(t_{i+1}, t_i)(Mf_i + f_i dt_i)``."""
    grid = gamma.grid
    f_at = _resolve_forcing(f, grid, gamma.times, 0)
    first = np.asarray(f_at(0))
    w = np.zeros_like(first, dtype=complex)
    keep = set(_store_indices(gamma.M, stride).tolist())
    out = [w]
    for i in range(gamma.M):
        w = gamma.step(i, w + f_at(i) * (gamma.times[i + 1] - gamma.times[i]))
        if i + 1 in keep:
            out.append(w)
    batch = w.shape[:-grid.d - 1]
    return SpaceTimePath(grid, gamma.times[sorted(keep)], np.stack(out, axis=len(batch)))


def stochastic_convolution(gamma: EvolutionFamily, g, noise: NoisePath, stride: int = 1,
                           check_adapted: bool = False) -> SpaceTimePath:
    """``sum_{t_j < t_i} Gamma(t_i, t_j) sum_n g_n(t_j) dw_n(t_j)``.

    ``g`` has shape ``([*batch,] [M+1,] J, N, *space)`` or is a callable
    ``g(noise)`` returning such an array (checked for adaptedness on request).
    """
    grid = gamma.grid
    if len(noise.times) != len(gamma.times) or not np.allclose(noise.times, gamma.times):
        raise ValueError("noise and evolution family live on different time grids")
    if callable(g) and not isinstance(g, (SpaceTimePath, Field)):
        if check_adapted:
            from .noise import AdaptednessError, is_adapted
            if not is_adapted(g, noise):
                raise AdaptednessError("integrand depends on future noise increments")
        g = g(noise)
    g_at = _resolve_forcing(g, grid, gamma.times, 1)
    d = grid.d
    w = np.zeros(noise.batch_shape + (np.asarray(g_at(0)).shape[-d - 1],) + grid.shape, dtype=complex)
    keep = set(_store_indices(gamma.M, stride).tolist())
    out = [w]
    for i in range(gamma.M):
        w = gamma.step(i, w + _noise_sum(g_at(i), noise.increments[..., i, :], d))
        if i + 1 in keep:
            out.append(w)
    return SpaceTimePath(grid, gamma.times[sorted(keep)], np.stack(out, axis=len(noise.batch_shape)),
                         noise.seeds)


# --- decomposition and continuity ------------------------------------------------------

def reference_symbol(grid: TorusGrid, m: int, N: int) -> np.ndarray:
    """``(1 + |k|^2)^m`` as a ``(K, N, N)`` symbol."""
    s = _flat(grid, (1 + grid.k2) ** m)
    return s[:, None, None] * np.eye(N)


def decompose_solve(p: LinearProblem, noise: NoisePath, stride: int = 1):
    """Split the additive-noise problem through the reference ``A0 = (1 - Delta)^m``.

    ``dV1 + A0 V1 dt = g dW`` with ``V1(0) = u0`` and
    ``V2' + A V2 = f + (A0 - A) V1`` with ``V2(0) = 0``; returns ``(V1, V2, U)``
    with ``U = V1 + V2``.
    """
    if p.B is not None:
        raise ValueError("decomposition handles additive noise only (B = 0)")
    _check_times(noise, p.T)
    grid = p.grid
    N = p.N
    A_path = realize(p.A, noise, p.seed, grid)
    syms = operator_symbols(grid, A_path, p.A.m)
    ref = reference_symbol(grid, p.A.m, N)
    ref_syms = [(np.ones(noise.M + 1), ref)]
    f_hat, g_hat = _spectral_forcings(p, noise)
    u_hat = _flat(grid, fft(grid, _initial(p.u0, grid, N)))
    V1 = _exponential_euler(grid, ref_syms, 0.0, N, [], None, g_hat, u_hat, noise, 1, "reference")

    def rhs(i):
        A_i = _symbol_at(syms, i, p.A.shift, N)
        diff = np.einsum("...kab,...bk->...ak", ref - A_i, V1[i])
        return diff + f_hat(i) if f_hat is not None else diff

    zero = np.zeros_like(V1[0])
    V2 = _exponential_euler(grid, syms, p.A.shift, N, [], rhs, None, zero, noise, 1, "pathwise")
    idx = _store_indices(noise.M, stride)
    V1 = [V1[i] for i in idx]
    V2 = [V2[i] for i in idx]
    v1 = _path_from_spectral(grid, noise, V1, stride)
    v2 = _path_from_spectral(grid, noise, V2, stride)
    return v1, v2, v1 + v2


def parabolicity_margin(A, B, noise: NoisePath, seed: int, grid: TorusGrid,
                        samples: int = 2**10) -> float:
    """Stochastic parabolicity margin of a realized ``(A, B)`` pair (second
    order) or the ellipticity margin of ``A`` when ``B`` is absent."""
    a_path = realize(A, noise, seed, grid)
    if B is None:
        return ellipticity_margin_2m(a_path, A.m, samples, d=grid.d)
    return ellipticity_margin_2m(tilde_path(a_path, realize(B, noise, seed, grid)), 1, samples,
                                 d=grid.d)


def continuity_sweep(p: LinearProblem, A_tilde, lambdas, noise: NoisePath, p_exp: float = 2.0,
                     q: float = 2.0, stride: int = 1, samples: int = 2**10) -> list:
    """Solve ``A_lambda = (1 - lambda) A_tilde + lambda A``, ``B_lambda = lambda B``.

    Returns one :class:`~smrlab.normlab.NormEstimate` per lambda for
    ``||U||_{L^p(Omega; L^p(I, w_alpha; L^q))}``; its ``extra`` dict carries the
    a-priori ratio ``||U|| / (||f|| + ||g||)``, the parabolicity margin and a
    ``flagged`` marker when the margin is not positive (solve skipped).
    """
    from .normlab import NormEstimate, WeightSpec, mc_lp_omega, weighted_lp_time_norm

    w = WeightSpec(p_exp, p.alpha, p.T)
    data_norm = _data_norm(p, noise, w, q)
    out = []
    for lam in lambdas:
        lam = float(lam)
        A_l = BlendedOperator(((1 - lam, A_tilde), (lam, p.A)))
        B_l = ScaledNoise(p.B, lam) if (p.B is not None and lam != 0) else None
        margin = parabolicity_margin(A_l, B_l, noise, p.seed, p.grid, samples)
        if margin <= 0:
            out.append(NormEstimate(float("nan"), float("nan"), int(np.size(noise.seeds)),
                                    p.grid.describe(), f"continuity lambda={lam:g}",
                                    extra={"lambda": lam, "margin": margin, "flagged": True,
                                           "ratio": float("nan")}))
            continue
        U = solve_linear(p.replace(A=A_l, B=B_l), noise, stride)
        per_seed = weighted_lp_time_norm(U, w, ("L", q))
        est = _aggregate(per_seed, p_exp, mc_lp_omega)
        ratio = est.value / data_norm if data_norm > 0 else float("nan")
        out.append(NormEstimate(est.value, est.half_width, est.samples, p.grid.describe(),
                                f"continuity lambda={lam:g}",
                                extra={"lambda": lam, "margin": margin, "flagged": False,
                                       "ratio": ratio}))
    return out


def _aggregate(per_seed, p_exp, mc):
    from .normlab import NormEstimate

    per_seed = np.atleast_1d(per_seed)
    if per_seed.size >= 2:
        return mc(per_seed, p_exp)
    return NormEstimate(float(per_seed[0]), 0.0, 1, "", "single")


def _data_norm(p: LinearProblem, noise: NoisePath, w, q: float) -> float:
    """``||f||_{L^p(I,w;L^q)} + ||g||_{L^p(I,w;L^q(l^2))}`` averaged over seeds."""
    from .normlab import weighted_lp_time_norm

    total = 0.0
    for obj, extra in ((p.f, 0), (p.g, 1)):
        acc = _resolve_forcing(obj, p.grid, noise.times, extra)
        if acc is None:
            continue
        vals = np.stack([np.broadcast_to(acc(i), np.asarray(acc(0)).shape)
                         for i in range(noise.M + 1)], axis=-p.grid.d - 2 - extra)
        if extra:
            vals = vals.reshape(vals.shape[: -p.grid.d - 2] + (-1,) + p.grid.shape)
        path = SpaceTimePath(p.grid, noise.times, vals)
        total += float(np.mean(weighted_lp_time_norm(path, w, ("L", q))))
    return total

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from smrlab.coefficients import GradientNoiseSpec, OperatorSpec
from smrlab.evolution import LinearProblem, solve_linear
from smrlab.grid import TorusGrid, plane_wave
from smrlab.noise import generate_noise, uniform_times
from smrlab.semilinear import (ContractionError, LipschitzViolation, Nonlinearity,
                               SemilinearProblem, continuous_dependence, estimate_mr_constants,
                               laplacian_power_constant, make_nonlinearity, picard_solve,
                               verify_lipschitz)

GRID = TorusGrid(1, 16)


def linear_problem(**kw):
    base = dict(u0=plane_wave(GRID, [1]), T=1.0)
    base.update(kw)
    return LinearProblem(GRID, OperatorSpec.laplacian(1), **base)


def noise(M=128, seeds=4):
    return generate_noise(1, uniform_times(1.0, M), np.arange(seeds))


def test_laplacian_power_constant():
    assert laplacian_power_constant(1, 1) == pytest.approx(1.0)
    # |k|^2 / sqrt(k1^4 + 2 k1^2 k2^2 ... ) in 2-D with three order-2 indices
    assert 1.0 <= laplacian_power_constant(2, 1) <= math.sqrt(2) + 1e-9


@pytest.mark.parametrize("kind,params", [("zero", {}), ("linear", {"lam": 0.7, "mu": 0.3}),
                                         ("sine", {"c": 0.4}),
                                         ("polynomial", {"c": 0.2, "radius": 1.5})])
def test_catalog_constants_hold(kind, params):
    nl = make_nonlinearity(kind, GRID, **params)
    assert verify_lipschitz(nl, GRID, 1, pairs=24) <= 1 + 1e-9


def test_noise_catalog_shapes():
    G = make_nonlinearity("linear", GRID, J=3, noise=True, lam=0.5)
    u = plane_wave(GRID, [1]).values
    out = G(0.0, u)
    assert out.shape == (3, 1) + GRID.shape
    assert np.allclose(out[0], 0.5 * u) and not out[1:].any()
    with pytest.raises(ValueError):
        make_nonlinearity("sine", GRID, noise=True)
    with pytest.raises(ValueError):
        make_nonlinearity("cubic", GRID)


def test_false_constants_are_caught():
    bad = Nonlinearity("bad", lambda t, u: 5 * u, 0.0, 1.0)
    with pytest.raises(LipschitzViolation):
        SemilinearProblem(linear_problem(), bad, make_nonlinearity("zero", GRID, noise=True))


def test_zero_nonlinearity_converges_in_one_iteration():
    nz = noise()
    sp = SemilinearProblem(linear_problem(), make_nonlinearity("zero", GRID),
                           make_nonlinearity("zero", GRID, noise=True))
    U, diag = picard_solve(sp, nz, constants=(0.9, 0.6))
    assert diag.iterations == [1]
    assert diag.windows == 1
    assert np.allclose(U.values, solve_linear(linear_problem(), nz).values, atol=1e-13)


@settings(max_examples=6, deadline=None)
@given(lam=st.floats(-0.8, 0.8))
def test_linear_drift_matches_mode_resolvent(lam):
    nz = noise(M=512, seeds=1)
    F = make_nonlinearity("linear", GRID, lam=lam)
    sp = SemilinearProblem(linear_problem(), F, make_nonlinearity("zero", GRID, noise=True))
    U, diag = picard_solve(sp, nz, constants=(0.9, 0.6))
    assert diag.converged
    c = np.mean(np.conj(plane_wave(GRID, [1]).values[0]) * U.values[0, -1, 0])
    exact = math.exp(lam - 1)
    assert abs(c - exact) / exact < 2e-3


def test_refusal_when_declared_constants_break_contraction():
    F = make_nonlinearity("linear", GRID, mu=1.5)
    sp = SemilinearProblem(linear_problem(), F, make_nonlinearity("zero", GRID, noise=True))
    with pytest.raises(ContractionError):
        picard_solve(sp, noise(), constants=(1.0, 0.5))


def test_contraction_ratio_respects_target_with_gradient_noise():
    lin = linear_problem(B=GradientNoiseSpec.scalar(1, [0.5]))
    F = make_nonlinearity("linear", GRID, lam=0.5, mu=0.25)
    G = make_nonlinearity("linear", GRID, noise=True, lam=0.2)
    nz = noise(M=128, seeds=4)
    K = estimate_mr_constants(lin, nz, probes=4)
    assert all(k > 0 for k in K)
    _, diag = picard_solve(SemilinearProblem(lin, F, G), nz, constants=K)
    assert diag.converged
    assert diag.window_ratio <= diag.target
    assert diag.ratio <= diag.target + 0.05


def test_continuous_dependence_is_finite():
    F = make_nonlinearity("sine", GRID, c=0.3)
    sp = SemilinearProblem(linear_problem(), F, make_nonlinearity("zero", GRID, noise=True))
    nz = noise(M=64, seeds=2)
    u1 = plane_wave(GRID, [1]).values
    r = continuous_dependence(sp, u1, 0.5 * u1, nz, constants=(0.9, 0.6))
    assert 0 < r < 10
    assert math.isnan(continuous_dependence(sp, u1, u1, nz, constants=(0.9, 0.6)))

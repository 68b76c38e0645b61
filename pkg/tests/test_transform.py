import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from smrlab.coefficients import CoefficientFamily, GradientNoiseSpec, OperatorSpec
from smrlab.evolution import LinearProblem
from smrlab.grid import TorusGrid, plane_wave, random_field
from smrlab.noise import coupled_refinements, generate_noise, uniform_times
from smrlab.transform import (build_tilde_A, equivalence_error, shift_operator,
                              transform_problem)


def forcing(grid, k=1):
    g = np.zeros((1, 1) + grid.shape, dtype=complex)
    g[0] = plane_wave(grid, [k]).values
    return g


@settings(max_examples=20, deadline=None)
@given(s=st.floats(0.1, 2.0) | st.floats(-2.0, -0.1) | st.just(0.0), shift=st.integers(-4, 4))
def test_shift_operator_translates(s, shift):
    # S_B(a) = exp(a sigma d/dx): translation by a * sigma
    g = TorusGrid(1, 16)
    sigma = np.array([[[s]]])
    f = random_field(g, np.random.default_rng(0), bandwidth=7)
    a = shift * g.spacing / s if s != 0 else 0.0
    out = shift_operator(np.array([a]), sigma, g)(f.values)
    expected = np.roll(f.values, -shift, axis=-1) if s != 0 else f.values
    assert np.allclose(out, expected, atol=1e-10)


@settings(max_examples=20, deadline=None)
@given(a=st.floats(-3, 3), b=st.floats(-3, 3))
def test_shift_group_law(a, b):
    g = TorusGrid(2, 8)
    sigma = np.zeros((2, 1, 2))
    sigma[0, 0, 0] = 0.7
    sigma[1, 0, 1] = -0.4
    f = random_field(g, np.random.default_rng(1)).values
    S = lambda x: shift_operator(np.asarray(x), sigma, g)  # noqa: E731
    assert np.allclose(S([a, b])(S([b, a])(f)), S([a + b, a + b])(f), atol=1e-10)
    assert np.allclose(S([-a, -b])(S([a, b])(f)), f, atol=1e-10)


def test_shift_refuses_x_dependent_sigma():
    g = TorusGrid(1, 8)
    B = GradientNoiseSpec.scalar(1, [0.5], family=CoefficientFamily(space="smooth",
                                                                      space_amplitude=0.2))
    with pytest.raises(ValueError):
        shift_operator(np.zeros(1), B, g)
    with pytest.raises(ValueError):
        build_tilde_A(OperatorSpec.laplacian(1), B)


def test_tilde_operator_coefficient():
    g = TorusGrid(1, 8)
    noise = generate_noise(1, uniform_times(1.0, 4), 0)
    At = build_tilde_A(OperatorSpec.laplacian(1), GradientNoiseSpec.scalar(1, [1.0]))
    assert np.allclose(At.sample(noise, 0, g).at(0), 0.5)
    assert build_tilde_A(OperatorSpec.laplacian(1), None).d == 1


def test_transformed_problem_has_additive_noise_only():
    g = TorusGrid(1, 8)
    p = LinearProblem(g, OperatorSpec.laplacian(1), GradientNoiseSpec.scalar(1, [0.5]),
                      g=forcing(g), u0=plane_wave(g, [2]))
    tp = transform_problem(p, generate_noise(1, uniform_times(1.0, 16), np.arange(2)))
    assert tp.problem.B is None
    assert tp.commutator is not None
    assert tp.zeta.values.shape == (2, 17, 1)


def test_sigma_zero_is_exact():
    g = TorusGrid(1, 16)
    p = LinearProblem(g, OperatorSpec.laplacian(1), GradientNoiseSpec.scalar(1, [0.0]),
                      g=forcing(g), u0=plane_wave(g, [2]))
    noises = coupled_refinements(1, 1.0, 64, 1, np.arange(8))
    assert max(equivalence_error(p, noises)) < 1e-12


def test_equivalence_error_decreases_with_refinement():
    g = TorusGrid(1, 16)
    p = LinearProblem(g, OperatorSpec.laplacian(1), GradientNoiseSpec.scalar(1, [1.0]),
                      g=forcing(g), u0=plane_wave(g, [2]))
    e = equivalence_error(p, coupled_refinements(1, 1.0, 128, 2, np.arange(16)))
    assert e[0] > e[1] > e[2]

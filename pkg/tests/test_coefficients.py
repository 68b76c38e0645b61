import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from smrlab.coefficients import (CoefficientBoundError, CoefficientFamily, GradientNoiseSpec,
                                 OperatorSpec, apply_second_order, bounded_L_ratio,
                                 divergence_free_defect, divergence_free_field,
                                 ellipticity_margin_2m, isotropic_tensor, parabolicity_correction,
                                 stochastic_parabolicity_margin, tilde_path)
from smrlab.grid import TorusGrid, plane_wave, random_field
from smrlab.noise import generate_noise, stream, uniform_times


def test_isotropic_tensor_margin_is_c():
    for d, m in [(1, 1), (2, 1), (2, 2), (3, 1), (1, 3)]:
        a = isotropic_tensor(d, m, 1, 2.5)
        assert abs(ellipticity_margin_2m(a, m, d=d) - 2.5) < 1e-6


def test_margin_of_anisotropic_matrix_is_smallest_eigenvalue():
    a = np.array([[2.0, 0.5], [0.5, 1.0]])
    T = a[:, :, None, None]
    assert abs(ellipticity_margin_2m(T, 1, d=2) - np.linalg.eigvalsh(a).min()) < 1e-6


def test_system_margin_uses_hermitian_part():
    # skew off-diagonal block does not help the form
    T = np.zeros((1, 1, 2, 2), dtype=complex)
    T[0, 0] = [[1.0, 3.0], [-3.0, 0.5]]
    assert abs(ellipticity_margin_2m(T, 1, d=1) - 0.5) < 1e-9


def test_stochastic_parabolicity_scalar():
    a = np.eye(1)[:, :, None, None]
    for s in [0.0, 0.5, 1.0, 1.5]:
        sigma = np.array([[[s]]])
        assert abs(stochastic_parabolicity_margin(a, sigma) - (1 - s**2 / 2)) < 1e-9


def test_parabolicity_correction_shape():
    sigma = np.ones((2, 3, 4))
    S = parabolicity_correction(sigma)
    assert S.shape == (2, 2, 3, 3)
    assert np.allclose(S[0, 0], 2.0 * np.eye(3))


def test_tilde_path_matches_tensor_formula():
    noise = generate_noise(1, uniform_times(1.0, 4), 0)
    A = OperatorSpec.laplacian(1)
    B = GradientNoiseSpec.scalar(1, [0.8])
    tp = tilde_path(A.sample(noise), B.sample(noise))
    assert np.allclose(tp.at(2), 1 - 0.32)


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 2**20), d=st.sampled_from([2, 3]))
def test_divergence_free_field_has_free_columns(seed, d):
    g = TorusGrid(d, 16)
    C = divergence_free_field(g, stream(seed), 2)
    assert divergence_free_defect(C, g) < 1e-10
    opnorm = np.linalg.norm(np.moveaxis(C.reshape(d, d, -1), -1, 0), ord=2, axis=(1, 2)).max()
    assert opnorm <= 1 + 1e-12


def test_divergence_form_equals_nondivergence_for_divfree():
    g = TorusGrid(2, 32)
    C = divergence_free_field(g, stream(3), 2)
    a = np.eye(2)[:, :, None, None] + 0.4 * C
    u = random_field(g, np.random.default_rng(0), bandwidth=5).values
    div = apply_second_order(g, a, u, "divergence", dealias=False)
    nondiv = apply_second_order(g, a, u, "nondivergence", dealias=False)
    assert np.max(np.abs(div - nondiv)) < 1e-9


def test_bounded_L_ratio_for_divfree_coefficient():
    g = TorusGrid(2, 32)
    a = np.eye(2)[:, :, None, None] + 0.5 * divergence_free_field(g, stream(1), 2)
    corpus = random_field(g, np.random.default_rng(2), batch=(6,)).values
    assert bounded_L_ratio(a, g, corpus) < 2.0


def test_constant_operator_acts_as_symbol():
    g = TorusGrid(1, 16)
    u = plane_wave(g, [3]).values
    Lu = apply_second_order(g, np.full((1, 1), 2.0), u)
    assert np.allclose(Lu, 18.0 * u)


def test_piecewise_family_is_adapted_and_reproducible():
    fam = CoefficientFamily(time="piecewise", time_amplitude=0.5, switches=3)
    A = OperatorSpec.laplacian(1, family=fam)
    noise = generate_noise(1, uniform_times(1.0, 32), np.arange(3))
    p1 = A.sample(noise, seed=4)
    p2 = A.sample(noise, seed=4)
    assert np.array_equal(p1.values, p2.values)
    assert 0.5 - 1e-12 <= p1.values.real.min() and p1.values.real.max() <= 1.5 + 1e-12
    i = 10
    moved = A.sample(noise.perturb_after(i), seed=4)
    assert np.array_equal(moved.values[:, : i + 1], p1.values[:, : i + 1])


def test_sup_bound_is_enforced():
    with pytest.raises(CoefficientBoundError):
        OperatorSpec.laplacian(1, c=20.0).sample(generate_noise(1, uniform_times(1.0, 2), 0))


def test_spec_validation():
    with pytest.raises(ValueError):
        OperatorSpec(1, 4, np.ones((1, 1, 1, 1)))
    with pytest.raises(ValueError):
        OperatorSpec.laplacian(2, m=2, family=CoefficientFamily(space="divfree"))
    with pytest.raises(ValueError):
        CoefficientFamily(time="sinusoid", time_amplitude=1.5)
    with pytest.raises(ValueError):
        CoefficientFamily(space="checkerboard")


def test_path_window_and_scaling():
    noise = generate_noise(1, uniform_times(1.0, 8), 0)
    fam = CoefficientFamily(time="sinusoid", time_amplitude=0.3)
    path = OperatorSpec.laplacian(1, family=fam).sample(noise)
    w = path.window(2, 5)
    assert len(w.times) == 4
    assert np.allclose(w.values, path.values[2:6])
    assert np.allclose(path.scaled(2.0).values, 2 * path.values)
    assert np.allclose((path + path).values, 2 * path.values)

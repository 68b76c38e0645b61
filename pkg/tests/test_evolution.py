import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from smrlab.coefficients import CoefficientFamily, GradientNoiseSpec, OperatorSpec
from smrlab.evolution import (BlowUpError, LinearProblem, SpaceTimePath,
                              assemble_evolution_family, continuity_sweep, decompose_solve,
                              deterministic_convolution, solve_linear, solve_linear_pseudospectral,
                              solve_linear_spectral, stochastic_convolution)
from smrlab.grid import TorusGrid, fft, plane_wave, random_field
from smrlab.noise import generate_noise, uniform_times


def mode(grid, values, k):
    wave = plane_wave(grid, k).values[0]
    return np.mean(np.conj(wave) * values[..., 0, :], axis=-1)


@settings(max_examples=10, deadline=None)
@given(k=st.integers(1, 6), c=st.floats(0.2, 2.0))
def test_heat_mode_decay_is_exact_for_constant_coefficients(k, c):
    g = TorusGrid(1, 32)
    p = LinearProblem(g, OperatorSpec.laplacian(1, c=c), u0=plane_wave(g, [k]), T=1.0)
    U = solve_linear(p, generate_noise(1, uniform_times(1.0, 64), 0))
    expected = np.exp(-c * k**2 * U.times)
    assert np.allclose(mode(g, U.values, [k]).real, expected, rtol=1e-12, atol=1e-15)


def test_biharmonic_mode_decay():
    g = TorusGrid(2, 16)
    p = LinearProblem(g, OperatorSpec.laplacian(2, m=2), u0=plane_wave(g, (1, 1)), T=0.25)
    U = solve_linear(p, generate_noise(1, uniform_times(0.25, 8), 0))
    c = fft(g, U.final().values)[0, 1, 1]
    assert abs(c - math.exp(-4 * 0.25)) < 1e-12


def test_ou_mode_variance():
    g = TorusGrid(1, 8)
    gg = np.zeros((1, 1) + g.shape, dtype=complex)
    gg[0] = plane_wave(g, [1]).values
    p = LinearProblem(g, OperatorSpec.laplacian(1), g=gg, T=1.0)
    U = solve_linear(p, generate_noise(1, uniform_times(1.0, 256), np.arange(4000)), stride=256)
    var = np.mean(np.abs(mode(g, U.values[:, -1], [1])) ** 2)
    assert abs(var - (1 - math.exp(-2)) / 2) < 0.03


def test_pseudospectral_agrees_with_spectral_on_uniform_coefficients():
    g = TorusGrid(1, 32)
    fam = CoefficientFamily(space="smooth", space_amplitude=0.0)
    A = OperatorSpec.laplacian(1, family=fam)
    u0 = random_field(g, np.random.default_rng(0), bandwidth=4)
    noise = generate_noise(1, uniform_times(0.5, 512), 0)
    U1 = solve_linear_pseudospectral(LinearProblem(g, A, u0=u0, T=0.5), noise)
    U2 = solve_linear_spectral(LinearProblem(g, OperatorSpec.laplacian(1), u0=u0, T=0.5), noise)
    err = np.max(np.abs(U1.final().values - U2.final().values))
    assert err < 5e-3


def test_pseudospectral_gradient_noise_mean_square_decay():
    # a - sigma^2/2 > 0 keeps the second moment bounded
    g = TorusGrid(1, 16)
    fam = CoefficientFamily(space="smooth", space_amplitude=0.2)
    A = OperatorSpec.laplacian(1, family=fam)
    B = GradientNoiseSpec.scalar(1, [0.5])
    p = LinearProblem(g, A, B, u0=plane_wave(g, [1]), T=1.0)
    U = solve_linear(p, generate_noise(1, uniform_times(1.0, 256), np.arange(64)), stride=256)
    assert np.mean(np.abs(U.values[:, -1]) ** 2) < 1.0


def test_blowup_is_reported_with_stage():
    g = TorusGrid(1, 32)
    fam = CoefficientFamily(space="smooth", space_amplitude=0.0)
    A = OperatorSpec.laplacian(1, c=-1.0, family=fam)
    u0 = random_field(g, np.random.default_rng(0))
    with pytest.raises(BlowUpError) as info:
        solve_linear(LinearProblem(g, A, u0=u0, T=1.0), generate_noise(1, uniform_times(1.0, 100), 0))
    assert "pseudospectral" in info.value.stage


def test_horizon_and_stride_checks():
    g = TorusGrid(1, 8)
    p = LinearProblem(g, OperatorSpec.laplacian(1), u0=plane_wave(g, [1]), T=1.0)
    with pytest.raises(ValueError):
        solve_linear(p, generate_noise(1, uniform_times(2.0, 8), 0))
    with pytest.raises(ValueError):
        solve_linear(p, generate_noise(1, uniform_times(1.0, 8), 0), stride=3)


def test_linearity_in_data():
    g = TorusGrid(1, 16)
    noise = generate_noise(1, uniform_times(1.0, 32), np.arange(3))
    A = OperatorSpec.laplacian(1)
    B = GradientNoiseSpec.scalar(1, [0.3])
    u1 = random_field(g, np.random.default_rng(1))
    u2 = random_field(g, np.random.default_rng(2))
    U1 = solve_linear(LinearProblem(g, A, B, u0=u1), noise)
    U2 = solve_linear(LinearProblem(g, A, B, u0=u2), noise)
    U12 = solve_linear(LinearProblem(g, A, B, u0=u1 + 2 * u2), noise)
    assert np.allclose(U12.values, U1.values + 2 * U2.values, atol=1e-12)


def test_decomposition_reassembles_solution():
    g = TorusGrid(1, 16)
    gg = np.zeros((1, 1) + g.shape, dtype=complex)
    gg[0] = plane_wave(g, [2]).values
    A = OperatorSpec.laplacian(1, c=0.5)
    p = LinearProblem(g, A, g=gg, u0=plane_wave(g, [1]), T=1.0)
    noise = generate_noise(1, uniform_times(1.0, 1024), np.arange(4))
    V1, V2, U = decompose_solve(p, noise, stride=64)
    direct = solve_linear(p, noise, stride=64)
    assert np.max(np.abs(U.values - direct.values)) < 0.02
    with pytest.raises(ValueError):
        decompose_solve(p.replace(B=GradientNoiseSpec.scalar(1, [0.1])), noise)


def test_space_time_path_bytes_roundtrip():
    g = TorusGrid(2, 4)
    p = LinearProblem(g, OperatorSpec.laplacian(2), u0=random_field(g, np.random.default_rng(0)))
    U = solve_linear(p, generate_noise(1, uniform_times(1.0, 4), 5))
    data = U.to_bytes()
    back = SpaceTimePath.from_bytes(data)
    assert np.array_equal(back.values, U.values)
    assert np.array_equal(back.times, U.times)
    assert back.to_bytes() == data


def divfree_family(grid, M=32):
    fam = CoefficientFamily(space="divfree", space_amplitude=0.6, time="sinusoid",
                            time_amplitude=0.3)
    A = OperatorSpec.laplacian(2, family=fam, form="divergence")
    return assemble_evolution_family(A, grid, times=uniform_times(1.0, M), seed=2)


def test_evolution_family_cocycle_and_contraction():
    g = TorusGrid(2, 16)
    gamma = divfree_family(g)
    v = random_field(g, np.random.default_rng(3), batch=(3,)).values
    assert gamma.cocycle_defect(20, 10, 3, v) < 1e-12
    assert np.allclose(gamma.apply(7, 7, v), v)
    assert gamma.uniform_bound(v, [(32, 0), (20, 5)]) <= 1 + 1e-9
    with pytest.raises(ValueError):
        gamma.apply(1, 2, v)


def test_evolution_family_matrix_for_constant_coefficient():
    g = TorusGrid(1, 8)
    gamma = assemble_evolution_family(OperatorSpec.laplacian(1), g, times=uniform_times(1.0, 4))
    Gm = gamma.matrix(4, 0)
    # Gamma(1, 0) applied to cos x
    x = g.coordinates[0]
    assert np.allclose(Gm @ np.cos(x), math.exp(-1) * np.cos(x), atol=1e-12)


def test_evolution_family_rejects_nonelliptic():
    g = TorusGrid(1, 8)
    with pytest.raises(ValueError):
        assemble_evolution_family(OperatorSpec.laplacian(1, c=-1.0), g, times=uniform_times(1.0, 4))


def test_deterministic_convolution_of_constant_forcing():
    g = TorusGrid(1, 8)
    gamma = assemble_evolution_family(OperatorSpec.laplacian(1), g, times=uniform_times(1.0, 2048))
    f = plane_wave(g, [1]).values
    W = deterministic_convolution(gamma, f, stride=2048)
    assert abs(mode(g, W.values[-1], [1]) - (1 - math.exp(-1))) < 1e-3


def test_stochastic_convolution_matches_solver():
    g = TorusGrid(1, 8)
    times = uniform_times(1.0, 64)
    noise = generate_noise(1, times, np.arange(5))
    gamma = assemble_evolution_family(OperatorSpec.laplacian(1), g, noise=noise)
    gg = np.zeros((1, 1) + g.shape, dtype=complex)
    gg[0] = plane_wave(g, [1]).values
    W = stochastic_convolution(gamma, gg, noise)
    U = solve_linear(LinearProblem(g, OperatorSpec.laplacian(1), g=gg), noise)
    assert np.allclose(W.values, U.values, atol=1e-12)


def test_continuity_sweep_flags_lost_parabolicity():
    g = TorusGrid(1, 8)
    gg = np.zeros((1, 1) + g.shape, dtype=complex)
    gg[0] = plane_wave(g, [1]).values
    p = LinearProblem(g, OperatorSpec.laplacian(1), B=GradientNoiseSpec.scalar(1, [2.0]), g=gg)
    noise = generate_noise(1, uniform_times(1.0, 32), np.arange(4))
    est = continuity_sweep(p, OperatorSpec.laplacian(1), [0.0, 0.5, 1.0], noise)
    flags = [e.extra["flagged"] for e in est]
    assert flags == [False, False, True]
    assert math.isnan(est[2].value)
    assert est[0].extra["margin"] > 0

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from smrlab.grid import (Field, TorusGrid, apply_derivative, besov_norm, bessel_norm,
                         derivative_symbol, fft, gradient, lq_norm, multi_indices,
                         plane_wave, random_field, to_physical, to_spectral)

dims = st.sampled_from([1, 2, 3])
sizes = st.sampled_from([4, 8, 16])


def test_grid_validation():
    with pytest.raises(ValueError):
        TorusGrid(4, 8)
    with pytest.raises(ValueError):
        TorusGrid(1, 12)
    with pytest.raises(ValueError):
        TorusGrid(1, 8, period=0.0)


def test_plane_wave_coefficient_is_its_amplitude():
    g = TorusGrid(2, 16)
    c = fft(g, plane_wave(g, (3, -2)).values)
    idx = (0, 3, 16 - 2)
    assert abs(c[idx] - 1) < 1e-13
    c[idx] = 0
    assert np.max(np.abs(c)) < 1e-13


@settings(max_examples=25, deadline=None)
@given(d=dims, n=sizes, seed=st.integers(0, 2**16), N=st.integers(1, 3))
def test_fft_roundtrip_and_parseval(d, n, seed, N):
    g = TorusGrid(d, n)
    f = random_field(g, np.random.default_rng(seed), N, real=False)
    back = to_physical(to_spectral(f)).values
    assert np.allclose(back, f.values, atol=1e-12)
    energy = np.sum(np.abs(fft(g, f.values)) ** 2)
    assert math.isclose(energy, float(lq_norm(g, f.values)) ** 2, rel_tol=1e-12)


@settings(max_examples=25, deadline=None)
@given(d=dims, n=sizes, seed=st.integers(0, 2**16))
def test_bytes_roundtrip(d, n, seed):
    g = TorusGrid(d, n)
    f = random_field(g, np.random.default_rng(seed), 2, real=False)
    data = f.to_bytes()
    assert len(data) == 2 * 2 * g.size * 8
    assert np.array_equal(Field.from_bytes(g, 2, data).values, f.values)


def test_derivative_of_plane_wave():
    g = TorusGrid(1, 32, period=4.0)
    f = plane_wave(g, [3])
    df = apply_derivative(f, [1]).values
    k = 2 * math.pi * 3 / 4.0
    assert np.allclose(df, 1j * k * f.values, atol=1e-11)
    d2 = apply_derivative(f, [2]).values
    assert np.allclose(d2, -k**2 * f.values, atol=1e-10)


def test_odd_derivative_kills_nyquist():
    g = TorusGrid(2, 8)
    sym = derivative_symbol(g, (1, 0))
    assert np.all(sym[g.nyquist_mask() & (g.frequency_index[0] == -4)] == 0)
    assert np.all(derivative_symbol(g, (2, 0))[g.frequency_index[0] == -4] != 0)
    # real input stays real under odd derivatives
    f = random_field(g, np.random.default_rng(1), bandwidth=4)
    assert np.max(np.abs(apply_derivative(f, (1, 0)).values.imag)) < 1e-12


def test_derivative_order_limit():
    g = TorusGrid(1, 8)
    with pytest.raises(ValueError):
        derivative_symbol(g, (7,))
    with pytest.raises(ValueError):
        derivative_symbol(g, (1, 1))


@settings(max_examples=15, deadline=None)
@given(d=dims, seed=st.integers(0, 2**16))
def test_gradient_matches_axis_derivatives(d, seed):
    g = TorusGrid(d, 8)
    f = random_field(g, np.random.default_rng(seed))
    grad = gradient(g, f.values)
    assert grad.shape == (d, 1) + g.shape
    for axis in range(d):
        alpha = [0] * d
        alpha[axis] = 1
        assert np.allclose(grad[axis], apply_derivative(f, alpha).values)


def test_bessel_norm_of_plane_wave():
    g = TorusGrid(1, 32)
    f = plane_wave(g, [2])
    assert math.isclose(float(bessel_norm(f, 2.0, 2.0)), 5.0, rel_tol=1e-12)
    assert math.isclose(float(lq_norm(g, f.values, 4.0)), 1.0, rel_tol=1e-12)


def test_besov_norm_recovers_single_block():
    g = TorusGrid(1, 64)
    f = plane_wave(g, [4])
    # |k| = 4 sits at the centre of block j = 2
    assert math.isclose(float(besov_norm(f, 1.0, 2.0, 2.0)), 4.0, rel_tol=1e-12)


def test_lq_norm_combines_components():
    g = TorusGrid(1, 8)
    v = np.zeros((2,) + g.shape)
    v[0] = 3.0
    v[1] = 4.0
    assert math.isclose(float(lq_norm(g, v, 2.0)), 5.0)
    with pytest.raises(ValueError):
        lq_norm(g, v, 0.5)


def test_multi_indices_counts():
    assert multi_indices(2, 1) == [(1, 0), (0, 1)]
    assert len(multi_indices(3, 2)) == 6
    assert len(multi_indices(2, 3)) == 4


def test_dealias_mask_is_two_thirds_rule():
    g = TorusGrid(1, 16)
    kept = g.frequency_index[0][g.dealias_mask]
    assert kept.max() == 5 and kept.min() == -5

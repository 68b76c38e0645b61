import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from smrlab.evolution import SpaceTimePath
from smrlab.grid import TorusGrid, plane_wave
from smrlab.noise import uniform_times
from smrlab.normlab import (WeightSpec, empirical_order, fractional_seminorm, holder_norm,
                            holder_seminorm, mc_lp_omega, mc_mean, smr_norm, smr_surrogate,
                            spatial_norms, weighted_lp_time_norm)

SQRT_4_15 = 0.51640


def linear_path(M, grid=None):
    grid = grid or TorusGrid(1, 2)
    t = uniform_times(1.0, M)
    vals = np.ones((M + 1, 1) + grid.shape) * t.reshape(-1, 1, *([1] * grid.d))
    return SpaceTimePath(grid, t, vals)


def test_fractional_seminorm_oracle():
    assert abs(math.sqrt(4 / 15) - SQRT_4_15) < 5e-6
    val = float(fractional_seminorm(linear_path(2**10), 0.25))
    assert abs(val - math.sqrt(4 / 15)) < 2e-3


def test_fractional_seminorm_rejects_bad_input():
    P = linear_path(8)
    with pytest.raises(ValueError):
        fractional_seminorm(P, 1.2)
    t = np.array([0.0, 0.1, 0.5, 1.0])
    Q = SpaceTimePath(P.grid, t, np.ones((4, 1, 2)))
    with pytest.raises(ValueError):
        fractional_seminorm(Q, 0.3)


@settings(max_examples=20, deadline=None)
@given(p=st.sampled_from([2.0, 3.0, 4.0]), alpha=st.floats(0.0, 0.9))
def test_weighted_lp_of_linear_path(p, alpha):
    if alpha >= p / 2 - 1 and alpha > 0:
        with pytest.raises(ValueError):
            WeightSpec(p, alpha)
        return
    val = float(weighted_lp_time_norm(linear_path(2**10), WeightSpec(p, alpha)))
    exact = (1 / (p + alpha + 1)) ** (1 / p)
    assert abs(val - exact) < 1e-4


def test_raw_weight_pair_skips_admissibility():
    val = float(weighted_lp_time_norm(linear_path(2**10), (2.0, 1.0)))
    assert abs(val - 0.5) < 1e-5


def test_weight_delta():
    assert WeightSpec(4.0, 0.5).delta == pytest.approx(1 - 1.5 / 4)


def test_holder_of_linear_path():
    P = linear_path(64)
    assert float(holder_seminorm(P, 0.5)) == pytest.approx(1.0)
    assert float(holder_norm(P, 0.5)) == pytest.approx(2.0)


@settings(max_examples=15, deadline=None)
@given(c=st.floats(-5, 5), beta=st.floats(0.05, 0.95))
def test_seminorm_homogeneous_and_shift_invariant(c, beta):
    P = linear_path(32)
    base = fractional_seminorm(P, beta)
    scaled = SpaceTimePath(P.grid, P.times, c * P.values + 3.0)
    assert float(fractional_seminorm(scaled, beta)) == pytest.approx(abs(c) * float(base),
                                                                     rel=1e-10, abs=1e-12)


def test_spatial_norm_specs():
    g = TorusGrid(1, 16)
    v = plane_wave(g, [2]).values
    assert float(spatial_norms(g, v, ("L", 2.0))) == pytest.approx(1.0)
    assert float(spatial_norms(g, v, ("H", 2.0, 2.0))) == pytest.approx(5.0)


def test_smr_norm_parts():
    g = TorusGrid(1, 16)
    t = uniform_times(1.0, 64)
    vals = np.sin(np.pi * t)[:, None, None] * plane_wave(g, [1]).values
    P = SpaceTimePath(g, t, vals)
    lp, semi = smr_surrogate(P, 0.3, 0.25)
    assert float(smr_norm(P, 0.25, gap=0.05)) == pytest.approx(float(lp + semi))
    with pytest.raises(ValueError):
        smr_norm(P, 0.6)


def test_monte_carlo_estimates():
    x = np.full(50, 2.0)
    est = mc_lp_omega(x, 3.0)
    assert est.value == pytest.approx(2.0)
    assert est.half_width == pytest.approx(0.0, abs=1e-12)
    rng = np.random.default_rng(0)
    m = mc_mean(rng.standard_normal(4000))
    assert m.interval[0] < 0 < m.interval[1]
    with pytest.raises(ValueError):
        mc_lp_omega([1.0])


def test_empirical_order():
    h = np.array([0.1, 0.05, 0.025])
    assert empirical_order(h, 3 * h**0.5) == pytest.approx(0.5)

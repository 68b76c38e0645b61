import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from smrlab.coefficients import divergence_free_defect
from smrlab.grid import TorusGrid, plane_wave
from smrlab.tent import (TentField, TentNormParams, aperture_ratio, attenuation, ball_average,
                         fit_decay_order, heat_family, log_time_grid, periodic_ball,
                         profile_at_ratios, random_tent_corpus, resolvent_family,
                         rough_coefficient, solver_times, square_function, strip_probes,
                         strip_sets, tent_maxreg_experiment, tent_norm, weighted_l2)

E_MINUS_4 = 0.0183


def test_log_grid_tiles_interval():
    edges, mids, dlog = log_time_grid(1 / 64, 8.0)
    assert edges[0] == pytest.approx(1 / 64) and edges[-1] == pytest.approx(8.0)
    assert np.allclose(np.diff(np.log(edges)), dlog)
    assert np.all((edges[:-1] < mids) & (mids < edges[1:]))
    assert dlog.max() <= math.log(2) / 4 + 1e-12
    with pytest.raises(ValueError):
        log_time_grid(2.0, 1.0)


def test_ln2_box_example():
    g = TorusGrid(1, 32)
    edges, _, _ = log_time_grid(1.0, 2.0)
    f = TentField.from_function(g, edges, lambda t: np.ones((1,) + g.shape))
    assert abs(float(tent_norm(f, 2.0, 0.0)) ** 2 - math.log(2)) < 1e-12
    assert abs(float(weighted_l2(f)) ** 2 - math.log(2)) < 1e-12


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 2**20), sigma=st.floats(0.0, 2.0), localized=st.booleans(),
       d=st.sampled_from([1, 2]))
def test_fubini_identity(seed, sigma, localized, d):
    g = TorusGrid(d, 64 if d == 1 else 32)
    edges, _, _ = log_time_grid(1 / 16, 4.0)
    corpus = random_tent_corpus(g, edges, 4, seed, K=2, localized=localized)
    lhs = tent_norm(corpus, 2.0, sigma)
    rhs = weighted_l2(corpus, sigma)
    assert np.allclose(lhs, rhs, rtol=1e-10)


def test_ball_average_preserves_mean():
    g = TorusGrid(2, 32)
    v = np.random.default_rng(0).normal(size=g.shape)
    assert periodic_ball(g, 0.7).sum() == pytest.approx(1.0)
    assert ball_average(g, v, 0.7).mean() == pytest.approx(v.mean())


def test_param_validation():
    with pytest.raises(ValueError):
        TentNormParams(p=0.5)
    with pytest.raises(ValueError):
        TentNormParams(aperture=0.5)
    g = TorusGrid(1, 16, period=2.0)
    with pytest.raises(ValueError):
        TentField(g, np.array([1.0, 2.0]), np.ones((1, 1, 16)))


def test_aperture_ratio_at_least_one_for_p_below_two():
    g = TorusGrid(1, 128)
    edges, _, _ = log_time_grid(1 / 64, 4.0)
    corpus = random_tent_corpus(g, edges, 6, 1)
    r = aperture_ratio(corpus, 1.0, 0.0, 4.0)
    assert np.all(r >= 1 - 1e-12)
    assert np.allclose(aperture_ratio(corpus, 2.0, 0.0, 4.0), 1.0, rtol=1e-10)


def test_square_function_of_constant():
    g = TorusGrid(1, 32)
    edges, _, _ = log_time_grid(1.0, 2.0)
    f = TentField.from_function(g, edges, lambda t: 2 * np.ones((1,) + g.shape))
    assert np.allclose(square_function(f), 4 * math.log(2))


def test_heat_attenuation_bounded_by_gaussian():
    # ||1_E e^{t Delta} 1_F|| <= exp(-dist^2 / (4t)); e^{-4} at ratio 16
    assert abs(math.exp(-4) - E_MINUS_4) < 5e-5
    g = TorusGrid(1, 256)
    rows = profile_at_ratios(g, heat_family(g), [4.0, 16.0], 32, 64)
    for row in rows:
        assert row["attenuation"] <= math.exp(-row["ratio"] / 4) + 1e-6
    assert rows[1]["attenuation"] < rows[0]["attenuation"]


def test_attenuation_is_at_most_one_for_heat():
    g = TorusGrid(1, 64)
    E, F, dist = strip_sets(g, 8, 4)
    assert dist == pytest.approx(5 * g.spacing)
    probes = strip_probes(g, 8, count=12)
    assert attenuation(g, heat_family(g), 0.01, 0.0, F, F, probes) <= 1 + 1e-9
    with pytest.raises(ValueError):
        strip_sets(g, 24, 10)


def test_resolvent_family_constant_coefficient_decays():
    g = TorusGrid(1, 256)
    K = resolvent_family(g, np.eye(1))
    rows = profile_at_ratios(g, K, [1.0, 4.0, 16.0, 64.0], 32, 64)
    atts = [r["attenuation"] for r in rows]
    assert all(b < a for a, b in zip(atts, atts[1:]))
    assert fit_decay_order(rows) > 1.0


def test_fit_decay_order_recovers_power():
    r = np.array([1.0, 4.0, 16.0, 64.0])
    rows = [{"ratio": x, "attenuation": 2 * (1 + x) ** -3.0} for x in r]
    assert fit_decay_order(rows) == pytest.approx(3.0)
    with pytest.raises(ValueError):
        fit_decay_order(rows, leakage=10.0)


def test_rough_coefficient_divergence_free_and_shared():
    edges, _, _ = log_time_grid(1 / 16, 2.0)
    g1, g2 = TorusGrid(2, 16), TorusGrid(2, 32)
    a1 = rough_coefficient(g1, solver_times(edges, 1), edges, 3, True)
    a2 = rough_coefficient(g2, solver_times(edges, 2), edges, 3, True)
    assert divergence_free_defect(a1.at(0)[:, :, 0, 0], g1) < 1e-10
    # same time factor on the shared nodes
    assert np.allclose(a1.terms[0][0], a2.terms[0][0][::2])


def test_maxreg_constant_coefficient_single_mode():
    # f = e^{ix} on [t_min, t_max]: Mf(t) = (1 - e^{-(t - t_min)}) e^{ix}
    g = TorusGrid(1, 16)
    edges, _, _ = log_time_grid(1 / 64, 8.0)
    times = solver_times(edges, 4, t0=0.0)
    a = rough_coefficient(g, times, edges, 0, False, time_amplitude=0.0, space_amplitude=0.0)
    f = TentField.from_function(g, edges, lambda t: plane_wave(g, [1]).values)
    ratio, _ = tent_maxreg_experiment(a, f, 2.0, 0.0)
    mids = f.times
    num = np.sum((1 - np.exp(-(mids - edges[0]))) ** 2 * mids**-2 * f.dlog)
    den = np.sum(f.dlog)
    assert ratio == pytest.approx(math.sqrt(num / den), rel=0.02)

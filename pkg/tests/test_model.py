import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from d2d_underlay import model
from d2d_underlay.model import (
    FadingModel,
    Geometry,
    NetworkParams,
    fairness_delta,
    generate_instance,
    joint_fairness_delta,
    joint_fairness_delta_expanded,
    quantile,
    rate_cu_shared,
    rate_d2d_shared,
    rate_gain_v,
    solo_rates,
    total_rate,
)
from d2d_underlay.oracle import bisect_quantile, fading_cdf

from conftest import GEOMETRY


def test_params_validation():
    NetworkParams()
    for bad in (dict(epsilon=0.0), dict(epsilon=1.0), dict(gamma=-1), dict(n_pairs=0),
                dict(p_d_max=0), dict(noise=0), dict(eta_d_min=0)):
        with pytest.raises(ValueError):
            NetworkParams(**bad)


def test_params_spectrum_helpers():
    p = NetworkParams(n_channels_ul=3, n_channels_dl=4, p_c_max_ul=1, p_c_max_dl=10)
    assert p.n_channels("ul") == 3 and p.n_channels("dl") == 4
    assert p.p_c_max("dl") == 10
    assert p.replace(epsilon=0.3).epsilon == 0.3


# --- fading -----------------------------------------------------------------------

def test_exponential_quantile_value():
    assert quantile(FadingModel("exponential", 0.2), 0.9) == pytest.approx(0.2 * math.log(10), abs=1e-12)
    assert 0.2 * math.log(10) == pytest.approx(0.46052, abs=1e-5)


def test_exponential_quantile_matches_bisection():
    for q in np.linspace(0.01, 0.99, 25):
        ref = bisect_quantile("exponential", 0.2, 0.04, q)
        assert quantile(FadingModel("exponential", 0.2), q) == pytest.approx(ref, abs=1e-9)


@pytest.mark.parametrize("kind", ["gaussian", "chi_squared", "log_normal"])
def test_quantiles_match_bisection(kind):
    f = FadingModel(kind, 0.2, 0.01)
    for q in (0.05, 0.3, 0.5, 0.9, 0.99):
        assert f.quantile(q) == pytest.approx(bisect_quantile(kind, 0.2, 0.01, q), rel=1e-9)


def test_gaussian_median_is_mean():
    assert FadingModel("gaussian", 0.2, 0.01).quantile(0.5) == pytest.approx(0.2, abs=1e-12)


def test_gaussian_quantile_clamped_at_zero():
    f = FadingModel("gaussian", 0.1, 1.0)
    assert f.quantile(0.01) == 0.0


def test_lognormal_quantile_against_empirical():
    f = FadingModel("log_normal", 0.2, 0.01)
    rng = np.random.default_rng(0)
    emp = np.quantile(f.sample(rng, 10_000_000), 0.95)
    assert f.quantile(0.95) == pytest.approx(emp, rel=5e-3)  # 3 significant digits


def test_quantile_domain():
    f = FadingModel("exponential", 0.2)
    for q in (0.0, 1.0, -0.1, 1.5):
        with pytest.raises(ValueError):
            f.quantile(q)


@settings(max_examples=1000, deadline=None)
@given(kind=st.sampled_from(["exponential", "gaussian", "chi_squared", "log_normal"]),
       mean=st.floats(0.01, 5.0), cv=st.floats(0.05, 2.0),
       q1=st.floats(0.001, 0.999), q2=st.floats(0.001, 0.999))
def test_quantile_monotone(kind, mean, cv, q1, q2):
    f = FadingModel(kind, mean, None if kind == "exponential" else (cv * mean) ** 2)
    lo, hi = sorted((q1, q2))
    assert f.quantile(lo) <= f.quantile(hi) + 1e-15
    assert f.quantile(lo) >= 0


@pytest.mark.parametrize("kind", ["exponential", "gaussian", "chi_squared", "log_normal"])
def test_sample_moments(kind):
    f = FadingModel(kind, 0.5, None if kind == "exponential" else 0.04)
    x = f.sample(np.random.default_rng(1), 400_000)
    assert x.min() >= 0
    if kind != "gaussian":  # truncation shifts the gaussian moments slightly
        assert x.mean() == pytest.approx(0.5, rel=1e-2)
        assert x.var() == pytest.approx(f.var, rel=3e-2)


def test_sample_cdf_agrees_with_independent_cdf():
    f = FadingModel("chi_squared", 0.3, 0.02)
    x = f.sample(np.random.default_rng(2), 200_000)
    for t in (0.1, 0.3, 0.5):
        assert np.mean(x <= t) == pytest.approx(fading_cdf("chi_squared", 0.3, 0.02, t), abs=5e-3)


def test_array_valued_model():
    f = FadingModel("gaussian", np.array([[0.1, 0.2], [0.3, 0.4]]), 0.01)
    assert f.shape == (2, 2)
    assert f.at(1, 0).mean == pytest.approx(0.3)
    assert f.transpose().mean[0, 1] == pytest.approx(0.3)
    assert f.quantile(0.9).shape == (2, 2)
    assert f.sample(np.random.default_rng(0), 5).shape == (5, 2, 2)


def test_fading_validation():
    with pytest.raises(ValueError):
        FadingModel("rayleighish", 1.0)
    with pytest.raises(ValueError):
        FadingModel("gaussian", 1.0)
    with pytest.raises(ValueError):
        FadingModel("exponential", 0.0)


def test_deterministic_point_mass():
    f = FadingModel("deterministic", 0.3)
    assert f.quantile(0.01) == f.quantile(0.99) == pytest.approx(0.3)
    assert np.all(f.sample(np.random.default_rng(0), 4) == 0.3)


# --- geometry / instances ------------------------------------------------------

def test_generate_instance_deterministic():
    a = generate_instance(7, GEOMETRY, NetworkParams())
    b = generate_instance(7, GEOMETRY, NetworkParams())
    for name in ("g_c_ul", "g_c_dl", "g_d", "h_d_ul", "h_c_dl"):
        assert np.array_equal(getattr(a, name), getattr(b, name))
    assert np.array_equal(a.h_c_ul_model.mean, b.h_c_ul_model.mean)
    c = generate_instance(8, GEOMETRY, NetworkParams())
    assert not np.array_equal(a.g_d, c.g_d)


def test_generate_instance_shapes_and_gains():
    p = NetworkParams(n_channels_ul=4, n_channels_dl=5, n_pairs=3)
    inst = generate_instance(0, Geometry(), p, "gaussian")
    assert inst.g_c_ul.shape == (4,) and inst.g_c_dl.shape == (5,) and inst.g_d.shape == (3,)
    assert inst.h_c_ul_model.shape == (4, 3) and inst.h_d_dl_model.shape == (3, 5)
    for g in (inst.g_c_ul, inst.g_c_dl, inst.g_d, inst.h_d_ul, inst.h_c_dl):
        assert np.all(g > 0)
    # 5 m links against a 500 m cell: direct D2D gains dwarf the cross gains
    assert np.median(inst.g_d) > 100 * np.median(inst.h_d_dl_model.mean)


def test_positions_inside_cell():
    inst = generate_instance(3, Geometry(), NetworkParams(n_pairs=50))
    pos = inst.positions
    assert np.all(np.linalg.norm(pos["d2d_tx"], axis=1) <= 500)
    assert np.all(np.linalg.norm(pos["d2d_rx"] - pos["d2d_tx"], axis=1) <= 5)


def test_path_gain_clamp():
    g = Geometry(min_distance_m=1.0, reference_gain=2.0, pathloss_exponent=3.0)
    assert g.path_gain(0.0) == g.path_gain(0.5) == pytest.approx(2.0)
    assert g.path_gain(2.0) == pytest.approx(2.0 / 8)


def test_with_params_keeps_gains():
    inst = generate_instance(0, GEOMETRY, NetworkParams())
    other = inst.with_params(epsilon=0.3)
    assert other.params.epsilon == 0.3 and np.array_equal(other.g_d, inst.g_d)


# --- rates -------------------------------------------------------------------------

def test_shared_rates():
    assert rate_cu_shared(1, 0, 1, 0.5, 1) == pytest.approx(1.0)
    assert rate_cu_shared(0, 1, 1, 0.5, 1) == 0.0
    assert rate_cu_shared(3, 2, 1, 0.5, 1) == pytest.approx(math.log2(2.5))
    assert rate_cu_shared(3, 2, 1, 0.5, 1) == pytest.approx(1.3219, abs=1e-4)
    assert rate_d2d_shared(2, 1, 1, 1, 1) == pytest.approx(1.0)


def test_rate_gain_zero_when_d2d_silent():
    inst = generate_instance(0, GEOMETRY, NetworkParams())
    p = inst.params
    v = rate_gain_v(2, 3, p.p_c_max_dl, 0.0, inst, "dl", inst.h_d_dl_model.mean[3, 2])
    assert v == pytest.approx(0.0, abs=1e-12)


def test_rate_gain_recomputed_from_rates():
    inst = generate_instance(1, GEOMETRY, NetworkParams())
    p = inst.params
    h = inst.h_c_ul_model.mean[1, 2]
    v = rate_gain_v(1, 2, 0.4, 0.2, inst, "ul", h)
    ref = (math.log2(1 + 0.4 * inst.g_c_ul[1] / (p.noise + 0.2 * inst.h_d_ul[2]))
           + math.log2(1 + 0.2 * inst.g_d[2] / (p.noise + 0.4 * h))
           - math.log2(1 + p.p_c_max_ul * inst.g_c_ul[1] / p.noise))
    assert v == pytest.approx(ref, rel=1e-12)


def test_rate_gain_negative_under_strong_interference():
    inst = generate_instance(2, GEOMETRY, NetworkParams())
    inst = dataclasses.replace(inst, g_d=inst.g_d * 1e-9)  # a weak D2D link
    v = rate_gain_v(0, 0, inst.params.p_c_max_dl, inst.params.p_d_max, inst, "dl", 1e6)
    assert v < 0


def test_total_rate():
    inst = generate_instance(0, GEOMETRY, NetworkParams(n_channels_dl=3, n_pairs=2))
    v = np.array([[1.0, -np.inf], [0.5, 2.0], [-1.0, 3.0]])
    base = solo_rates(inst, "dl").sum()
    assert total_rate(np.zeros((3, 2)), v, inst, "dl") == base
    b = np.zeros((3, 2))
    b[0, 0] = 1
    assert total_rate(b, v, inst, "dl") == pytest.approx(base + 1.0)
    b[2, 1] = 1
    brute = base + sum(v[i, j] for i in range(3) for j in range(2) if b[i, j])
    assert total_rate(b, v, inst, "dl") == pytest.approx(brute)


# --- fairness ----------------------------------------------------------------------

def test_fairness_examples():
    fair = np.array([[1, 0], [1, 0], [0, 1], [0, 1]])
    assert fairness_delta(fair) == 0.0
    skewed = np.array([[1, 0]] * 4)
    assert fairness_delta(skewed) == pytest.approx(1.0)
    assert fairness_delta(np.full((4, 2), 0.5)) == pytest.approx(0.0)


def test_joint_fairness_examples():
    b = np.array([[1, 0], [1, 0]])
    assert joint_fairness_delta(b, b) == pytest.approx(1.0)
    assert joint_fairness_delta(np.array([[1, 0], [0, 1]]), np.array([[0, 1], [1, 0]])) == 0.0


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_fairness_nonnegative_and_zero_iff_balanced(seed):
    rng = np.random.default_rng(seed)
    n_d = int(rng.integers(1, 5))
    n_c = n_d * int(rng.integers(1, 4))
    b = np.zeros((n_c, n_d))
    b[np.arange(n_c), rng.integers(0, n_d, n_c)] = 1
    d = fairness_delta(b)
    assert d >= 0
    assert (abs(d) < 1e-12) == bool(np.all(b.sum(axis=0) == n_c / n_d))


def _random_exclusive(rng, n_u, n_d_ch, n_pairs):
    side = rng.integers(0, 2, n_pairs)
    b_ul, b_dl = np.zeros((n_u, n_pairs)), np.zeros((n_d_ch, n_pairs))
    for b, s in ((b_ul, 0), (b_dl, 1)):
        pairs = np.flatnonzero(side == s)
        for i in range(b.shape[0]):
            if len(pairs) and rng.random() < 0.8:
                b[i, rng.choice(pairs)] = 1
    return b_ul, b_dl


def test_joint_fairness_expanded_form_on_exclusive_assignments():
    rng = np.random.default_rng(0)
    for _ in range(100):
        b_ul, b_dl = _random_exclusive(rng, int(rng.integers(1, 6)), int(rng.integers(1, 6)), int(rng.integers(1, 5)))
        assert joint_fairness_delta_expanded(b_ul, b_dl) == pytest.approx(joint_fairness_delta(b_ul, b_dl), abs=1e-10)


def test_joint_fairness_expanded_form_drops_cross_terms():
    # a pair active in both spectra: the expanded form misses 2 m_ul m_dl / (m0^2 N_D)
    b_ul = np.array([[1.0, 0.0]])
    b_dl = np.array([[1.0, 0.0]])
    direct = joint_fairness_delta(b_ul, b_dl)
    expanded = joint_fairness_delta_expanded(b_ul, b_dl)
    assert direct - expanded == pytest.approx(2 * 1 * 1 / (1.0**2 * 2))


def test_allocation_result_helpers():
    z = np.zeros((2, 2))
    res = model.AllocationResult("PCSI", np.array([[1.0, 0], [0, 0]]), z, np.array([[0.3, 0], [0, 0]]), z, z, z,
                                 z, z, 1.0, 2.0, 0.0)
    assert res.total_rate == 3.0
    assert np.allclose(res.cu_powers("ul", 1.0), [0.3, 1.0])

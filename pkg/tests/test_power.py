import math

import numpy as np
import pytest

from d2d_underlay import oracle
from d2d_underlay.model import FadingModel
from d2d_underlay.power import (
    FPState,
    PowerSubproblem,
    border_vertices,
    feasible_intervals,
    fp_iterate,
    fp_state,
    mrm_objective_f0,
    solve_power_erm,
    solve_power_mrm,
    solve_power_pcsi,
    stationarity_residual,
)

from conftest import feasible_subproblems, rand_subproblem

STATIONARITY_TOL = 1e-6


def _sub(**kw):
    base = dict(g_c=1.0, g_d=1.0, h_cu_to_d2d=0.1, h_d2d_to_cu=0.1, noise=0.1, p_c_max=1.0, p_d_max=1.0,
                eta_c_min=1.0, eta_d_min=1.0)
    base.update(kw)
    return PowerSubproblem(**base)


def _sinrs(p_c, p_d, sub, h_random=None):
    h_dc, h_cd = sub.h_d2d_to_cu, sub.h_cu_to_d2d
    if h_random is not None:
        if sub.random_link == "cu":
            h_dc = h_random
        else:
            h_cd = h_random
    return p_c * sub.g_c / (sub.noise + p_d * h_dc), p_d * sub.g_d / (sub.noise + p_c * h_cd)


def test_subproblem_validation():
    with pytest.raises(ValueError):
        _sub(p_c_max=0.0)
    with pytest.raises(ValueError):
        _sub(eta_c_min=0.0)
    with pytest.raises(ValueError):
        _sub(random_link="bs")


# --- PCSI ---------------------------------------------------------------------------

def test_pcsi_no_interference_takes_corner():
    sol = solve_power_pcsi(_sub(h_cu_to_d2d=0.0, h_d2d_to_cu=0.0, p_c_max=2.0, p_d_max=0.7))
    assert sol.feasible
    assert (float(sol.p_c), float(sol.p_d)) == pytest.approx((2.0, 0.7))


def test_pcsi_unreachable_cu_floor_is_infeasible():
    sol = solve_power_pcsi(_sub(g_c=0.01, eta_c_min=1.0))  # 1*0.01/0.1 < 1
    assert not sol.feasible
    assert sol.utility == -np.inf


def test_border_vertices_count():
    pcs, pds = border_vertices(_sub())
    assert pcs.shape == pds.shape == (15,)


def test_pcsi_matches_grid_oracle():
    for sub, _ in feasible_subproblems(20, seed=11, need_erm=False):
        sol = solve_power_pcsi(sub)
        grid = oracle.grid_search_power(sub, "v", 500)
        assert float(sol.utility) >= grid.value - 1e-6


def test_pcsi_infeasible_verdict_matches_grid():
    rng = np.random.default_rng(5)
    for _ in range(40):
        sub = rand_subproblem(rng)
        sol = solve_power_pcsi(sub)
        grid = oracle.grid_search_power(sub, "v", 300)
        if grid.feasible:
            assert sol.feasible
        if not sol.feasible:
            assert not grid.feasible


def test_pcsi_solution_satisfies_constraints():
    rng = np.random.default_rng(3)
    for _ in range(200):
        sub = rand_subproblem(rng)
        sol = solve_power_pcsi(sub)
        if not sol.feasible:
            continue
        sc, sd = _sinrs(float(sol.p_c), float(sol.p_d), sub)
        assert sc >= sub.eta_c_min * (1 - 1e-9) and sd >= sub.eta_d_min * (1 - 1e-9)
        assert 0 <= sol.p_c <= sub.p_c_max * (1 + 1e-12) and 0 <= sol.p_d <= sub.p_d_max * (1 + 1e-12)


def test_pcsi_vectorised_equals_scalar():
    rng = np.random.default_rng(4)
    subs = [rand_subproblem(rng) for _ in range(6)]
    stack = lambda name: np.array([getattr(s, name) for s in subs]).reshape(2, 3)
    big = PowerSubproblem(g_c=stack("g_c"), g_d=stack("g_d"), h_cu_to_d2d=stack("h_cu_to_d2d"),
                          h_d2d_to_cu=stack("h_d2d_to_cu"), noise=0.1, p_c_max=1.0, p_d_max=1.0,
                          eta_c_min=1.0, eta_d_min=1.0)
    sol = solve_power_pcsi(big)
    for k, s in enumerate(subs):
        one = solve_power_pcsi(PowerSubproblem(g_c=s.g_c, g_d=s.g_d, h_cu_to_d2d=s.h_cu_to_d2d,
                                               h_d2d_to_cu=s.h_d2d_to_cu, noise=0.1, p_c_max=1.0, p_d_max=1.0,
                                               eta_c_min=1.0, eta_d_min=1.0))
        assert sol.utility.reshape(-1)[k] == pytest.approx(float(one.utility)) or (
            not one.feasible and sol.utility.reshape(-1)[k] == -np.inf)


# --- ERM ----------------------------------------------------------------------------

def test_erm_reduces_to_pcsi_under_point_mass():
    rng = np.random.default_rng(8)
    for _ in range(30):
        sub = rand_subproblem(rng, "cu")
        erm = solve_power_erm(sub, FadingModel("deterministic", sub.h_d2d_to_cu), 0.1)
        pcsi = solve_power_pcsi(sub)
        assert erm.feasible == pcsi.feasible
        if pcsi.feasible:
            assert float(erm.utility) == pytest.approx(float(pcsi.utility), abs=1e-12)


def test_erm_constraint_uses_quantile_objective_uses_mean():
    sub = _sub(h_d2d_to_cu=0.2, p_d_max=20.0, eta_d_min=0.5)
    fad = FadingModel("exponential", 0.2)
    sol = solve_power_erm(sub, fad, 0.1)
    q = 0.2 * math.log(10)
    sc, _ = _sinrs(float(sol.p_c), float(sol.p_d), sub, h_random=q)
    assert sc == pytest.approx(sub.eta_c_min, rel=1e-9)  # the robust CU floor binds
    mean_rate = (math.log2(1 + sol.p_c * 1.0 / (0.1 + sol.p_d * 0.2))
                 + math.log2(1 + sol.p_d * 1.0 / (0.1 + sol.p_c * 0.1)) - math.log2(1 + 1.0 / 0.1))
    assert float(sol.utility) == pytest.approx(mean_rate, rel=1e-12)


def test_erm_matches_grid_oracle():
    for sub, fad in feasible_subproblems(20, seed=12):
        sol = solve_power_erm(sub, fad, 0.1)
        grid = oracle.grid_search_power(sub, "erm", 500, fad, 0.1)
        assert float(sol.utility) >= grid.value - 1e-6


def test_erm_never_beats_pcsi():
    for sub, fad in feasible_subproblems(30, seed=13):
        assert float(solve_power_erm(sub, fad, 0.1).utility) <= float(solve_power_pcsi(sub).utility) + 1e-12


# --- MRM ----------------------------------------------------------------------------

def test_f0_examples():
    sub = _sub(h_d2d_to_cu=0.3)
    fad = FadingModel("exponential", 0.3)
    assert mrm_objective_f0(0.0, 0.0, sub, fad, 0.1) == 0.0
    assert mrm_objective_f0(0.7, 0.0, sub, fad, 0.1) == pytest.approx(math.log2(1 + 0.7 / 0.1))
    q = -0.3 * math.log(0.1)
    ref = math.log2(1 + 0.5 / (0.1 + 0.4 * q)) + math.log2(1 + 0.4 / (0.1 + 0.5 * 0.1))
    assert mrm_objective_f0(0.5, 0.4, sub, fad, 0.1) == pytest.approx(ref, rel=1e-13)


def test_fp_auxiliary_example():
    sub = _sub(g_c=2.0, noise=1.0, h_d2d_to_cu=1.0, p_c_max=2.0, p_d_max=2.0, eta_c_min=0.1, eta_d_min=0.1)
    fad = FadingModel("deterministic", 1.0)
    new = fp_iterate(fp_state(1.0, 1.0, sub, fad, 0.1), sub, fad, 0.1)
    assert float(new.z1) == pytest.approx(1.0)
    assert new.z1 >= 0 and new.z2 >= 0 and new.y1 >= 0 and new.y2 >= 0


def test_fp_fixed_point_is_stable():
    for sub, fad in feasible_subproblems(10, seed=21):
        sol = solve_power_mrm(sub, fad, 0.1, tol=1e-12)
        state = fp_state(sol.p_c, sol.p_d, sub, fad, 0.1)
        again = fp_iterate(state, sub, fad, 0.1)
        assert float(again.p_c) == pytest.approx(float(sol.p_c), abs=1e-9)
        assert float(again.p_d) == pytest.approx(float(sol.p_d), abs=1e-9)


def _random_feasible_start(sub, fad, eps, rng):
    eff = sub.with_random_gain(fad.quantile(1 - eps))
    for _ in range(10_000):
        p_c, p_d = rng.uniform(0, sub.p_c_max), rng.uniform(0, sub.p_d_max)
        sc, sd = _sinrs(p_c, p_d, eff)
        if sc >= sub.eta_c_min and sd >= sub.eta_d_min:
            return p_c, p_d
    return None


def test_fp_monotone_and_feasible_from_random_starts():
    rng = np.random.default_rng(0)
    checked = 0
    for sub, fad in feasible_subproblems(20, seed=22):
        start = _random_feasible_start(sub, fad, 0.1, rng)
        if start is None:
            continue
        checked += 1
        eff = sub.with_random_gain(fad.quantile(0.9))
        state = fp_state(*start, sub, fad, 0.1)
        prev = float(mrm_objective_f0(state.p_c, state.p_d, sub, fad, 0.1))
        for _ in range(200):
            state = fp_iterate(state, sub, fad, 0.1)
            f0 = float(state.objective_f0)
            assert f0 >= prev - 1e-9
            prev = f0
            sc, sd = _sinrs(float(state.p_c), float(state.p_d), eff)
            assert sc >= sub.eta_c_min * (1 - 1e-9) and sd >= sub.eta_d_min * (1 - 1e-9)
            assert -1e-12 <= state.p_c <= sub.p_c_max * (1 + 1e-12)
    assert checked >= 10


def test_mrm_no_interference_reaches_corner():
    sub = _sub(h_cu_to_d2d=0.0, h_d2d_to_cu=0.5, p_c_max=1.5, p_d_max=0.8)
    sol = solve_power_mrm(sub, FadingModel("deterministic", 1e-300), 0.1)
    assert (float(sol.p_c), float(sol.p_d)) == pytest.approx((1.5, 0.8), abs=1e-6)


def test_mrm_infeasible():
    sol = solve_power_mrm(_sub(g_c=0.01), FadingModel("exponential", 0.1), 0.1)
    assert not sol.feasible and sol.utility == -np.inf


def test_mrm_tol_must_be_positive():
    with pytest.raises(ValueError):
        solve_power_mrm(_sub(), FadingModel("exponential", 0.1), 0.1, tol=0)


def test_mrm_stationarity_residual_small():
    for sub, fad in feasible_subproblems(30, seed=23):
        sol = solve_power_mrm(sub, fad, 0.1)
        assert float(stationarity_residual(sol.p_c, sol.p_d, sub, fad, 0.1)) < STATIONARITY_TOL


def test_mrm_custom_init_and_history():
    sub, fad = feasible_subproblems(1, seed=24)[0]
    start = _random_feasible_start(sub, fad, 0.1, np.random.default_rng(1))
    sol = solve_power_mrm(sub, fad, 0.1, init=start, record=True)
    hist = np.array([float(h) for h in sol.history])
    assert np.all(np.diff(hist) >= -1e-9)
    assert sol.iterations >= 1


def test_mrm_utility_below_erm_and_pcsi():
    for sub, fad in feasible_subproblems(30, seed=25):
        mrm = float(solve_power_mrm(sub, fad, 0.1).utility)
        assert mrm <= float(solve_power_erm(sub, fad, 0.1).utility) + 1e-9


def test_feasible_intervals_contain_solution():
    for sub, fad in feasible_subproblems(10, seed=26):
        sol = solve_power_mrm(sub, fad, 0.1)
        eff = sub.with_random_gain(fad.quantile(0.9))
        lo_c, hi_c, lo_d, hi_d = feasible_intervals(sol.p_c, sol.p_d, eff)
        assert lo_c - 1e-9 <= sol.p_c <= hi_c + 1e-9
        assert lo_d - 1e-9 <= sol.p_d <= hi_d + 1e-9


def test_fpstate_fields():
    s = fp_state(0.5, 0.5, _sub(), FadingModel("exponential", 0.1), 0.1)
    assert isinstance(s, FPState) and s.clamped is None

"""Power allocation for one (channel, pair) sharing decision.

Every solver works elementwise on arrays, so a whole spectrum worth of
subproblems (shape ``(N_C, N_D)``) is solved in one call.

The subproblem has two links sharing a channel: the cellular link (power
``p_c``, direct gain ``g_c``, interference gain ``h_d2d_to_cu`` from the
D2D transmitter) and the D2D link (``p_d``, ``g_d``, ``h_cu_to_d2d``). One
of the two interference gains is random; ``random_link`` names the
receiver that sees it ("cu" in the downlink, "d2d" in the uplink).
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .model import FadingModel

INFEASIBLE = -np.inf
_LN2 = np.log(2.0)
_SLACK = 1e-12


@dataclass(frozen=True, eq=False)
class PowerSubproblem:
    g_c: np.ndarray
    g_d: np.ndarray
    h_cu_to_d2d: np.ndarray
    h_d2d_to_cu: np.ndarray
    noise: float
    p_c_max: float
    p_d_max: float
    eta_c_min: float
    eta_d_min: float
    random_link: str = "cu"

    def __post_init__(self):
        if self.random_link not in ("cu", "d2d"):
            raise ValueError("random_link must be 'cu' or 'd2d'")
        for name in ("g_c", "g_d", "h_cu_to_d2d", "h_d2d_to_cu"):
            arr = np.asarray(getattr(self, name), dtype=float)
            if np.any(arr < 0):
                raise ValueError(f"{name} must be nonnegative")
            object.__setattr__(self, name, arr)
        if not (np.all(np.asarray(self.p_c_max) > 0) and np.all(np.asarray(self.p_d_max) > 0)):
            raise ValueError("power caps must be > 0")
        if not (np.all(np.asarray(self.eta_c_min) > 0) and np.all(np.asarray(self.eta_d_min) > 0)):
            raise ValueError("SINR floors must be > 0")
        if not np.all(np.asarray(self.noise) > 0):
            raise ValueError("noise must be > 0")

    @property
    def shape(self):
        return np.broadcast(self.g_c, self.g_d, self.h_cu_to_d2d, self.h_d2d_to_cu).shape

    @property
    def random_gain(self) -> np.ndarray:
        return self.h_d2d_to_cu if self.random_link == "cu" else self.h_cu_to_d2d

    def with_random_gain(self, gain) -> "PowerSubproblem":
        name = "h_d2d_to_cu" if self.random_link == "cu" else "h_cu_to_d2d"
        return dataclasses.replace(self, **{name: np.asarray(gain, dtype=float)})

    def solo_rate(self) -> np.ndarray:
        return np.log2(1.0 + self.p_c_max * self.g_c / self.noise)


@dataclass(eq=False)
class PowerSolution:
    p_c: np.ndarray
    p_d: np.ndarray
    utility: np.ndarray
    feasible: np.ndarray
    iterations: int = 0
    clamped: Optional[np.ndarray] = None
    history: Optional[list] = None


@dataclass(eq=False)
class FPState:
    z1: np.ndarray
    z2: np.ndarray
    y1: np.ndarray
    y2: np.ndarray
    p_c: np.ndarray
    p_d: np.ndarray
    objective_f0: np.ndarray
    clamped: Optional[np.ndarray] = None


def _sum_rate(p_c, p_d, sub: PowerSubproblem):
    sinr_c = p_c * sub.g_c / (sub.noise + p_d * sub.h_d2d_to_cu)
    sinr_d = p_d * sub.g_d / (sub.noise + p_c * sub.h_cu_to_d2d)
    return np.log2(1.0 + sinr_c) + np.log2(1.0 + sinr_d)


def _is_feasible(p_c, p_d, sub: PowerSubproblem, slack=_SLACK):
    box = (p_c >= -slack) & (p_c <= sub.p_c_max * (1 + slack)) & (p_d >= -slack) & (p_d <= sub.p_d_max * (1 + slack))
    need_c = sub.eta_c_min * (sub.noise + p_d * sub.h_d2d_to_cu)
    need_d = sub.eta_d_min * (sub.noise + p_c * sub.h_cu_to_d2d)
    return box & (p_c * sub.g_c >= need_c * (1 - slack)) & (p_d * sub.g_d >= need_d * (1 - slack))


def border_vertices(sub: PowerSubproblem):
    """All pairwise intersections of the six border lines of the feasible set.

    Lines are written as ``a*p_c + b*p_d = c``: the two axes, the two power
    caps and the two SINR floors (with the interference gains stored in
    ``sub``). Returns candidate arrays of shape ``(15,) + sub.shape``; pairs
    of parallel lines yield NaN.
    """
    shape = sub.shape
    one, zero = np.ones(shape), np.zeros(shape)
    lines = [
        (one, zero, zero),
        (one, zero, sub.p_c_max * one),
        (zero, one, zero),
        (zero, one, sub.p_d_max * one),
        (sub.g_c * one, -sub.eta_c_min * sub.h_d2d_to_cu * one, sub.eta_c_min * sub.noise * one),
        (-sub.eta_d_min * sub.h_cu_to_d2d * one, sub.g_d * one, sub.eta_d_min * sub.noise * one),
    ]
    pcs, pds = [], []
    with np.errstate(divide="ignore", invalid="ignore"):
        for k in range(len(lines)):
            a1, b1, c1 = lines[k]
            for m in range(k + 1, len(lines)):
                a2, b2, c2 = lines[m]
                det = a1 * b2 - a2 * b1
                ok = np.abs(det) > 1e-300
                pcs.append(np.where(ok, (c1 * b2 - c2 * b1) / det, np.nan))
                pds.append(np.where(ok, (a1 * c2 - a2 * c1) / det, np.nan))
    return np.stack(pcs), np.stack(pds)


def _vertex_solve(constraint: PowerSubproblem, objective: PowerSubproblem) -> PowerSolution:
    """Best feasible border vertex of ``constraint`` under ``objective``'s rates."""
    pcs, pds = border_vertices(constraint)
    ok = np.isfinite(pcs) & np.isfinite(pds) & _is_feasible(pcs, pds, constraint)
    pcs = np.clip(np.nan_to_num(pcs), 0.0, constraint.p_c_max)
    pds = np.clip(np.nan_to_num(pds), 0.0, constraint.p_d_max)
    with np.errstate(divide="ignore", invalid="ignore"):
        vals = np.where(ok, _sum_rate(pcs, pds, objective), -np.inf)
    best = np.argmax(vals, axis=0)
    take = lambda a: np.take_along_axis(a, best[None], axis=0)[0]
    feasible = ok.any(axis=0)
    p_c = np.where(feasible, take(pcs), 0.0)
    p_d = np.where(feasible, take(pds), 0.0)
    utility = np.where(feasible, take(vals) - objective.solo_rate(), INFEASIBLE)
    return PowerSolution(p_c=p_c, p_d=p_d, utility=utility, feasible=feasible)


def solve_power_pcsi(sub: PowerSubproblem) -> PowerSolution:
    """Closed-form optimum of the rate gain with known interference gains.

    The maximiser sits on an intersection of the power caps and SINR
    floors, so enumerating the (at most 15) border vertices is exact.
    Infeasible subproblems get ``utility = -inf``.
    """
    return _vertex_solve(sub, sub)


def solve_power_erm(sub: PowerSubproblem, fading: FadingModel, epsilon: float) -> PowerSolution:
    """Expected-rate maximisation under an outage budget.

    Objective: rate gain with the random gain replaced by its mean (first
    order certainty equivalent). Constraint: the SINR floor with the random
    gain replaced by its (1 - epsilon) quantile.
    """
    con = sub.with_random_gain(fading.quantile(1.0 - epsilon))
    obj = sub.with_random_gain(fading.mean)
    return _vertex_solve(con, obj)


# --- minimum guaranteed rate (fractional programming) ------------------------

def mrm_objective_f0(p_c, p_d, sub: PowerSubproblem, fading: FadingModel, epsilon: float):
    """Sum of the (1 - epsilon)-guaranteed rates of both links, in bits."""
    return _sum_rate(p_c, p_d, sub.with_random_gain(fading.quantile(1.0 - epsilon)))


def feasible_intervals(p_c, p_d, sub: PowerSubproblem):
    """1-D feasible sets of each power with the other one held fixed.

    Returns ``(lo_c, hi_c, lo_d, hi_d)``; ``lo_c`` and ``hi_c`` bound
    ``p_c`` given ``p_d``, and vice versa. Empty sets show up as lo > hi.
    """
    with np.errstate(divide="ignore", invalid="ignore"):
        lo_c = sub.eta_c_min * (sub.noise + p_d * sub.h_d2d_to_cu) / sub.g_c
        cap_c = (sub.g_d * p_d / sub.eta_d_min - sub.noise) / sub.h_cu_to_d2d
        cap_c = np.where(sub.h_cu_to_d2d > 0, cap_c,
                         np.where(sub.g_d * p_d >= sub.eta_d_min * sub.noise, np.inf, -np.inf))
        hi_c = np.minimum(sub.p_c_max, cap_c)
        lo_d = sub.eta_d_min * (sub.noise + p_c * sub.h_cu_to_d2d) / sub.g_d
        cap_d = (sub.g_c * p_c / sub.eta_c_min - sub.noise) / sub.h_d2d_to_cu
        cap_d = np.where(sub.h_d2d_to_cu > 0, cap_d,
                         np.where(sub.g_c * p_c >= sub.eta_c_min * sub.noise, np.inf, -np.inf))
        hi_d = np.minimum(sub.p_d_max, cap_d)
    return np.maximum(lo_c, 0.0), hi_c, np.maximum(lo_d, 0.0), hi_d


def _project(x, lo, hi, fallback):
    empty = lo > hi
    return np.where(empty, fallback, np.clip(x, lo, np.maximum(lo, hi))), empty


def fp_state(p_c, p_d, sub: PowerSubproblem, fading: FadingModel, epsilon: float) -> FPState:
    """State holding only powers; auxiliaries are filled by the next sweep."""
    p_c = np.asarray(p_c, dtype=float) * np.ones(sub.shape)
    p_d = np.asarray(p_d, dtype=float) * np.ones(sub.shape)
    zero = np.zeros_like(p_c)
    return FPState(zero, zero, zero, zero, p_c, p_d, mrm_objective_f0(p_c, p_d, sub, fading, epsilon))


def fp_iterate(state: FPState, sub: PowerSubproblem, fading: FadingModel, epsilon: float) -> FPState:
    """One sweep of the quadratic-transform alternating maximisation.

    Order: slack SINRs z, quadratic-transform auxiliaries y, then p_c
    projected on its feasible interval at the old p_d, then p_d projected at
    the new p_c. Works in natural logs; the maximisers are the same as for
    the base-2 objective.
    """
    eff = sub.with_random_gain(fading.quantile(1.0 - epsilon))
    p_c, p_d = state.p_c, state.p_d
    n = eff.noise
    sig_c, den_c = p_c * eff.g_c, n + p_d * eff.h_d2d_to_cu
    sig_d, den_d = p_d * eff.g_d, n + p_c * eff.h_cu_to_d2d
    z1 = sig_c / den_c
    z2 = sig_d / den_d
    y1 = np.sqrt((1 + z1) * sig_c) / (sig_c + den_c)
    y2 = np.sqrt((1 + z2) * sig_d) / (sig_d + den_d)

    with np.errstate(divide="ignore", invalid="ignore"):
        target_c = y1**2 * (1 + z1) * eff.g_c / (y1**2 * eff.g_c + y2**2 * eff.h_cu_to_d2d) ** 2
    target_c = np.nan_to_num(target_c, nan=0.0, posinf=eff.p_c_max)
    lo_c, hi_c, _, _ = feasible_intervals(p_c, p_d, eff)
    new_c, empty_c = _project(target_c, lo_c, hi_c, p_c)

    with np.errstate(divide="ignore", invalid="ignore"):
        target_d = y2**2 * (1 + z2) * eff.g_d / (y2**2 * eff.g_d + y1**2 * eff.h_d2d_to_cu) ** 2
    target_d = np.nan_to_num(target_d, nan=0.0, posinf=eff.p_d_max)
    _, _, lo_d, hi_d = feasible_intervals(new_c, p_d, eff)
    new_d, empty_d = _project(target_d, lo_d, hi_d, p_d)

    clamped = empty_c | empty_d
    if state.clamped is not None:
        clamped = clamped | state.clamped
    return FPState(z1, z2, y1, y2, new_c, new_d, _sum_rate(new_c, new_d, eff), clamped)


def solve_power_mrm(sub: PowerSubproblem, fading: FadingModel, epsilon: float,
                    tol: float = 1e-8, max_iters: int = 10_000, init=None,
                    record: bool = False) -> PowerSolution:
    """Minimum-guaranteed-rate power allocation.

    Feasibility is checked on the border vertices with the (1 - epsilon)
    quantile gain. By default the iteration starts from the feasible vertex
    with the largest F_0; ``init=(p_c, p_d)`` overrides the start (it must
    be feasible). Iterates until the largest power change drops below
    ``tol`` or ``max_iters`` sweeps.
    """
    if tol <= 0:
        raise ValueError("tol must be > 0")
    eff = sub.with_random_gain(fading.quantile(1.0 - epsilon))
    start = _vertex_solve(eff, eff)
    feasible = start.feasible
    if init is None:
        p_c0, p_d0 = start.p_c, start.p_d
    else:
        p_c0 = np.where(feasible, np.asarray(init[0], dtype=float), 0.0)
        p_d0 = np.where(feasible, np.asarray(init[1], dtype=float), 0.0)
    state = fp_state(p_c0, p_d0, sub, fading, epsilon)
    history = [state.objective_f0.copy()] if record else None
    it = 0
    while it < max_iters:
        new = fp_iterate(state, sub, fading, epsilon)
        new.p_c = np.where(feasible, new.p_c, 0.0)
        new.p_d = np.where(feasible, new.p_d, 0.0)
        it += 1
        change = np.max(np.abs(np.concatenate([np.ravel(new.p_c - state.p_c), np.ravel(new.p_d - state.p_d)])),
                        initial=0.0)
        state = new
        if record:
            history.append(_sum_rate(state.p_c, state.p_d, eff))
        if change < tol:
            break
    f0 = _sum_rate(state.p_c, state.p_d, eff)
    utility = np.where(feasible, f0 - eff.solo_rate(), INFEASIBLE)
    clamped = None if state.clamped is None else state.clamped & feasible
    return PowerSolution(p_c=state.p_c, p_d=state.p_d, utility=utility, feasible=feasible,
                         iterations=it, clamped=clamped, history=history)


def f0_gradient(p_c, p_d, sub: PowerSubproblem):
    """Analytic gradient of the (base-2) sum rate of ``sub`` w.r.t. (p_c, p_d)."""
    den_c = sub.noise + p_d * sub.h_d2d_to_cu
    den_d = sub.noise + p_c * sub.h_cu_to_d2d
    s_c = p_c * sub.g_c / den_c
    s_d = p_d * sub.g_d / den_d
    d_pc = (sub.g_c / den_c) / (1 + s_c) - (s_d * sub.h_cu_to_d2d / den_d) / (1 + s_d)
    d_pd = (sub.g_d / den_d) / (1 + s_d) - (s_c * sub.h_d2d_to_cu / den_c) / (1 + s_c)
    return d_pc / _LN2, d_pd / _LN2


def stationarity_residual(p_c, p_d, sub: PowerSubproblem, fading: FadingModel, epsilon: float):
    """Blockwise projected-gradient residual of F_0 at (p_c, p_d).

    For each power, the distance moved by one unit gradient step projected
    back onto its feasible interval at the other power. Zero at a blockwise
    stationary point, which is where the alternating iteration settles.
    """
    eff = sub.with_random_gain(fading.quantile(1.0 - epsilon))
    d_pc, d_pd = f0_gradient(p_c, p_d, eff)
    lo_c, hi_c, lo_d, hi_d = feasible_intervals(p_c, p_d, eff)
    r_c = np.abs(p_c - np.clip(p_c + d_pc, lo_c, np.maximum(lo_c, hi_c)))
    r_d = np.abs(p_d - np.clip(p_d + d_pd, lo_d, np.maximum(lo_d, hi_d)))
    return np.maximum(r_c, r_d)

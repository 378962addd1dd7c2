"""End-to-end allocation pipelines.

Centralized pipelines solve every power subproblem at the BS, run the
relaxed assignment to convergence and round it. Decentralized pipelines run
synchronous rounds in which every D2D pair does one power step and one
gradient step on its own assignment column, and the BS projects the
assembled matrix and sends the columns back. Signalling is simulated
in-process and counted scalar by scalar.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import assign
from .assign import PGDConfig
from .model import (
    AllocationResult,
    FadingModel,
    NetworkInstance,
    fairness_delta,
    joint_fairness_delta,
    total_rate,
)
from .power import (
    PowerSolution,
    PowerSubproblem,
    _vertex_solve,
    fp_iterate,
    fp_state,
    solve_power_erm,
    solve_power_mrm,
    solve_power_pcsi,
)

log = logging.getLogger(__name__)

MODES = ("PCSI", "ERM", "MRM")


@dataclass(frozen=True)
class Partition:
    ul_pairs: tuple
    dl_pairs: tuple

    def __post_init__(self):
        ul, dl = tuple(int(j) for j in self.ul_pairs), tuple(int(j) for j in self.dl_pairs)
        if set(ul) & set(dl):
            raise ValueError("uplink and downlink pair sets must be disjoint")
        object.__setattr__(self, "ul_pairs", ul)
        object.__setattr__(self, "dl_pairs", dl)

    @classmethod
    def all_ul(cls, n_pairs):
        return cls(tuple(range(n_pairs)), ())

    @classmethod
    def all_dl(cls, n_pairs):
        return cls((), tuple(range(n_pairs)))

    @classmethod
    def half(cls, n_pairs):
        """First half (rounded up) in the downlink, the rest in the uplink."""
        k = (n_pairs + 1) // 2
        return cls(tuple(range(k, n_pairs)), tuple(range(k)))

    @classmethod
    def from_spec(cls, spec, n_pairs):
        if isinstance(spec, Partition):
            return spec
        if spec in ("all-ul", "all_ul"):
            return cls.all_ul(n_pairs)
        if spec in ("all-dl", "all_dl"):
            return cls.all_dl(n_pairs)
        if spec in ("half", "half-half"):
            return cls.half(n_pairs)
        if isinstance(spec, dict):
            return cls(tuple(spec.get("ul", ())), tuple(spec.get("dl", ())))
        raise ValueError(f"unknown partition {spec!r}")

    def validate(self, n_pairs, full=True):
        pairs = set(self.ul_pairs) | set(self.dl_pairs)
        if not pairs <= set(range(n_pairs)):
            raise ValueError("partition refers to unknown pairs")
        if full and pairs != set(range(n_pairs)):
            raise ValueError("separate allocation needs every pair in a group")


@dataclass
class MessageLog:
    """Scalars exchanged per round: pair->BS assignment and power, BS->pair assignment."""

    up_assignment: list = field(default_factory=list)
    up_power: list = field(default_factory=list)
    down_assignment: list = field(default_factory=list)
    initial_broadcast: int = 0

    @property
    def rounds(self) -> int:
        return len(self.up_assignment)

    def per_round(self, k):
        return self.up_assignment[k] + self.up_power[k] + self.down_assignment[k]

    @property
    def assignment_scalars(self) -> int:
        return sum(self.up_assignment) + sum(self.down_assignment)

    @property
    def total(self) -> int:
        return self.assignment_scalars + sum(self.up_power)


@dataclass(frozen=True)
class RunConfig:
    pgd: PGDConfig = PGDConfig()
    discretize: str = "random"
    n_samples: int = 32
    seed: int = 0
    fp_tol: float = 1e-8
    fp_max_iters: int = 10_000
    max_rounds: int = 5000
    b_tol: float = 1e-6
    power_tol: float = 1e-8
    patience: int = 3
    record_iterates: bool = False

    def __post_init__(self):
        if self.discretize not in ("max", "random"):
            raise ValueError("discretize must be 'max' or 'random'")


def subproblems(instance: NetworkInstance, spectrum: str):
    """All (channel, pair) power subproblems of one spectrum, plus the fading law.

    Downlink: the D2D->CU link is random. Uplink: the CU->D2D link is
    random. The random gain stored in the subproblem is its mean.
    """
    p = instance.params
    if spectrum == "dl":
        fading = instance.h_d_dl_model.transpose()
        sub = PowerSubproblem(
            g_c=instance.g_c_dl[:, None], g_d=instance.g_d[None, :],
            h_cu_to_d2d=instance.h_c_dl[None, :], h_d2d_to_cu=fading.mean,
            noise=p.noise, p_c_max=p.p_c_max_dl, p_d_max=p.p_d_max,
            eta_c_min=p.eta_c_min_dl, eta_d_min=p.eta_d_min, random_link="cu")
    elif spectrum == "ul":
        fading = instance.h_c_ul_model
        sub = PowerSubproblem(
            g_c=instance.g_c_ul[:, None], g_d=instance.g_d[None, :],
            h_cu_to_d2d=fading.mean, h_d2d_to_cu=instance.h_d_ul[None, :],
            noise=p.noise, p_c_max=p.p_c_max_ul, p_d_max=p.p_d_max,
            eta_c_min=p.eta_c_min_ul, eta_d_min=p.eta_d_min, random_link="d2d")
    else:
        raise ValueError(f"unknown spectrum {spectrum!r}")
    return sub, fading


def solve_powers(instance: NetworkInstance, spectrum: str, mode: str, cfg: RunConfig = RunConfig()) -> PowerSolution:
    """Solve every subproblem of a spectrum (MRM iterated to convergence)."""
    sub, fading = subproblems(instance, spectrum)
    eps = instance.params.epsilon
    if mode == "PCSI":
        return solve_power_pcsi(sub)
    if mode == "ERM":
        return solve_power_erm(sub, fading, eps)
    if mode == "MRM":
        return solve_power_mrm(sub, fading, eps, tol=cfg.fp_tol, max_iters=cfg.fp_max_iters)
    raise ValueError(f"unknown mode {mode!r}")


def utility_table(instance: NetworkInstance, mode: str, cfg: RunConfig = RunConfig()) -> assign.UtilityTable:
    return assign.UtilityTable(solve_powers(instance, "ul", mode, cfg).utility,
                               solve_powers(instance, "dl", mode, cfg).utility, mode)


def _round(relaxed, v, gamma, cfg: RunConfig):
    if cfg.discretize == "max":
        return assign.discretize_max(relaxed)
    return assign.discretize_random(relaxed, cfg.n_samples, v, gamma, seed=cfg.seed)


def _embed(sub_matrix, pairs, n_pairs):
    out = np.zeros((sub_matrix.shape[0], n_pairs))
    out[:, list(pairs)] = sub_matrix
    return out


def _separate_fairness(b_ul, b_dl, partition: Partition):
    parts = []
    if partition.ul_pairs:
        parts.append(fairness_delta(b_ul[:, list(partition.ul_pairs)]))
    if partition.dl_pairs:
        parts.append(fairness_delta(b_dl[:, list(partition.dl_pairs)]))
    return float(np.mean(parts)) if parts else 0.0


def _result(instance, mode, b, sols, relaxed, fairness, iterations, messages=0, trace=None, iterates=None):
    res = AllocationResult(
        mode=mode, b_ul=b["ul"], b_dl=b["dl"],
        p_c_ul=sols["ul"].p_c, p_d_ul=sols["ul"].p_d, p_c_dl=sols["dl"].p_c, p_d_dl=sols["dl"].p_d,
        v_ul=sols["ul"].utility, v_dl=sols["dl"].utility,
        rate_ul=total_rate(b["ul"], sols["ul"].utility, instance, "ul"),
        rate_dl=total_rate(b["dl"], sols["dl"].utility, instance, "dl"),
        fairness_delta=fairness, iterations=iterations, messages_exchanged=messages,
        relaxed_ul=relaxed.get("ul"), relaxed_dl=relaxed.get("dl"),
        objective_trace=trace if trace is not None else [], iterates=iterates)
    return res


def run_centralized_separate(instance: NetworkInstance, partition: Partition, mode: str,
                             cfg: RunConfig = RunConfig(), single_channel: bool = False) -> AllocationResult:
    """Pairs are pre-split into UL and DL groups; each spectrum is solved on its own.

    With ``single_channel`` the relaxed assignment is replaced by a greedy
    matching that gives every pair at most one channel (baseline scheme).
    """
    p = instance.params
    partition.validate(p.n_pairs)
    sols = {s: solve_powers(instance, s, mode, cfg) for s in ("ul", "dl")}
    b, relaxed, trace, iters, iterates = {}, {}, [], 0, {}
    for s, pairs in (("ul", partition.ul_pairs), ("dl", partition.dl_pairs)):
        n_c = p.n_channels(s)
        if not pairs:
            b[s] = np.zeros((n_c, p.n_pairs))
            continue
        v = sols[s].utility[:, list(pairs)]
        if single_channel:
            b[s] = _embed(assign.single_channel_assign(v), pairs, p.n_pairs)
            continue
        hist, its = [], [] if cfg.record_iterates else None
        r = assign.pgd_assign(v, p.gamma, cfg.pgd, history=hist, iterates=its)
        trace.extend(hist)
        iters = max(iters, len(hist) - 1)
        iterates[s] = its
        relaxed[s] = _embed(r, pairs, p.n_pairs)
        b[s] = _embed(_round(r, v, p.gamma, cfg), pairs, p.n_pairs)
    return _result(instance, mode, b, sols, relaxed, _separate_fairness(b["ul"], b["dl"], partition),
                   iters, trace=trace, iterates=iterates or None)


def run_centralized_joint(instance: NetworkInstance, mode: str, cfg: RunConfig = RunConfig()) -> AllocationResult:
    """Every pair may use either spectrum; the split is part of the optimisation."""
    p = instance.params
    sols = {s: solve_powers(instance, s, mode, cfg) for s in ("ul", "dl")}
    v_ul, v_dl = sols["ul"].utility, sols["dl"].utility
    hist, its = [], [] if cfg.record_iterates else None
    r_ul, r_dl = assign.pgd_assign_joint(v_ul, v_dl, p.gamma, cfg.pgd, history=hist, iterates=its)
    b_ul, b_dl = _joint_finish(r_ul, r_dl, v_ul, v_dl, p.gamma, cfg)
    return _result(instance, mode, {"ul": b_ul, "dl": b_dl}, sols, {"ul": r_ul, "dl": r_dl},
                   joint_fairness_delta(b_ul, b_dl), len(hist) - 1, trace=hist,
                   iterates={"joint": its} if its is not None else None)


def _joint_finish(r_ul, r_dl, v_ul, v_dl, gamma, cfg, repeats=None):
    """Round the relaxed joint solution and enforce pair exclusivity.

    After the exclusivity projection the assignment is repeated with every
    pair removed from the spectrum it lost (PGD, rounding, projection
    again); a repeat is kept only if it raises the joint objective, and
    repeats stop once the spectrum choice is stable.
    """
    n_u = r_ul.shape[0]
    stacked = _round(np.vstack([r_ul, r_dl]), np.vstack([v_ul, v_dl]), gamma, cfg)
    b_ul, b_dl = assign.exclusivity_projection(stacked[:n_u], stacked[n_u:], v_ul, v_dl, gamma,
                                               relaxed=(r_ul, r_dl))
    best = assign.joint_objective(b_ul, b_dl, v_ul, v_dl, gamma)
    side = None
    for _ in range(v_ul.shape[1] if repeats is None else repeats):
        new_side = (b_ul.sum(axis=0) > 0, b_dl.sum(axis=0) > 0)
        if side is not None and all(np.array_equal(a, b) for a, b in zip(side, new_side)):
            break
        side = new_side
        m_ul = np.where(side[1][None, :], -np.inf, v_ul)
        m_dl = np.where(side[0][None, :], -np.inf, v_dl)
        q_ul, q_dl = assign.pgd_assign_joint(m_ul, m_dl, gamma, cfg.pgd)
        stacked = _round(np.vstack([q_ul, q_dl]), np.vstack([m_ul, m_dl]), gamma, cfg)
        c_ul, c_dl = assign.exclusivity_projection(stacked[:n_u], stacked[n_u:], m_ul, m_dl, gamma,
                                                   relaxed=(q_ul, q_dl))
        val = assign.joint_objective(c_ul, c_dl, v_ul, v_dl, gamma)
        if not val > best:
            break
        b_ul, b_dl, best = c_ul, c_dl, val
    return b_ul, b_dl


# --- decentralized -----------------------------------------------------------

class _PairPowers:
    """Power state of all pairs on one spectrum, advanced one step per round."""

    def __init__(self, instance, spectrum, mode, eps):
        self.sub, self.fading = subproblems(instance, spectrum)
        self.mode, self.eps = mode, eps
        self.sol: Optional[PowerSolution] = None
        if mode == "MRM":
            eff = self.sub.with_random_gain(self.fading.quantile(1.0 - eps))
            start = _vertex_solve(eff, eff)
            self.feasible = start.feasible
            self.state = fp_state(start.p_c, start.p_d, self.sub, self.fading, eps)

    def step(self):
        """Advance one round; returns the largest power change."""
        if self.mode in ("PCSI", "ERM"):
            if self.sol is not None:
                return 0.0
            self.sol = (solve_power_pcsi(self.sub) if self.mode == "PCSI"
                        else solve_power_erm(self.sub, self.fading, self.eps))
            return np.inf
        old = self.state
        new = fp_iterate(old, self.sub, self.fading, self.eps)
        new.p_c = np.where(self.feasible, new.p_c, 0.0)
        new.p_d = np.where(self.feasible, new.p_d, 0.0)
        self.state = new
        eff = self.sub.with_random_gain(self.fading.quantile(1.0 - self.eps))
        f0 = new.objective_f0
        utility = np.where(self.feasible, f0 - eff.solo_rate(), -np.inf)
        self.sol = PowerSolution(new.p_c, new.p_d, utility, self.feasible, clamped=new.clamped)
        return float(np.max(np.abs(np.concatenate([np.ravel(new.p_c - old.p_c), np.ravel(new.p_d - old.p_d)])),
                            initial=0.0))


def _decentralized(instance, blocks, mode, cfg: RunConfig):
    """Synchronous rounds over assignment blocks.

    Each block is ``(spectra, pairs)``: the rows of the listed spectra stacked
    on top of each other, restricted to the given pairs.
    """
    p = instance.params
    eps, gamma = p.epsilon, p.gamma
    needed = sorted({s for spectra, _ in blocks for s in spectra})
    powers = {s: _PairPowers(instance, s, mode, eps) for s in needed}
    log_ = MessageLog()
    state = []
    for spectra, pairs in blocks:
        n_rows = sum(p.n_channels(s) for s in spectra)
        n_pairs = len(pairs)
        step = (assign.auto_step(n_rows, n_pairs, gamma) if cfg.pgd.step_size == "auto"
                else float(cfg.pgd.step_size))
        # BS broadcasts B(0), P_C(0), P_D(0) columns
        log_.initial_broadcast += 3 * n_rows * n_pairs
        state.append({"b": np.full((n_rows, n_pairs), 1.0 / n_pairs), "step": step,
                      "iterates": [] if cfg.record_iterates else None})
    trace, quiet, rounds = [], 0, 0
    while rounds < cfg.max_rounds:
        rounds += 1
        dp = max(pw.step() for pw in powers.values())
        db, g_total = 0.0, 0.0
        up_a = up_p = down_a = 0
        for (spectra, pairs), st in zip(blocks, state):
            v = np.vstack([powers[s].sol.utility[:, list(pairs)] for s in spectra])
            mask = np.isfinite(v)
            b = st["b"]
            if rounds == 1:
                # each pair drops the channels it cannot use before its first step
                b = np.where(mask, b, 0.0)
                if st["iterates"] is not None:
                    st["iterates"].append(b.copy())
            n_rows, n_pairs = b.shape
            half = np.empty_like(b)
            for col in range(n_pairs):
                half[:, col] = b[:, col] + st["step"] * assign.grad_g_column(b[:, col], v[:, col], gamma, n_pairs)
            up_a += n_rows * n_pairs
            up_p += n_rows * n_pairs
            new = assign.project_assignment(half, mask)
            down_a += n_rows * n_pairs
            db = max(db, float(np.max(np.abs(new - st["b"]))))
            st["b"], st["v"] = new, v
            if st["iterates"] is not None:
                st["iterates"].append(new.copy())
            g_total += assign.relaxed_objective_g(new, v, gamma)
        log_.up_assignment.append(up_a)
        log_.up_power.append(up_p)
        log_.down_assignment.append(down_a)
        trace.append(g_total)
        quiet = quiet + 1 if (db < cfg.b_tol and dp < cfg.power_tol) else 0
        if quiet >= cfg.patience:
            break
    else:
        log.info("decentralized allocation hit max_rounds=%d", cfg.max_rounds)
    sols = {s: powers[s].sol for s in needed}
    return state, sols, log_, trace, rounds


def run_decentralized_separate(instance: NetworkInstance, partition: Partition, mode: str,
                               cfg: RunConfig = RunConfig()):
    p = instance.params
    partition.validate(p.n_pairs)
    blocks = [(("ul",), partition.ul_pairs), (("dl",), partition.dl_pairs)]
    blocks = [blk for blk in blocks if blk[1]]
    state, sols, msgs, trace, rounds = _decentralized(instance, blocks, mode, cfg)
    for s in ("ul", "dl"):
        if s not in sols:
            sols[s] = solve_powers(instance, s, mode, cfg)
    b = {s: np.zeros((p.n_channels(s), p.n_pairs)) for s in ("ul", "dl")}
    relaxed, iterates = {}, {}
    for ((s,), pairs), st in zip(blocks, state):
        relaxed[s] = _embed(st["b"], pairs, p.n_pairs)
        b[s] = _embed(_round(st["b"], st["v"], p.gamma, cfg), pairs, p.n_pairs)
        iterates[s] = st["iterates"]
    res = _result(instance, mode, b, sols, relaxed, _separate_fairness(b["ul"], b["dl"], partition),
                  rounds, messages=msgs.total, trace=trace,
                  iterates=iterates if cfg.record_iterates else None)
    return res, msgs


def run_decentralized_joint(instance: NetworkInstance, mode: str, cfg: RunConfig = RunConfig()):
    p = instance.params
    pairs = tuple(range(p.n_pairs))
    state, sols, msgs, trace, rounds = _decentralized(instance, [(("ul", "dl"), pairs)], mode, cfg)
    st = state[0]
    n_u = p.n_channels_ul
    r_ul, r_dl = st["b"][:n_u], st["b"][n_u:]
    v_ul, v_dl = sols["ul"].utility, sols["dl"].utility
    b_ul, b_dl = _joint_finish(r_ul, r_dl, v_ul, v_dl, p.gamma, cfg)
    res = _result(instance, mode, {"ul": b_ul, "dl": b_dl}, sols, {"ul": r_ul, "dl": r_dl},
                  joint_fairness_delta(b_ul, b_dl), rounds, messages=msgs.total, trace=trace,
                  iterates={"joint": st["iterates"]} if cfg.record_iterates else None)
    return res, msgs


def run_pipeline(instance: NetworkInstance, pipeline: str, mode: str, partition=None,
                 cfg: RunConfig = RunConfig(), single_channel: bool = False) -> AllocationResult:
    """Dispatch by pipeline name: cent-sep, cent-joint, dec-sep or dec-joint."""
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    if single_channel:
        part = Partition.from_spec(partition or "all-dl", instance.params.n_pairs)
        return run_centralized_separate(instance, part, mode, cfg, single_channel=True)
    if pipeline == "cent-sep":
        return run_centralized_separate(instance, Partition.from_spec(partition, instance.params.n_pairs), mode, cfg)
    if pipeline == "cent-joint":
        return run_centralized_joint(instance, mode, cfg)
    if pipeline == "dec-sep":
        return run_decentralized_separate(instance, Partition.from_spec(partition, instance.params.n_pairs),
                                          mode, cfg)[0]
    if pipeline == "dec-joint":
        return run_decentralized_joint(instance, mode, cfg)[0]
    raise ValueError(f"unknown pipeline {pipeline!r}")

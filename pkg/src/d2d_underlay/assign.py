"""Channel assignment: relaxed projected-gradient ascent and rounding.

Matrices are ``(N_C, N_D)`` with rows indexed by channel. Each row lives in
``{x >= 0, sum(x) <= 1}`` (at most one pair per channel); a pair may hold
several channels. Infeasible (channel, pair) combinations carry utility
``-inf`` and are pinned to zero.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from .model import fairness_delta, joint_fairness_delta

SENTINEL = -1e18


@dataclass(frozen=True)
class PGDConfig:
    step_size: Union[float, str] = "auto"
    max_iters: int = 5000
    objective_tol: float = 1e-12

    def __post_init__(self):
        if self.step_size != "auto" and not float(self.step_size) > 0:
            raise ValueError("step_size must be positive or 'auto'")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if not self.objective_tol >= 0:
            raise ValueError("objective_tol must be >= 0 (0 runs all max_iters)")


@dataclass(frozen=True, eq=False)
class UtilityTable:
    v_ul: np.ndarray
    v_dl: np.ndarray
    provenance: str


def _finite(v):
    """Utilities with -inf replaced by the finite sentinel, plus the usable mask."""
    v = np.asarray(v, dtype=float)
    mask = np.isfinite(v)
    return np.where(mask, v, SENTINEL), mask


def fairness_constants(n_channels: int, n_pairs: int, gamma: float):
    """(k1, k2) of the quadratic fairness penalty k1 * ||B^T 1 - k2 1||^2."""
    return gamma * n_pairs / n_channels**2, n_channels / n_pairs


def relaxed_objective_g(b, v, gamma: float) -> float:
    """Linear utility minus the fairness penalty, for relaxed ``b``."""
    b = np.asarray(b, dtype=float)
    vf, mask = _finite(v)
    k1, k2 = fairness_constants(*b.shape, gamma)
    linear = np.sum(np.where(mask, vf * b, 0.0))
    return float(linear - k1 * np.sum((b.sum(axis=0) - k2) ** 2))


def grad_g(b, v, gamma: float) -> np.ndarray:
    """Gradient V - 2 k1 (1 1^T B - k2 1 1^T), with -inf mapped to the sentinel.

    Column j depends only on column j of ``b``, which is what lets each
    pair compute its own part.
    """
    b = np.asarray(b, dtype=float)
    vf, _ = _finite(v)
    n_c, n_d = b.shape
    k1, k2 = fairness_constants(n_c, n_d, gamma)
    ones = np.ones((n_c, n_c))
    return vf - 2.0 * k1 * (ones @ b - k2)


def grad_g_column(b_col, v_col, gamma: float, n_pairs: int) -> np.ndarray:
    """Column ``j`` of :func:`grad_g`, from pair ``j``'s data alone."""
    b_col = np.asarray(b_col, dtype=float)
    vf, _ = _finite(v_col)
    n_c = b_col.shape[0]
    k1, k2 = fairness_constants(n_c, n_pairs, gamma)
    return vf - 2.0 * k1 * (np.ones((n_c, n_c)) @ b_col - k2)


def lipschitz_constant(n_channels: int, n_pairs: int, gamma: float) -> float:
    k1, _ = fairness_constants(n_channels, n_pairs, gamma)
    return 2.0 * k1 * n_channels


def auto_step(n_channels: int, n_pairs: int, gamma: float) -> float:
    lip = lipschitz_constant(n_channels, n_pairs, gamma)
    return 1.0 / lip if lip > 0 else 1.0


def project_column(x) -> np.ndarray:
    """Euclidean projection onto {x >= 0, sum(x) <= 1} along the last axis.

    Clip at zero; rows whose clipped sum exceeds one go to the probability
    simplex (sort-and-threshold).
    """
    x = np.asarray(x, dtype=float)
    clipped = np.maximum(x, 0.0)
    over = clipped.sum(axis=-1) > 1.0
    if not np.any(over):
        return clipped
    rows = x.reshape(-1, x.shape[-1])
    out = clipped.reshape(-1, x.shape[-1]).copy()
    idx = np.flatnonzero(over.reshape(-1))
    y = rows[idx]
    u = -np.sort(-y, axis=1)
    css = np.cumsum(u, axis=1) - 1.0
    k = np.arange(1, y.shape[1] + 1)
    cond = u - css / k > 0
    rho = y.shape[1] - 1 - np.argmax(cond[:, ::-1], axis=1)
    theta = css[np.arange(len(idx)), rho] / (rho + 1)
    out[idx] = np.maximum(y - theta[:, None], 0.0)
    return out.reshape(x.shape)


def project_assignment(b, mask) -> np.ndarray:
    """Project each channel row and pin unusable entries to zero."""
    b = np.where(mask, b, SENTINEL)
    return np.where(mask, project_column(b), 0.0)


def initial_assignment(mask) -> np.ndarray:
    """Uniform 1/N_D share on every usable entry (rows sum to at most 1).

    Depends only on the shape and the mask, so a pair can build its own
    column of it without knowing the other pairs' feasibility.
    """
    mask = np.asarray(mask, dtype=bool)
    return np.where(mask, 1.0 / mask.shape[1], 0.0)


def pgd_step(b, v, gamma: float, step: float, mask) -> np.ndarray:
    return project_assignment(b + step * grad_g(b, v, gamma), mask)


def pgd_assign(v, gamma: float, cfg: PGDConfig = PGDConfig(), b0=None, history: Optional[list] = None,
               iterates: Optional[list] = None) -> np.ndarray:
    """Projected gradient ascent on the relaxed assignment objective.

    Starts from a uniform split (or ``b0``) and stops once an iteration gains
    less than ``cfg.objective_tol`` or after ``cfg.max_iters``. Objective
    values go to ``history`` and matrices to ``iterates`` when given.
    """
    vf, mask = _finite(v)
    n_c, n_d = vf.shape
    step = auto_step(n_c, n_d, gamma) if cfg.step_size == "auto" else float(cfg.step_size)
    b = initial_assignment(mask) if b0 is None else project_assignment(np.asarray(b0, dtype=float), mask)
    g = relaxed_objective_g(b, v, gamma)
    if history is not None:
        history.append(g)
    if iterates is not None:
        iterates.append(b.copy())
    for _ in range(cfg.max_iters):
        b_new = pgd_step(b, v, gamma, step, mask)
        g_new = relaxed_objective_g(b_new, v, gamma)
        if history is not None:
            history.append(g_new)
        if iterates is not None:
            iterates.append(b_new.copy())
        done = abs(g_new - g) < cfg.objective_tol * max(1.0, abs(g))
        b, g = b_new, g_new
        if done:
            break
    return b


def pgd_assign_joint(v_ul, v_dl, gamma: float, cfg: PGDConfig = PGDConfig(), history=None,
                     iterates=None):
    """Relaxed joint UL/DL assignment (pair exclusivity not enforced).

    Stacking the UL rows on top of the DL rows turns the joint objective
    into the single-spectrum one: the joint unfairness over N_C_ul + N_C_dl
    channels has exactly the single-spectrum form.
    """
    v_ul = np.asarray(v_ul, dtype=float)
    stacked = np.vstack([v_ul, np.asarray(v_dl, dtype=float)])
    b = pgd_assign(stacked, gamma, cfg, history=history, iterates=iterates)
    return b[: v_ul.shape[0]], b[v_ul.shape[0]:]


# --- discretisation ----------------------------------------------------------

def assignment_objective(b, v, gamma: float) -> float:
    """Utility of a binary assignment minus gamma times its unfairness."""
    b = np.asarray(b, dtype=float)
    v = np.asarray(v, dtype=float)
    return float(np.sum(b * np.where(b != 0, v, 0.0)) - gamma * fairness_delta(b))


def joint_objective(b_ul, b_dl, v_ul, v_dl, gamma: float) -> float:
    gain = np.sum(b_ul * np.where(b_ul != 0, v_ul, 0.0)) + np.sum(b_dl * np.where(b_dl != 0, v_dl, 0.0))
    return float(gain - gamma * joint_fairness_delta(b_ul, b_dl))


def discretize_max(b_relaxed, threshold: float = 1e-6) -> np.ndarray:
    """Give each channel to its largest relaxed entry (lowest index on ties)."""
    b = np.asarray(b_relaxed, dtype=float)
    out = np.zeros_like(b)
    best = np.argmax(b, axis=1)
    rows = np.flatnonzero(b[np.arange(b.shape[0]), best] > threshold)
    out[rows, best[rows]] = 1.0
    return out


def discretize_random(b_relaxed, n_samples: int, v, gamma: float, seed=None,
                      threshold: float = 1e-6) -> np.ndarray:
    """Best of ``n_samples`` random roundings, sample 0 being the max rounding.

    Channel ``i`` goes to pair ``j`` with probability proportional to its
    relaxed entry; channels with (near) zero mass stay unassigned.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    b = np.asarray(b_relaxed, dtype=float)
    rng = np.random.default_rng(seed)
    n_c, n_d = b.shape
    active = b.sum(axis=1) > threshold
    probs = np.where(active[:, None], np.maximum(b, 0.0), 0.0)
    probs = probs / np.where(active, probs.sum(axis=1), 1.0)[:, None]
    cdf = np.cumsum(probs, axis=1)
    best = discretize_max(b, threshold)
    best_val = assignment_objective(best, v, gamma)
    for _ in range(n_samples - 1):
        u = rng.random(n_c)
        picks = np.minimum((u[:, None] >= cdf).sum(axis=1), n_d - 1)
        cand = np.zeros_like(b)
        rows = np.flatnonzero(active)
        cand[rows, picks[rows]] = 1.0
        val = assignment_objective(cand, v, gamma)
        if val > best_val:
            best, best_val = cand, val
    return best


def single_channel_assign(v) -> np.ndarray:
    """Greedy matching where every pair gets at most one channel.

    Stand-in for single-channel-per-pair schemes: repeatedly take the
    largest positive utility whose channel and pair are both free.
    """
    v = np.asarray(v, dtype=float)
    out = np.zeros_like(v)
    order = np.argsort(-np.where(np.isfinite(v), v, -np.inf), axis=None, kind="stable")
    used_c, used_d = set(), set()
    for flat in order:
        i, j = np.unravel_index(flat, v.shape)
        if not np.isfinite(v[i, j]) or v[i, j] <= 0:
            break
        if i in used_c or j in used_d:
            continue
        out[i, j] = 1.0
        used_c.add(i)
        used_d.add(j)
    return out


# --- pair exclusivity --------------------------------------------------------

def _naive_exclusive(b_ul, b_dl, v_ul, v_dl):
    b_ul, b_dl = b_ul.copy(), b_dl.copy()
    gain_ul = np.sum(np.where(b_ul != 0, v_ul, 0.0), axis=0)
    gain_dl = np.sum(np.where(b_dl != 0, v_dl, 0.0), axis=0)
    both = (b_ul.sum(axis=0) > 0) & (b_dl.sum(axis=0) > 0)
    for j in np.flatnonzero(both):
        if gain_ul[j] >= gain_dl[j]:
            b_dl[:, j] = 0.0
        else:
            b_ul[:, j] = 0.0
    return b_ul, b_dl


def _refill(b, rows, score, value, allowed, objective, threshold):
    """Offer freed channels to other pairs; keep only improvements.

    Candidates are tried in order of relaxed mass (entries above
    ``threshold``), then the remaining allowed pairs in order of utility;
    the first one that raises the objective gets the channel.
    """
    for i in rows:
        ok = allowed[i] & np.isfinite(value[i])
        ranked = [j for j in np.argsort(-score[i], kind="stable") if ok[j] and score[i, j] > threshold]
        ranked += [j for j in np.argsort(-np.where(ok, value[i], -np.inf), kind="stable")
                   if ok[j] and j not in ranked]
        before = objective(b)
        for j in ranked:
            b[i, j] = 1.0
            if objective(b) > before:
                break
            b[i, j] = 0.0
    return b


def exclusivity_projection(b_ul, b_dl, v_ul, v_dl, gamma: float, relaxed=None, threshold: float = 1e-6):
    """Make every pair use a single spectrum.

    Conflicting pairs are resolved one at a time (lowest index first): the
    pair is tried in UL only and in DL only, the channels it gives up are
    re-offered to pairs not active in the other spectrum (relaxed mass
    first, then utility; see :func:`_refill`), and the better option is
    kept. The pair is then barred from
    the losing spectrum. If simply zeroing each conflicting pair's weaker
    spectrum scores higher, that is returned instead.
    """
    b_ul = np.asarray(b_ul, dtype=float).copy()
    b_dl = np.asarray(b_dl, dtype=float).copy()
    v_ul = np.asarray(v_ul, dtype=float)
    v_dl = np.asarray(v_dl, dtype=float)
    naive_ul, naive_dl = _naive_exclusive(b_ul, b_dl, v_ul, v_dl)
    if relaxed is None:
        score_ul, score_dl, thr = v_ul, v_dl, 0.0
    else:
        score_ul, score_dl = (np.asarray(r, dtype=float) for r in relaxed)
        thr = threshold
    allowed_ul = np.isfinite(v_ul)
    allowed_dl = np.isfinite(v_dl)

    def obj(bu, bd):
        return joint_objective(bu, bd, v_ul, v_dl, gamma)

    def option(b_keep_other, b_lose, allowed_lose, j, score, lose_is_ul):
        allowed = allowed_lose.copy()
        allowed[:, j] = False
        allowed[:, b_keep_other.sum(axis=0) > 0] = False
        b = b_lose.copy()
        freed = np.flatnonzero(b[:, j] > 0)
        b[:, j] = 0.0
        f = (lambda x: obj(x, b_keep_other)) if lose_is_ul else (lambda x: obj(b_keep_other, x))
        value = v_ul if lose_is_ul else v_dl
        return _refill(b, freed, score, value, allowed, f, thr)

    while True:
        both = np.flatnonzero((b_ul.sum(axis=0) > 0) & (b_dl.sum(axis=0) > 0))
        if len(both) == 0:
            break
        j = both[0]
        dl_if_ul = option(b_ul, b_dl, allowed_dl, j, score_dl, lose_is_ul=False)
        ul_if_dl = option(b_dl, b_ul, allowed_ul, j, score_ul, lose_is_ul=True)
        if obj(b_ul, dl_if_ul) >= obj(ul_if_dl, b_dl):
            b_dl = dl_if_ul
            allowed_dl[:, j] = False
        else:
            b_ul = ul_if_dl
            allowed_ul[:, j] = False

    if obj(naive_ul, naive_dl) > obj(b_ul, b_dl):
        return naive_ul, naive_dl
    return b_ul, b_dl


def is_exclusive(b_ul, b_dl) -> bool:
    return bool(np.all(np.asarray(b_ul).sum(axis=0) * np.asarray(b_dl).sum(axis=0) == 0))

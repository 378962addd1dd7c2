"""Brute-force validators and Monte-Carlo estimators.

Nothing here calls into the solvers: rates, unfairness, quantiles and
fading draws are re-derived from the raw problem data so that a bug in a
solver cannot hide behind the same bug in its check. Quantiles come from
bisection on closed-form CDFs rather than from inverse-CDF routines.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import special, stats

MAX_ENUMERATIONS = 10**7


@dataclass(frozen=True)
class OracleReport:
    oracle_value: float
    solver_value: float
    gap_abs: float
    gap_rel: float
    instance: str = ""
    seed: Optional[int] = None

    @classmethod
    def build(cls, oracle_value, solver_value, instance="", seed=None):
        gap = float(oracle_value) - float(solver_value)
        denom = abs(float(oracle_value))
        rel = gap / denom if denom > 0 else (0.0 if gap == 0 else math.copysign(math.inf, gap))
        return cls(float(oracle_value), float(solver_value), gap, rel, instance, seed)


# --- distributions -------------------------------------------------------------

def _params(fading):
    """(kind, mean, var) read straight off a fading description."""
    kind = fading.kind
    mean = np.asarray(fading.mean, dtype=float)
    if kind == "exponential":
        var = mean**2
    elif kind == "deterministic":
        var = np.zeros_like(mean)
    else:
        var = np.broadcast_to(np.asarray(fading.variance, dtype=float), mean.shape)
    return kind, mean, var


def fading_cdf(kind, mean, var, x):
    """P(h <= x) for a scalar link."""
    if x < 0:
        return 0.0
    if kind == "deterministic":
        return 1.0 if x >= mean else 0.0
    if kind == "exponential":
        return 1.0 - math.exp(-x / mean)
    if kind == "gaussian":  # clipped at zero: the mass below zero sits at 0
        return 0.5 * (1.0 + math.erf((x - mean) / math.sqrt(2.0 * var)))
    if kind == "chi_squared":
        k = 2.0 * mean**2 / var
        scale = var / (2.0 * mean)
        return float(special.gammainc(k / 2.0, x / (2.0 * scale)))
    if kind == "log_normal":
        if x == 0:
            return 0.0
        s2 = math.log1p(var / mean**2)
        mu = math.log(mean) - s2 / 2.0
        return 0.5 * (1.0 + math.erf((math.log(x) - mu) / math.sqrt(2.0 * s2)))
    raise ValueError(f"unknown fading kind {kind!r}")


def bisect_quantile(kind, mean, var, q, rel_tol=1e-15):
    """Smallest x with CDF(x) >= q, by bisection."""
    if not 0.0 < q < 1.0:
        raise ValueError("q must lie in (0, 1)")
    if kind == "deterministic":
        return float(mean)
    lo, hi = 0.0, max(mean, 1e-300)
    while fading_cdf(kind, mean, var, hi) < q:
        hi *= 2.0
    for _ in range(2000):
        mid = 0.5 * (lo + hi)
        if fading_cdf(kind, mean, var, mid) >= q:
            hi = mid
        else:
            lo = mid
        if hi - lo <= rel_tol * hi:
            break
    return hi


def oracle_quantile(fading, q):
    """Elementwise bisection quantile of a (possibly array-valued) fading law."""
    kind, mean, var = _params(fading)
    out = np.empty(mean.shape)
    for idx in np.ndindex(mean.shape):
        out[idx] = bisect_quantile(kind, float(mean[idx]), float(var[idx]), q)
    return out


def draw_fading(kind, mean, var, rng, n):
    """``n`` independent draws of a scalar link gain."""
    if kind == "deterministic":
        return np.full(n, float(mean))
    if kind == "exponential":
        return -mean * np.log(rng.random(n))
    if kind == "gaussian":
        return np.clip(rng.normal(mean, math.sqrt(var), n), 0.0, None)
    if kind == "chi_squared":
        k = 2.0 * mean**2 / var
        return rng.gamma(k / 2.0, var / mean, n)
    if kind == "log_normal":
        s2 = math.log1p(var / mean**2)
        return rng.lognormal(math.log(mean) - s2 / 2.0, math.sqrt(s2), n)
    raise ValueError(f"unknown fading kind {kind!r}")


# --- power subproblems ----------------------------------------------------------

def _scalar(sub):
    f = lambda a: float(np.asarray(a, dtype=float).reshape(-1)[0]) if np.size(a) == 1 else None
    vals = dict(g_c=f(sub.g_c), g_d=f(sub.g_d), h_cd=f(sub.h_cu_to_d2d), h_dc=f(sub.h_d2d_to_cu),
                noise=float(sub.noise), pc_max=float(sub.p_c_max), pd_max=float(sub.p_d_max),
                eta_c=float(sub.eta_c_min), eta_d=float(sub.eta_d_min), random=sub.random_link)
    if any(v is None for v in vals.values()):
        raise ValueError("oracles work on one (channel, pair) subproblem at a time")
    return vals


def _with_random(d, gain):
    d = dict(d)
    d["h_dc" if d["random"] == "cu" else "h_cd"] = gain
    return d


def _rates(pc, pd, d):
    """(CU rate, D2D rate, CU SINR, D2D SINR) in bits."""
    sc = pc * d["g_c"] / (d["noise"] + pd * d["h_dc"])
    sd = pd * d["g_d"] / (d["noise"] + pc * d["h_cd"])
    return np.log2(1 + sc), np.log2(1 + sd), sc, sd


def _objective_pieces(sub, objective, fading=None, epsilon=None):
    d = _scalar(sub)
    if objective == "v":
        return d, d, True
    if fading is None or epsilon is None:
        raise ValueError(f"objective {objective!r} needs fading and epsilon")
    kind, mean, var = _params(fading)
    q = bisect_quantile(kind, float(mean.reshape(-1)[0]), float(var.reshape(-1)[0]), 1.0 - epsilon)
    con = _with_random(d, q)
    if objective == "erm":
        return con, _with_random(d, float(mean.reshape(-1)[0])), True
    if objective == "f0":
        return con, con, False
    raise ValueError(f"unknown objective {objective!r}")


@dataclass(frozen=True)
class GridResult:
    p_c: float
    p_d: float
    value: float
    feasible: bool


def _evaluate_box(pc, pd, con, obj, minus_solo):
    pc, pd = np.meshgrid(pc, pd, indexing="ij")
    sc = pc * con["g_c"] / (con["noise"] + pd * con["h_dc"])
    sd = pd * con["g_d"] / (con["noise"] + pc * con["h_cd"])
    ok = (sc >= con["eta_c"]) & (sd >= con["eta_d"])
    if obj is not con:
        sc = pc * obj["g_c"] / (obj["noise"] + pd * obj["h_dc"])
        sd = pd * obj["g_d"] / (obj["noise"] + pc * obj["h_cd"])
    # log2 is monotone: search on the product, take one log at the end
    prod = np.where(ok, (1.0 + sc) * (1.0 + sd), -np.inf)
    k = np.unravel_index(np.argmax(prod), prod.shape)
    if not np.isfinite(prod[k]):
        return float(pc[k]), float(pd[k]), -np.inf
    val = math.log2(1.0 + sc[k]) + math.log2(1.0 + sd[k])
    if minus_solo:
        val -= math.log2(1 + obj["pc_max"] * obj["g_c"] / obj["noise"])
    return float(pc[k]), float(pd[k]), val


def grid_search_power(sub, objective="v", resolution=2000, fading=None, epsilon=None,
                      chunk=250) -> GridResult:
    """Scan the power box on a ``resolution``-squared grid.

    ``objective``: ``"v"`` rate gain with the stored gains; ``"erm"`` rate
    gain with the mean random gain under the quantile-gain constraint;
    ``"f0"`` sum rate with the quantile gain (no solo-rate offset).
    """
    if resolution < 100:
        raise ValueError("resolution must be >= 100")
    con, obj, minus_solo = _objective_pieces(sub, objective, fading, epsilon)
    pcs = np.linspace(0.0, con["pc_max"], resolution)
    pds = np.linspace(0.0, con["pd_max"], resolution)
    best = (0.0, 0.0, -np.inf)
    for start in range(0, resolution, chunk):
        cand = _evaluate_box(pcs[start:start + chunk], pds, con, obj, minus_solo)
        if cand[2] > best[2]:
            best = cand
    return GridResult(best[0], best[1], best[2], bool(np.isfinite(best[2])))


def point_value(sub, p_c, p_d, objective="v", fading=None, epsilon=None):
    """Objective at one point, ``-inf`` if it breaks a constraint (1e-9 slack)."""
    con, obj, minus_solo = _objective_pieces(sub, objective, fading, epsilon)
    _, _, sc, sd = _rates(p_c, p_d, con)
    slack = 1e-9
    if (sc < con["eta_c"] * (1 - slack) or sd < con["eta_d"] * (1 - slack)
            or p_c > con["pc_max"] * (1 + slack) or p_d > con["pd_max"] * (1 + slack) or min(p_c, p_d) < 0):
        return -np.inf
    rc, rd, _, _ = _rates(p_c, p_d, obj)
    val = float(rc + rd)
    if minus_solo:
        val -= math.log2(1 + obj["pc_max"] * obj["g_c"] / obj["noise"])
    return val


def refine_locally(sub, p_c, p_d, objective="f0", fading=None, epsilon=None, radius=1e-3,
                   resolution=201) -> GridResult:
    """Best feasible value on a fine grid in a box of relative half-width ``radius`` around a point."""
    con, obj, minus_solo = _objective_pieces(sub, objective, fading, epsilon)
    rc, rd = radius * con["pc_max"], radius * con["pd_max"]
    pcs = np.linspace(max(0.0, p_c - rc), min(con["pc_max"], p_c + rc), resolution)
    pds = np.linspace(max(0.0, p_d - rd), min(con["pd_max"], p_d + rd), resolution)
    b = _evaluate_box(pcs, pds, con, obj, minus_solo)
    return GridResult(b[0], b[1], b[2], bool(np.isfinite(b[2])))


# --- assignment -------------------------------------------------------------------

def unfairness(counts, n_channels):
    """Normalised spread of per-pair channel counts around N_C / N_D."""
    counts = np.asarray(counts, dtype=float)
    m0 = n_channels / counts.size
    return float(((counts - m0) ** 2).sum() / (m0**2 * counts.size))


@dataclass(frozen=True)
class ExhaustiveResult:
    b_ul: np.ndarray
    b_dl: Optional[np.ndarray]
    objective: float
    n_enumerated: int


def _choices(v):
    """Per channel: the pairs it may go to (-1 = unassigned)."""
    return [[-1] + [j for j in range(v.shape[1]) if np.isfinite(v[i, j])] for i in range(v.shape[0])]


def _to_matrix(choice, shape):
    b = np.zeros(shape)
    for i, j in enumerate(choice):
        if j >= 0:
            b[i, j] = 1.0
    return b


def exhaustive_assignment(v_ul, gamma, v_dl=None, exclusive=True) -> ExhaustiveResult:
    """True optimum of utility minus gamma times unfairness over binary assignments.

    With ``v_dl`` both spectra are enumerated and unfairness counts the
    channels of both; ``exclusive`` discards assignments where a pair
    holds channels in both spectra.
    """
    v_ul = np.asarray(v_ul, dtype=float)
    mats = [v_ul] if v_dl is None else [v_ul, np.asarray(v_dl, dtype=float)]
    n_pairs = v_ul.shape[1]
    n_rows = sum(v.shape[0] for v in mats)
    if (n_pairs + 1) ** n_rows > MAX_ENUMERATIONS:
        raise ValueError(f"exhaustive search over (N_D+1)^{n_rows} assignments refused (limit {MAX_ENUMERATIONS})")
    choices = sum((_choices(v) for v in mats), [])
    n_u = v_ul.shape[0]
    best, best_val, count = None, -np.inf, 0
    for combo in itertools.product(*choices):
        count += 1
        ul, dl = combo[:n_u], combo[n_u:]
        if v_dl is not None and exclusive and (set(ul) & set(dl)) - {-1}:
            continue
        gain = sum(mats[0][i, j] for i, j in enumerate(ul) if j >= 0)
        if v_dl is not None:
            gain += sum(mats[1][i, j] for i, j in enumerate(dl) if j >= 0)
        counts = np.zeros(n_pairs)
        for j in combo:
            if j >= 0:
                counts[j] += 1
        val = gain - gamma * unfairness(counts, n_rows)
        if val > best_val:
            best, best_val = combo, val
    b_ul = _to_matrix(best[:n_u], v_ul.shape)
    b_dl = None if v_dl is None else _to_matrix(best[n_u:], mats[1].shape)
    return ExhaustiveResult(b_ul, b_dl, float(best_val), count)


def assignment_value(b_ul, v_ul, gamma, b_dl=None, v_dl=None):
    """Independent evaluation of the integer-program objective."""
    b_ul = np.asarray(b_ul, dtype=float)
    gain = sum(v_ul[i, j] for i, j in zip(*np.nonzero(b_ul)))
    counts = b_ul.sum(axis=0)
    n_rows = b_ul.shape[0]
    if b_dl is not None:
        b_dl = np.asarray(b_dl, dtype=float)
        gain += sum(v_dl[i, j] for i, j in zip(*np.nonzero(b_dl)))
        counts = counts + b_dl.sum(axis=0)
        n_rows += b_dl.shape[0]
    return float(gain - gamma * unfairness(counts, n_rows))


# --- Monte Carlo -------------------------------------------------------------------

@dataclass(frozen=True)
class OutageEstimate:
    probability: float
    stderr: float
    n_samples: int

    def within(self, target, n_sigma=3.0):
        """|p_hat - target| within n_sigma binomial standard errors at ``target``."""
        sigma = math.sqrt(target * (1 - target) / self.n_samples)
        return abs(self.probability - target) <= n_sigma * sigma


def monte_carlo_outage(p_c, p_d, sub, fading, n_samples=100_000, seed=0) -> OutageEstimate:
    """Fraction of fading draws where the link hit by the random gain misses its SINR floor.

    Downlink-style subproblems (random D2D->CU gain) test the CU SINR;
    uplink-style ones (random CU->D2D gain) test the D2D SINR.
    """
    if n_samples < 100_000:
        raise ValueError("n_samples must be >= 1e5")
    d = _scalar(sub)
    kind, mean, var = _params(fading)
    rng = np.random.default_rng(seed)
    h = draw_fading(kind, float(mean.reshape(-1)[0]), float(var.reshape(-1)[0]), rng, n_samples)
    if d["random"] == "cu":
        sinr = p_c * d["g_c"] / (d["noise"] + p_d * h)
        floor = d["eta_c"]
    else:
        sinr = p_d * d["g_d"] / (d["noise"] + p_c * h)
        floor = d["eta_d"]
    p = float(np.mean(sinr < floor))
    return OutageEstimate(p, math.sqrt(max(p * (1 - p), 0.0) / n_samples), n_samples)


@dataclass(frozen=True)
class TaylorReport:
    mc_mean: float
    first_order: float
    deviation: float
    mc_stderr: float
    n_samples: int


def monte_carlo_expected_gain(p_c, p_d, sub, fading, n_samples=1_000_000, seed=0) -> TaylorReport:
    """Monte-Carlo mean of the rate gain vs. the value at the mean gain.

    ``deviation`` is ``|mc_mean - first_order| / |first_order|``.
    """
    d = _scalar(sub)
    kind, mean, var = _params(fading)
    m, v = float(mean.reshape(-1)[0]), float(var.reshape(-1)[0])
    solo = math.log2(1 + d["pc_max"] * d["g_c"] / d["noise"])
    rc0, rd0, _, _ = _rates(p_c, p_d, _with_random(d, m))
    first = float(rc0 + rd0 - solo)
    if kind == "deterministic":  # the expectation is exact; skip summation round-off
        return TaylorReport(first, first, 0.0, 0.0, n_samples)
    rng = np.random.default_rng(seed)
    h = draw_fading(kind, m, v, rng, n_samples)
    rc, rd, _, _ = _rates(p_c, p_d, _with_random(d, h))
    samples = rc + rd - solo
    mc = float(samples.mean())
    return TaylorReport(mc, first, abs(mc - first) / abs(first), float(samples.std(ddof=1) / math.sqrt(n_samples)),
                        n_samples)


# --- convergence --------------------------------------------------------------------

@dataclass(frozen=True)
class ConvergenceReport:
    monotone: bool
    worst_drop: float
    alpha: Optional[float]
    alpha_stderr: Optional[float]
    window: tuple = ()
    note: str = ""


def convergence_probe(trace, optimum=None, tol=1e-9, window=(0.1, 1.0), gap_floor=1e-11) -> ConvergenceReport:
    """Monotonicity verdict and a log-log fit of the optimality gap.

    The gap is measured against ``optimum`` (the last value if omitted).
    The slope is fitted over the fraction ``window`` of the iterations
    whose gap is still above ``gap_floor`` (relative); ``alpha = -slope``.
    """
    f = np.asarray(trace, dtype=float)
    if f.size < 50:
        raise ValueError("trace must have at least 50 entries")
    drops = f[:-1] - f[1:]
    scale = np.maximum(1.0, np.abs(f[:-1]))
    worst = float(np.max(drops / scale))
    monotone = bool(worst <= tol)
    ref = f[-1] if optimum is None else float(optimum)
    gap = ref - f
    k = np.arange(f.size, dtype=float)
    keep = np.flatnonzero((gap > gap_floor * max(1.0, abs(ref))) & (k > 0))
    if keep.size < 10:
        return ConvergenceReport(monotone, worst, None, None, note="gap vanishes too early to fit a rate")
    lo = keep[0] + int(window[0] * (keep[-1] - keep[0]))
    hi = keep[0] + int(window[1] * (keep[-1] - keep[0]))
    sel = keep[(keep >= lo) & (keep <= hi)]
    if sel.size < 10:
        return ConvergenceReport(monotone, worst, None, None, note="fit window too short")
    fit = stats.linregress(np.log(k[sel]), np.log(gap[sel]))
    return ConvergenceReport(monotone, worst, float(-fit.slope), float(fit.stderr), (int(sel[0]), int(sel[-1])))


# --- feasibility audit ----------------------------------------------------------------

@dataclass
class AuditReport:
    violations: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations


def audit_allocation(result, instance, joint=False, slack=1e-9) -> AuditReport:
    """Check caps, SINR floors, assignment structure and exclusivity from raw data.

    SINR floors use the mode's effective random gain: the mean under PCSI,
    the (1 - epsilon) quantile under ERM and MRM.
    """
    rep = AuditReport()
    p = instance.params
    for s in ("ul", "dl"):
        b = np.asarray(getattr(result, f"b_{s}"), dtype=float)
        p_c = np.asarray(getattr(result, f"p_c_{s}"), dtype=float)
        p_d = np.asarray(getattr(result, f"p_d_{s}"), dtype=float)
        n_c = p.n_channels_ul if s == "ul" else p.n_channels_dl
        if b.shape != (n_c, p.n_pairs):
            rep.violations.append(f"{s}: assignment shape {b.shape}")
            continue
        if not np.all((b == 0) | (b == 1)):
            rep.violations.append(f"{s}: non-binary assignment")
        if np.any(b.sum(axis=1) > 1):
            rep.violations.append(f"{s}: channel shared by several pairs")
        fading = instance.h_d_dl_model if s == "dl" else instance.h_c_ul_model
        if result.mode == "PCSI":
            rand = np.asarray(fading.mean, dtype=float)
        else:
            rand = oracle_quantile(fading, 1.0 - p.epsilon)
        pc_max = p.p_c_max_ul if s == "ul" else p.p_c_max_dl
        eta_c = p.eta_c_min_ul if s == "ul" else p.eta_c_min_dl
        for i, j in zip(*np.nonzero(b)):
            pc, pd = p_c[i, j], p_d[i, j]
            if s == "dl":
                g_c, h_dc, h_cd = instance.g_c_dl[i], rand[j, i], instance.h_c_dl[j]
            else:
                g_c, h_dc, h_cd = instance.g_c_ul[i], instance.h_d_ul[j], rand[i, j]
            if not (-slack <= pc <= pc_max * (1 + slack)) or not (-slack <= pd <= p.p_d_max * (1 + slack)):
                rep.violations.append(f"{s}[{i},{j}]: power outside caps ({pc}, {pd})")
            sc = pc * g_c / (p.noise + pd * h_dc)
            sd = pd * instance.g_d[j] / (p.noise + pc * h_cd)
            if sc < eta_c * (1 - slack):
                rep.violations.append(f"{s}[{i},{j}]: CU SINR {sc} below {eta_c}")
            if sd < p.eta_d_min * (1 - slack):
                rep.violations.append(f"{s}[{i},{j}]: D2D SINR {sd} below {p.eta_d_min}")
    if joint:
        both = (np.asarray(result.b_ul).sum(axis=0) > 0) & (np.asarray(result.b_dl).sum(axis=0) > 0)
        if both.any():
            rep.violations.append(f"pairs active in both spectra: {np.flatnonzero(both).tolist()}")
    return rep

import numpy as np
import pytest

from d2d_underlay.model import FadingModel, Geometry, NetworkParams, generate_instance
from d2d_underlay.power import PowerSubproblem, solve_power_erm, solve_power_pcsi

# experiments run with the CLI's path-gain constant (see cli.DEFAULT_REFERENCE_GAIN)
GEOMETRY = Geometry(reference_gain=1e3)

_ACCEPTANCE_LINES = []


def rand_subproblem(rng, random_link="cu"):
    return PowerSubproblem(
        g_c=rng.uniform(0.5, 2.0), g_d=rng.uniform(0.5, 2.0),
        h_cu_to_d2d=rng.uniform(0.02, 0.5), h_d2d_to_cu=rng.uniform(0.02, 0.5),
        noise=0.1, p_c_max=rng.uniform(0.5, 2.0), p_d_max=rng.uniform(0.5, 2.0),
        eta_c_min=rng.uniform(0.5, 3.0), eta_d_min=rng.uniform(0.5, 3.0), random_link=random_link)


def feasible_subproblems(n, seed, epsilon=0.1, need_erm=True):
    """``n`` scalar subproblems (alternating random link) feasible under PCSI and ERM."""
    rng = np.random.default_rng(seed)
    out = []
    while len(out) < n:
        sub = rand_subproblem(rng, "cu" if len(out) % 2 else "d2d")
        fad = FadingModel("exponential", sub.random_gain)
        if not solve_power_pcsi(sub).feasible:
            continue
        if need_erm and not solve_power_erm(sub, fad, epsilon).feasible:
            continue
        out.append((sub, fad))
    return out


def small_instance(seed, n_ul=3, n_dl=3, n_pairs=2, **params):
    return generate_instance(seed, GEOMETRY, NetworkParams(n_channels_ul=n_ul, n_channels_dl=n_dl,
                                                           n_pairs=n_pairs, **params))


def qp_project(x):
    """Euclidean projection on {x >= 0, sum x <= 1} by a QP solver."""
    import cvxpy as cp
    z = cp.Variable(len(x))
    cp.Problem(cp.Minimize(cp.sum_squares(z - x)), [z >= 0, cp.sum(z) <= 1]).solve(
        solver="CLARABEL", tol_gap_abs=1e-12, tol_gap_rel=1e-12, tol_feas=1e-12)
    return z.value


def qp_relaxed_optimum(v, gamma):
    """Optimum of the relaxed assignment objective by a QP solver."""
    import cvxpy as cp
    mask = np.isfinite(v)
    vf = np.where(mask, v, 0.0)
    n_c, n_d = v.shape
    k1, k2 = gamma * n_d / n_c**2, n_c / n_d
    b = cp.Variable((n_c, n_d))
    cons = [b >= 0, cp.sum(b, axis=1) <= 1]
    if (~mask).any():
        cons.append(b[~mask] == 0)
    prob = cp.Problem(cp.Maximize(cp.sum(cp.multiply(vf, b)) - k1 * cp.sum_squares(cp.sum(b, axis=0) - k2)), cons)
    prob.solve(solver="OSQP", eps_abs=1e-12, eps_rel=1e-12, polishing=True, max_iter=200_000)
    return prob.value


@pytest.fixture
def report():
    """Record a one-line acceptance verdict, echoed in the terminal summary."""
    def _add(number, passed, detail):
        line = f"criterion {number}: {'PASS' if passed else 'FAIL'} - {detail}"
        print(line)
        _ACCEPTANCE_LINES.append((number, line))
    return _add


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(_ACCEPTANCE_LINES, key=lambda t: t[0]):
        terminalreporter.write_line(line)

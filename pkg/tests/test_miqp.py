import numpy as np
import pytest

from aimpc.miqp import MiqpProblem, MiqpStatus, NoFractionalError, branch_rule, solve_miqp
from aimpc.qp import QpProblem

from oracles import enumerate_miqp, enumerate_qp, qp_fixed_oracle, random_miqp


def _pure_enum_oracle(problem):
    def solve_fixed(lb, ub):
        sub = QpProblem(H=problem.H, f=problem.f, A_in=problem.A_in, b_in=problem.b_in, lb=lb, ub=ub, c=problem.c)
        return _enum_fixed(sub)

    return solve_fixed


def _enum_fixed(sub):
    # fold bounds into inequality rows so the active-set enumeration sees them
    n = sub.n
    rows, rhs = [sub.A_in], [sub.b_in]
    for j in range(n):
        if np.isfinite(sub.ub[j]):
            e = np.zeros(n)
            e[j] = 1.0
            rows.append(e[None])
            rhs.append([sub.ub[j]])
        if np.isfinite(sub.lb[j]):
            e = np.zeros(n)
            e[j] = -1.0
            rows.append(e[None])
            rhs.append([-sub.lb[j]])
    A = np.vstack(rows)
    b = np.concatenate([np.asarray(r, float) for r in rhs])
    # fixed integers: substitute them out to keep the enumeration small
    fixed = np.flatnonzero(sub.lb == sub.ub)
    free = np.setdiff1d(np.arange(n), fixed)
    xf = sub.lb[fixed]
    H = sub.H[np.ix_(free, free)]
    f = sub.f[free] + sub.H[np.ix_(free, fixed)] @ xf
    c = 0.5 * xf @ sub.H[np.ix_(fixed, fixed)] @ xf + sub.f[fixed] @ xf + sub.c
    Af = A[:, free]
    bf = b - A[:, fixed] @ xf
    keep = np.linalg.norm(Af, axis=1) > 0
    if np.any(bf[~keep] < -1e-9):
        return None
    obj, xs = enumerate_qp(H, f, Af[keep], bf[keep])
    if xs is None:
        return None
    x = np.zeros(n)
    x[free] = xs
    x[fixed] = xf
    return obj + c, x


def test_branch_rule_examples():
    assert branch_rule(np.array([0.9, 0.5, 0.1]), [0, 1, 2]) == 1
    assert branch_rule(np.array([0.5, 0.5]), [0, 1]) == 0
    with pytest.raises(NoFractionalError):
        branch_rule(np.array([1.0, 0.0]), [0, 1])


def test_symmetric_tie_goes_down():
    # (x - 0.5)^2 = x^2 - x + 0.25
    p = MiqpProblem(QpProblem(H=[[2.0]], f=[-1.0], c=0.25, lb=[0.0], ub=[1.0]), (0,))
    sol = solve_miqp(p)
    assert sol.status == MiqpStatus.OPTIMAL
    assert sol.objective == pytest.approx(0.25, abs=1e-12)
    assert sol.x[0] == 0.0


def test_integral_relaxation_single_node():
    p = MiqpProblem(QpProblem(H=[[2.0]], f=[-2.0], lb=[0.0], ub=[1.0]), (0,))
    sol = solve_miqp(p)
    assert sol.nodes_explored == 1
    assert sol.x[0] == pytest.approx(1.0)


def test_infeasible_miqp():
    # x binary with 0.2 <= x <= 0.8
    base = QpProblem(H=[[1.0]], f=[0.0], A_in=[[1.0], [-1.0]], b_in=[0.8, -0.2], lb=[0.0], ub=[1.0])
    sol = solve_miqp(MiqpProblem(base, (0,)))
    assert sol.status == MiqpStatus.INFEASIBLE


def test_integer_set_needs_finite_bounds():
    with pytest.raises(ValueError):
        MiqpProblem(QpProblem(H=[[1.0]], f=[0.0]), (0,))
    with pytest.raises(ValueError):
        MiqpProblem(QpProblem(H=[[1.0]], f=[0.0], lb=[0], ub=[1]), (3,))


def test_random_miqps_match_enumeration():
    rng = np.random.default_rng(2024)
    checked = 0
    for t in range(200):
        k = int(rng.integers(1, 9))
        p = random_miqp(rng, int(rng.integers(1, 4)), k, int(rng.integers(1, 5)))
        sol = solve_miqp(p)
        ref, _ = enumerate_miqp(p.base, p.integer_set, qp_fixed_oracle(p.base))
        if not np.isfinite(ref):
            assert sol.status == MiqpStatus.INFEASIBLE
            continue
        assert sol.status == MiqpStatus.OPTIMAL
        assert sol.objective == pytest.approx(ref, abs=1e-6 * max(1.0, abs(ref)))
        xi = sol.x[list(p.integer_set)]
        assert np.all(np.abs(xi - np.round(xi)) <= 1e-6)
        checked += 1
    assert checked >= 150


def test_small_miqps_match_fully_independent_enumeration():
    rng = np.random.default_rng(99)
    for _ in range(15):
        p = random_miqp(rng, 2, int(rng.integers(1, 4)), 2)
        sol = solve_miqp(p)
        ref, _ = enumerate_miqp(p.base, p.integer_set, _pure_enum_oracle(p.base))
        if np.isfinite(ref):
            assert sol.objective == pytest.approx(ref, abs=1e-6 * max(1.0, abs(ref)))
        else:
            assert sol.status == MiqpStatus.INFEASIBLE


def test_bound_validity_and_incumbent_monotone():
    rng = np.random.default_rng(8)
    for _ in range(10):
        p = random_miqp(rng, 2, 5, 3)
        sol = solve_miqp(p, keep_trace=True)
        incs = [t["incumbent"] for t in sol.trace]
        assert all(b <= a + 1e-12 for a, b in zip(incs, incs[1:]))
        for node in sol.trace:
            if not np.isfinite(node["bound"]):
                continue
            lb = p.base.lb.copy()
            ub = p.base.ub.copy()
            lb[list(p.integer_set)] = node["lb"]
            ub[list(p.integer_set)] = node["ub"]
            sub = QpProblem(H=p.base.H, f=p.base.f, A_in=p.base.A_in, b_in=p.base.b_in, lb=lb, ub=ub)
            best, _ = enumerate_miqp(sub, p.integer_set, qp_fixed_oracle(sub))
            assert node["bound"] <= best + 1e-8


def test_hint_does_not_change_optimum():
    rng = np.random.default_rng(12)
    for _ in range(30):
        p = random_miqp(rng, 3, 6, 3)
        cold = solve_miqp(p)
        if cold.status != MiqpStatus.OPTIMAL:
            continue
        hint = cold.x + rng.normal(scale=0.3, size=cold.x.size)
        warm = solve_miqp(p, incumbent_hint=hint)
        assert warm.objective == pytest.approx(cold.objective, abs=1e-6 * max(1.0, abs(cold.objective)))


def test_node_limit_returns_incumbent_and_gap():
    rng = np.random.default_rng(4)
    p = random_miqp(rng, 2, 8, 4)
    full = solve_miqp(p)
    hint = full.x
    sol = solve_miqp(p, incumbent_hint=hint, node_limit=1)
    assert sol.status in (MiqpStatus.NODE_LIMIT, MiqpStatus.OPTIMAL)
    assert sol.x is not None
    if sol.status == MiqpStatus.NODE_LIMIT:
        assert sol.gap >= 0

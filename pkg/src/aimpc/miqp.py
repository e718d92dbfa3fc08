"""Branch-and-bound over :mod:`aimpc.qp` relaxations.

Node selection is best-first on the parent's relaxation bound until an
incumbent exists, then depth-first (down-branch first). Branching picks the
most fractional integer variable. All orderings are deterministic.
"""

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from .qp import ActiveSetQP, QpProblem, QpStatus

INT_TOL = 1e-6


class MiqpStatus(str, enum.Enum):
    OPTIMAL = "Optimal"
    INFEASIBLE = "Infeasible"
    NODE_LIMIT = "NodeLimit"


class NoFractionalError(ValueError):
    """All integer variables already take integral values."""


@dataclass
class MiqpProblem:
    base: QpProblem
    integer_set: tuple

    def __post_init__(self):
        self.integer_set = tuple(int(i) for i in self.integer_set)
        n = self.base.n
        for i in self.integer_set:
            if not 0 <= i < n:
                raise ValueError(f"integer index {i} out of range for {n} variables")
            if not (np.isfinite(self.base.lb[i]) and np.isfinite(self.base.ub[i])):
                raise ValueError(f"integer variable {i} needs finite bounds")
        if len(set(self.integer_set)) != len(self.integer_set):
            raise ValueError("duplicate integer indices")


@dataclass
class MiqpSolution:
    x: np.ndarray
    objective: float
    status: MiqpStatus
    nodes_explored: int
    gap: float
    qp: object = None
    trace: list = field(default_factory=list)

    @property
    def optimal(self):
        return self.status == MiqpStatus.OPTIMAL


def branch_rule(x_relaxed, integer_set, tol=INT_TOL):
    """Most fractional integer variable (fraction closest to 0.5); lowest index on ties."""
    best, best_score = None, None
    for j in integer_set:
        v = float(x_relaxed[j])
        frac = v - math.floor(v)
        if min(frac, 1.0 - frac) <= tol:
            continue
        score = abs(frac - 0.5)
        if best is None or score < best_score - 1e-12:
            best, best_score = j, score
    if best is None:
        raise NoFractionalError("no fractional integer variable")
    return best


def _is_integral(x, integer_set, tol=INT_TOL):
    v = x[list(integer_set)]
    return np.all(np.abs(v - np.round(v)) <= tol)


def _snap(x, ints, vals):
    x = x.copy()
    x[ints] = vals
    return x


@dataclass
class _Node:
    bound: float
    seq: int
    depth: int
    lb: np.ndarray
    ub: np.ndarray
    warm: object


def solve_miqp(problem, incumbent_hint=None, node_limit=20000, rel_gap=1e-6, keep_trace=False):
    """Globally optimal solution of ``problem`` over its integer set.

    ``incumbent_hint`` (e.g. the previous MPC solution shifted one step) is
    rounded, its integers fixed, and the resulting QP used as the starting
    incumbent when feasible. On ``node_limit`` the best incumbent is
    returned with its relative gap.
    """
    base = problem.base
    ints = list(problem.integer_set)
    solver = ActiveSetQP(base)
    lb0 = base.lb.copy()
    ub0 = base.ub.copy()
    lb0[ints] = np.ceil(lb0[ints] - INT_TOL)
    ub0[ints] = np.floor(ub0[ints] + INT_TOL)

    inc_x, inc_obj, inc_qp = None, np.inf, None
    trace = []

    def fixed_solve(values, lb, ub, warm):
        lbf, ubf = lb.copy(), ub.copy()
        lbf[ints] = values
        ubf[ints] = values
        return solver.solve(lbf, ubf, warm_start=warm)

    if incumbent_hint is not None:
        hint = np.asarray(incumbent_hint, dtype=float)
        vals = np.clip(np.round(hint[ints]), lb0[ints], ub0[ints])
        sol = fixed_solve(vals, lb0, ub0, hint)
        if sol.status == QpStatus.OPTIMAL:
            inc_x, inc_obj, inc_qp = _snap(sol.x, ints, vals), sol.objective, sol

    def beats(obj, tol):
        # obj is strictly better than the incumbent by more than tol (relative)
        return inc_x is None or obj < inc_obj - tol * max(1.0, abs(inc_obj))

    open_nodes = [_Node(-np.inf, 0, 0, lb0, ub0, None)]
    seq = 1
    nodes = 0
    limit_hit = False
    while open_nodes:
        if nodes >= node_limit:
            limit_hit = True
            break
        if inc_x is None:
            k = min(range(len(open_nodes)), key=lambda i: (open_nodes[i].bound, open_nodes[i].seq))
            node = open_nodes.pop(k)
        else:
            node = open_nodes.pop()
        if not beats(node.bound, rel_gap):
            continue
        nodes += 1
        sol = solver.solve(node.lb, node.ub, warm_start=node.warm)
        if keep_trace:
            trace.append({
                "lb": node.lb[ints].copy(), "ub": node.ub[ints].copy(),
                "bound": sol.objective if sol.status == QpStatus.OPTIMAL else np.inf,
                "incumbent": inc_obj, "status": sol.status,
            })
        if sol.status != QpStatus.OPTIMAL:
            continue
        if not beats(sol.objective, rel_gap):
            continue
        if _is_integral(sol.x, ints):
            vals = np.round(sol.x[ints])
            if np.array_equal(sol.x[ints], vals):
                cand = sol
            else:
                cand = fixed_solve(vals, node.lb, node.ub, sol)
            if cand.status == QpStatus.OPTIMAL and beats(cand.objective, 1e-12):
                inc_x, inc_obj, inc_qp = _snap(cand.x, ints, vals), cand.objective, cand
                if keep_trace:
                    trace[-1]["incumbent_after"] = inc_obj
            continue
        j = branch_rule(sol.x, ints)
        v = sol.x[j]
        down_ub = node.ub.copy()
        down_ub[j] = math.floor(v)
        up_lb = node.lb.copy()
        up_lb[j] = math.ceil(v)
        down = _Node(sol.objective, seq, node.depth + 1, node.lb, down_ub, sol)
        up = _Node(sol.objective, seq + 1, node.depth + 1, up_lb, node.ub, sol)
        seq += 2
        # LIFO pops the last element: push up first so down is explored first
        open_nodes.append(up)
        open_nodes.append(down)

    if inc_x is None:
        status = MiqpStatus.NODE_LIMIT if limit_hit else MiqpStatus.INFEASIBLE
        return MiqpSolution(None, np.inf, status, nodes, np.inf, None, trace)
    if limit_hit:
        bounds = [nd.bound for nd in open_nodes]
        best_bound = min(bounds) if bounds else inc_obj
        gap = max(0.0, (inc_obj - best_bound) / max(1.0, abs(inc_obj)))
        if not np.isfinite(gap):
            gap = np.inf
        return MiqpSolution(inc_x, inc_obj, MiqpStatus.NODE_LIMIT, nodes, gap, inc_qp, trace)
    return MiqpSolution(inc_x, inc_obj, MiqpStatus.OPTIMAL, nodes, 0.0, inc_qp, trace)

"""Brute-force reference solvers used only by the tests."""

import itertools

import numpy as np

from aimpc.miqp import MiqpProblem
from aimpc.qp import ActiveSetQP, QpProblem, QpStatus


def enumerate_qp(H, f, A_in, b_in, A_eq=None, b_eq=None, tol=1e-7):
    """Global optimum of a convex QP by trying every active set.

    Each subset of inequalities is imposed as equalities (together with the
    true equalities), the KKT system is solved by least squares, and the best
    primal-feasible, consistent candidate is kept. Returns ``(obj, x)`` or
    ``(inf, None)`` if no candidate is feasible.
    """
    n = H.shape[0]
    A_eq = np.zeros((0, n)) if A_eq is None else np.asarray(A_eq, float)
    b_eq = np.zeros(0) if b_eq is None else np.asarray(b_eq, float)
    m = A_in.shape[0]
    best, best_x = np.inf, None
    for k in range(m + 1):
        for S in itertools.combinations(range(m), k):
            A = np.vstack([A_eq, A_in[list(S)]]) if S else A_eq
            b = np.concatenate([b_eq, b_in[list(S)]]) if S else b_eq
            p = A.shape[0]
            K = np.zeros((n + p, n + p))
            K[:n, :n] = H
            K[:n, n:] = A.T
            K[n:, :n] = A
            rhs = np.concatenate([-f, b])
            sol = np.linalg.lstsq(K, rhs, rcond=None)[0]
            if np.linalg.norm(K @ sol - rhs) > 1e-8 * (1 + np.linalg.norm(rhs)):
                continue
            x = sol[:n]
            if m and np.any(A_in @ x - b_in > tol):
                continue
            obj = 0.5 * x @ H @ x + f @ x
            if obj < best:
                best, best_x = obj, x
    return best, best_x


def enumerate_miqp(problem, integer_set, solve_fixed):
    """Best objective over all 0/1 assignments of ``integer_set``.

    ``solve_fixed(lb, ub)`` solves the continuous problem with the integers
    pinned through ``lb == ub`` and returns ``(obj, x)`` or ``None``.
    Assignments outside the problem's own integer bounds are skipped.
    """
    best, best_x = np.inf, None
    idx = list(integer_set)
    for bits in itertools.product((0.0, 1.0), repeat=len(idx)):
        bits = np.asarray(bits)
        if np.any(bits < problem.lb[idx] - 1e-9) or np.any(bits > problem.ub[idx] + 1e-9):
            continue
        lb = problem.lb.copy()
        ub = problem.ub.copy()
        lb[idx] = bits
        ub[idx] = bits
        sol = solve_fixed(lb, ub)
        if sol is not None and sol[0] < best:
            best, best_x = sol
    return best, best_x


def random_convex_qp(rng, n, m, singular=False, n_eq=0):
    """Feasible, bounded random QP; ``singular`` gives a rank-deficient H."""
    if singular:
        r = max(1, n - int(rng.integers(1, 3)))
        M = rng.normal(size=(n, r))
        H = M @ M.T
    else:
        M = rng.normal(size=(n, n))
        H = M @ M.T + 0.1 * np.eye(n)
    f = rng.normal(size=n) * 3
    x0 = rng.normal(size=n)
    A = rng.normal(size=(m, n))
    b = A @ x0 + rng.uniform(0, 2, size=m)
    if singular:
        # bound the flat directions of H so the problem stays bounded
        w, V = np.linalg.eigh(H)
        N = V[:, w < 1e-9 * max(1.0, w.max())]
        extra_A = np.vstack([N.T, -N.T])
        extra_b = extra_A @ x0 + rng.uniform(0.5, 2, size=extra_A.shape[0])
        A = np.vstack([A, extra_A])
        b = np.concatenate([b, extra_b])
    A_eq = b_eq = None
    if n_eq:
        A_eq = rng.normal(size=(n_eq, n))
        b_eq = A_eq @ x0
    return H, f, A, b, A_eq, b_eq


def rk4_oracle(A, B, Ts, h=1e-5):
    """Fine-step RK4 integration of the transition and input maps."""
    n, m = B.shape
    steps = max(1, int(round(Ts / h)))
    h = Ts / steps
    # state Y = [Phi | Gam], Y' = A Y + [0 | B], u held constant
    Y = np.hstack([np.eye(n), np.zeros((n, m))])
    F = np.hstack([np.zeros((n, n)), B])

    def f(Y):
        return A @ Y + F

    for _ in range(steps):
        k1 = f(Y)
        k2 = f(Y + 0.5 * h * k1)
        k3 = f(Y + 0.5 * h * k2)
        k4 = f(Y + h * k3)
        Y = Y + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
    return Y[:, :n], Y[:, n:]


def qp_fixed_oracle(problem):
    """Each assignment solved as its own QP (fresh solver per problem)."""
    solver = ActiveSetQP(problem)

    def solve_fixed(lb, ub):
        sol = solver.solve(lb, ub)
        return (sol.objective, sol.x) if sol.status == QpStatus.OPTIMAL else None

    return solve_fixed


def random_miqp(rng, n_c, k, m):
    n = n_c + k
    M = rng.normal(size=(n, n))
    H = M @ M.T * 0.5 + 0.05 * np.eye(n)
    f = rng.normal(size=n) * 2
    x0 = np.concatenate([rng.normal(size=n_c), rng.integers(0, 2, size=k).astype(float)])
    A = rng.normal(size=(m, n))
    b = A @ x0 + rng.uniform(0, 0.5, size=m)
    lb = np.concatenate([np.full(n_c, -5.0), np.zeros(k)])
    ub = np.concatenate([np.full(n_c, 5.0), np.ones(k)])
    base = QpProblem(H=H, f=f, A_in=A, b_in=b, lb=lb, ub=ub)
    return MiqpProblem(base, tuple(range(n_c, n)))

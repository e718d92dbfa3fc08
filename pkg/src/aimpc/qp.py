"""Dense convex QP solver.

Solves::

    min  0.5 x'Hx + f'x + c
    s.t. A_eq x  = b_eq
         A_in x <= b_in
         lb <= x <= ub

Equalities are eliminated once through an orthonormal null-space basis; the
remaining inequality-constrained problem is solved with the Goldfarb-Idnani
dual active-set method. Merely semidefinite Hessians are handled with a
proximal-point outer loop and a final exact KKT polish on the detected
working set, so the returned point solves the original (unregularized)
problem.

The solver object keeps the elimination and factorizations, which makes
repeated solves that only change ``lb``/``ub`` (branch-and-bound) cheap.
"""

import enum
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cholesky, qr, qr_delete, qr_insert, solve_triangular

FEAS_TOL = 1e-7
OPT_TOL = 1e-6
_ADD_TOL = 1e-9


class QpStatus(str, enum.Enum):
    OPTIMAL = "Optimal"
    INFEASIBLE = "Infeasible"
    UNBOUNDED = "Unbounded"
    ITER_LIMIT = "IterLimit"


class NonConvexError(ValueError):
    """The Hessian has an eigenvalue below ``-1e-6``."""


def _as_matrix(M, ncols, name):
    if M is None:
        return np.zeros((0, ncols))
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if M.size == 0:
        return np.zeros((0, ncols))
    if M.shape[1] != ncols:
        raise ValueError(f"{name} has {M.shape[1]} columns, expected {ncols}")
    return M


def _as_vector(v, n, name, fill=None):
    if v is None:
        if fill is None:
            return np.zeros(0)
        return np.full(n, fill)
    v = np.asarray(v, dtype=float).reshape(-1)
    if v.shape[0] != n:
        raise ValueError(f"{name} has length {v.shape[0]}, expected {n}")
    return v


@dataclass
class QpProblem:
    H: np.ndarray
    f: np.ndarray
    A_eq: np.ndarray = None
    b_eq: np.ndarray = None
    A_in: np.ndarray = None
    b_in: np.ndarray = None
    lb: np.ndarray = None
    ub: np.ndarray = None
    c: float = 0.0

    def __post_init__(self):
        self.H = np.atleast_2d(np.asarray(self.H, dtype=float))
        n = self.H.shape[0]
        if self.H.shape != (n, n):
            raise ValueError(f"H must be square, got {self.H.shape}")
        self.f = _as_vector(self.f, n, "f")
        self.A_eq = _as_matrix(self.A_eq, n, "A_eq")
        self.b_eq = _as_vector(self.b_eq, self.A_eq.shape[0], "b_eq") if self.A_eq.shape[0] else np.zeros(0)
        self.A_in = _as_matrix(self.A_in, n, "A_in")
        self.b_in = _as_vector(self.b_in, self.A_in.shape[0], "b_in") if self.A_in.shape[0] else np.zeros(0)
        self.lb = _as_vector(self.lb, n, "lb", fill=-np.inf)
        self.ub = _as_vector(self.ub, n, "ub", fill=np.inf)
        for name in ("H", "f", "A_eq", "b_eq", "A_in", "b_in"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"{name} contains non-finite entries")
        if np.any(np.isnan(self.lb)) or np.any(np.isnan(self.ub)):
            raise ValueError("bounds contain NaN")
        if not np.allclose(self.H, self.H.T, atol=1e-9 * max(1.0, np.abs(self.H).max(initial=0.0))):
            raise ValueError("H must be symmetric")

    @property
    def n(self):
        return self.H.shape[0]

    def objective(self, x):
        return float(0.5 * x @ self.H @ x + self.f @ x + self.c)


@dataclass
class QpSolution:
    x: np.ndarray
    lam: np.ndarray
    nu: np.ndarray
    objective: float
    status: QpStatus
    lam_lb: np.ndarray = None
    lam_ub: np.ndarray = None
    iterations: int = 0
    working_set: tuple = ()
    certificate: object = None

    @property
    def optimal(self):
        return self.status == QpStatus.OPTIMAL


@dataclass
class _Rows:
    """Inequalities of the reduced problem ``C y <= d`` and their origin."""

    C: np.ndarray
    kind: np.ndarray  # 0 = A_in row, 1 = upper bound, 2 = lower bound
    index: np.ndarray
    const: np.ndarray  # d = const + (ub or -lb or b_in) part, see _rhs
    inv_norm: np.ndarray = field(default=None)


class ActiveSetQP:
    """Reusable solver for one problem structure.

    ``solve(lb=..., ub=...)`` may override the bound vectors; bounds that
    were infinite at construction must stay infinite.
    """

    def __init__(self, problem, max_iter=None):
        self.p = problem
        n = problem.n
        H = problem.H
        scale = max(1.0, float(np.abs(H).max(initial=0.0)))
        if n:
            eig_full = np.linalg.eigvalsh(H)
            if eig_full[0] < -1e-6 * scale:
                raise NonConvexError(f"H has eigenvalue {eig_full[0]:.3e}")
        self.max_iter = max_iter or 50 * (n + problem.A_in.shape[0] + problem.A_eq.shape[0] + 2 * n)
        self._eq_pinv = None
        self._eliminate_equalities()
        self._build_rows()
        self._factorize()

    # -- setup -----------------------------------------------------------
    def _eliminate_equalities(self):
        p = self.p
        n = p.n
        self.eq_infeasible = None
        if p.A_eq.shape[0] == 0:
            self.xp = np.zeros(n)
            self.Z = np.eye(n)
            return
        U, sv, Vt = np.linalg.svd(p.A_eq, full_matrices=True)
        tol = max(p.A_eq.shape) * np.finfo(float).eps * (sv[0] if sv.size else 0.0)
        rank = int(np.sum(sv > max(tol, 1e-12)))
        self.Z = Vt[rank:].T.copy()
        # least-squares particular solution
        coef = (U[:, :rank].T @ p.b_eq) / sv[:rank]
        self.xp = Vt[:rank].T @ coef
        resid = p.A_eq @ self.xp - p.b_eq
        if np.linalg.norm(resid, np.inf) > FEAS_TOL * max(1.0, np.abs(p.b_eq).max()):
            self.eq_infeasible = resid

    def _build_rows(self):
        p = self.p
        Z, xp = self.Z, self.xp
        blocks, kinds, idx, const = [], [], [], []
        m_in = p.A_in.shape[0]
        if m_in:
            blocks.append(p.A_in @ Z)
            kinds.append(np.zeros(m_in, int))
            idx.append(np.arange(m_in))
            const.append(-(p.A_in @ xp))
        ub_idx = np.flatnonzero(np.isfinite(p.ub))
        lb_idx = np.flatnonzero(np.isfinite(p.lb))
        if ub_idx.size:
            blocks.append(Z[ub_idx])
            kinds.append(np.ones(ub_idx.size, int))
            idx.append(ub_idx)
            const.append(-xp[ub_idx])
        if lb_idx.size:
            blocks.append(-Z[lb_idx])
            kinds.append(np.full(lb_idx.size, 2))
            idx.append(lb_idx)
            const.append(xp[lb_idx])
        nr = Z.shape[1]
        if blocks:
            C = np.vstack(blocks)
            rows = _Rows(C, np.concatenate(kinds), np.concatenate(idx), np.concatenate(const))
        else:
            rows = _Rows(np.zeros((0, nr)), np.zeros(0, int), np.zeros(0, int), np.zeros(0))
        norms = np.linalg.norm(rows.C, axis=1)
        # rows whose reduced coefficients vanish are constant checks
        self._const_rows = norms <= 1e-12
        rows.inv_norm = np.where(self._const_rows, 0.0, 1.0 / np.where(norms > 0, norms, 1.0))
        self.rows = rows
        self._ub_finite = np.isfinite(p.ub)
        self._lb_finite = np.isfinite(p.lb)

    def _factorize(self):
        p = self.p
        Z = self.Z
        nr = Z.shape[1]
        self.Hr = Z.T @ p.H @ Z
        self.gr = Z.T @ (p.H @ self.xp + p.f)
        self.scale = max(1.0, float(np.abs(self.Hr).max(initial=0.0)))
        if nr == 0:
            self.rho = 0.0
            self.J = np.zeros((0, 0))
            self.CJ = np.zeros((self.rows.C.shape[0], 0))
            return
        eig = np.linalg.eigvalsh(self.Hr)
        self.rho = 0.0 if eig[0] > 1e-8 * self.scale else 1e-6 * self.scale
        G = self.Hr + self.rho * np.eye(nr)
        L = cholesky(G, lower=True)
        # J = L^{-T}, so G^{-1} = J J'
        self.J = solve_triangular(L, np.eye(nr), lower=True).T
        self.CJ = self.rows.C @ self.J

    # -- helpers ---------------------------------------------------------
    def _rhs(self, lb, ub, b_in=None):
        r = self.rows
        d = r.const.copy()
        m_in = self.p.A_in.shape[0]
        b = self.p.b_in if b_in is None else b_in
        is_in = r.kind == 0
        is_ub = r.kind == 1
        is_lb = r.kind == 2
        d[is_in] += b[r.index[is_in]]
        d[is_ub] += ub[r.index[is_ub]]
        d[is_lb] -= lb[r.index[is_lb]]
        del m_in
        return d

    def _lift(self, y):
        return self.xp + self.Z @ y

    def _reduce(self, x):
        return self.Z.T @ (np.asarray(x, dtype=float) - self.xp)

    # -- Goldfarb-Idnani -------------------------------------------------
    def _active_solve(self, A, a, d):
        """Minimizer of the regularized problem with rows ``A`` as equalities."""
        J = self.J
        Ja = J.T @ a
        if not A:
            return -J @ Ja, np.zeros(0)
        B = self.CJ[A]
        Q, R = qr(B.T, mode="economic")
        lam = -solve_triangular(R, solve_triangular(R.T, d[A] + B @ Ja, lower=True))
        y = -J @ (Ja + B.T @ lam)
        return y, lam

    def _independent(self, A):
        """Greedy subset of rows ``A`` with linearly independent ``CJ`` rows."""
        if not A:
            return []
        if len(A) <= self.CJ.shape[1]:
            sv = np.linalg.svd(self.CJ[A], compute_uv=False)
            if sv[-1] > 1e-9 * max(1.0, sv[0]):
                return list(A)
        keep = []
        basis = np.zeros((len(A), self.CJ.shape[1]))
        for i in A:
            w = self.CJ[i]
            Bk = basis[: len(keep)]
            res = w - Bk.T @ (Bk @ w)
            res -= Bk.T @ (Bk @ res)
            nrm = np.linalg.norm(res)
            if nrm > 1e-9 * max(1.0, np.linalg.norm(w)):
                basis[len(keep)] = res / nrm
                keep.append(i)
        return keep

    def _gi(self, a, d, active, budget):
        """Returns ``(status, y, lam_rows, active, iters, certificate)``."""
        m = self.CJ.shape[0]
        nr = self.CJ.shape[1]
        C = self.rows.C
        CJ = self.CJ
        inv_norm = self.rows.inv_norm
        J = self.J
        A = self._independent([i for i in active if not self._const_rows[i]])
        iters = 0
        # drop constraints with negative multipliers until dual feasible
        while True:
            y, lamA = self._active_solve(A, a, d)
            if not A or lamA.min() >= -1e-12:
                break
            A.pop(int(np.argmin(lamA)))
            iters += 1
        lam = np.zeros(m)
        lam[A] = np.maximum(lamA, 0.0)
        skip = self._const_rows.copy()
        skip[A] = True

        def factor(A):
            # full QR of CJ[A].T; the trailing columns of Q span the free space
            if not A:
                return np.eye(nr), np.zeros((nr, 0))
            return qr(CJ[A].T, check_finite=False)

        Q, R = factor(A)
        updates = 0
        while iters < budget:
            viol = (C @ y - d) * inv_norm
            viol[skip] = -np.inf
            p = int(np.argmax(viol)) if m else 0
            if m == 0 or viol[p] <= _ADD_TOL * max(1.0, abs(d[p]) * inv_norm[p]):
                return QpStatus.OPTIMAL, y, lam, A, iters, None
            t_p = 0.0
            w = CJ[p]
            ww = float(w @ w)
            while True:
                iters += 1
                k = len(A)
                qw_full = Q.T @ w
                w_perp = Q[:, k:] @ qw_full[k:]
                if k:
                    r = solve_triangular(R[:k, :k], qw_full[:k], check_finite=False)
                    Aarr = np.asarray(A)
                    pos_r = np.flatnonzero(r > 1e-12)
                else:
                    r = np.zeros(0)
                    pos_r = r.astype(int)
                t2, l_pos = np.inf, -1
                if pos_r.size:
                    ratios = lam[Aarr[pos_r]] / r[pos_r]
                    t2 = float(ratios.min())
                    ties = pos_r[ratios <= t2 + 1e-12 * abs(t2)]
                    l_pos = int(ties[np.argmin(Aarr[ties])])
                zc = float(w_perp @ w_perp)
                full = False
                if zc <= 1e-14 * max(1.0, ww):
                    # c_p lies in the span of the working set
                    if l_pos < 0:
                        ray = np.zeros(m)
                        ray[p] = 1.0
                        if A:
                            ray[Aarr] = -r
                        if -(ray @ d) * inv_norm[p] > FEAS_TOL:
                            return QpStatus.INFEASIBLE, y, lam, A, iters, ray
                        # degenerate: c_p is implied by the working set up to
                        # round-off, so treat it as satisfied and move on
                        lam[p] = t_p
                        skip[p] = True
                        break
                    t = t2
                else:
                    t1 = (C[p] @ y - d[p]) / zc
                    full = t1 <= t2
                    t = t1 if full else t2
                    y = y - t * (J @ w_perp)
                if A:
                    lam[Aarr] = np.maximum(lam[Aarr] - t * r, 0.0)
                t_p += t
                updates += 1
                if full:
                    lam[p] = t_p
                    A.append(p)
                    skip[p] = True
                    if updates % 64 == 0:
                        Q, R = factor(A)
                    else:
                        Q, R = qr_insert(Q, R, w, k, which="col", check_finite=False)
                    break
                dropped = A.pop(l_pos)
                lam[dropped] = 0.0
                skip[dropped] = self._const_rows[dropped]
                if updates % 64 == 0 or not A:
                    Q, R = factor(A)
                else:
                    Q, R = qr_delete(Q, R, l_pos, 1, which="col", check_finite=False)
                if iters >= budget:
                    break
        return QpStatus.ITER_LIMIT, y, lam, A, iters, None

    def _polish(self, y, A, d):
        """Exact KKT correction on working set ``A`` with the unregularized Hessian."""
        nr = y.size
        k = len(A)
        K = np.zeros((nr + k, nr + k))
        K[:nr, :nr] = self.Hr
        if k:
            CA = self.rows.C[A]
            K[:nr, nr:] = CA.T
            K[nr:, :nr] = CA
        rhs = np.zeros(nr + k)
        rhs[:nr] = -(self.Hr @ y + self.gr)
        if k:
            rhs[nr:] = d[A] - self.rows.C[A] @ y
        try:
            sol = np.linalg.solve(K, rhs)
            if not np.all(np.isfinite(sol)) or (
                np.linalg.norm(K @ sol - rhs) > 1e-9 * (1.0 + np.linalg.norm(rhs))
            ):
                raise np.linalg.LinAlgError
        except np.linalg.LinAlgError:
            sol = np.linalg.lstsq(K, rhs, rcond=1e-13)[0]
        y2 = y + sol[:nr]
        lamA = sol[nr:]
        return y2, lamA

    def _kkt_ok(self, y, A, lamA, d):
        C = self.rows.C
        if lamA.size and lamA.min() < -1e-9 * self.scale:
            return False
        if C.shape[0]:
            viol = (C @ y - d) * np.where(self._const_rows, 1.0, self.rows.inv_norm)
            viol[self._const_rows] = -np.inf
            if viol.max(initial=-np.inf) > FEAS_TOL * 1e-2:
                return False
        stat = self.Hr @ y + self.gr
        if A:
            stat = stat + C[A].T @ lamA
        return np.linalg.norm(stat, np.inf) <= 1e-9 * max(self.scale, np.abs(self.gr).max(initial=1.0))

    def _is_recession(self, dy):
        """True if ``dy`` is a feasible direction of unbounded descent."""
        nrm = np.linalg.norm(dy)
        if nrm == 0.0:
            return False
        u = dy / nrm
        if np.linalg.norm(self.Hr @ u, np.inf) > 1e-9 * self.scale:
            return False
        if self.gr @ u >= -1e-9 * max(1.0, np.linalg.norm(self.gr)):
            return False
        C = self.rows.C
        return not C.shape[0] or (C @ u).max() <= 1e-9

    # -- public ----------------------------------------------------------
    def solve(self, lb=None, ub=None, warm_start=None, b_in=None):
        p = self.p
        n = p.n
        lb = p.lb if lb is None else np.asarray(lb, dtype=float)
        ub = p.ub if ub is None else np.asarray(ub, dtype=float)
        if np.any(np.isfinite(lb) & ~self._lb_finite) or np.any(np.isfinite(ub) & ~self._ub_finite):
            raise ValueError("bounds infinite at construction must remain infinite")
        if np.any(lb > ub):
            j = int(np.flatnonzero(lb > ub)[0])
            return self._failed(QpStatus.INFEASIBLE, {"bound_pair": j, "lb": lb[j], "ub": ub[j]})
        if self.eq_infeasible is not None:
            return self._failed(QpStatus.INFEASIBLE, {"equality_residual": self.eq_infeasible})
        d = self._rhs(lb, ub, b_in)
        if np.any(self._const_rows):
            bad = self._const_rows & (d < -FEAS_TOL * np.maximum(1.0, np.abs(d)))
            if np.any(bad):
                i = int(np.flatnonzero(bad)[0])
                return self._failed(QpStatus.INFEASIBLE, {"fixed_row": i, "slack": d[i]})
        nr = self.Z.shape[1]
        active, y0 = [], np.zeros(nr)
        if warm_start is not None:
            if isinstance(warm_start, QpSolution):
                active = [i for i in warm_start.working_set if i < self.rows.C.shape[0]]
                if warm_start.x is not None and warm_start.x.shape == (n,):
                    y0 = self._reduce(warm_start.x)
            else:
                y0 = self._reduce(warm_start)
        budget = self.max_iter
        total = 0
        if self.rho == 0.0:
            status, y, lam, A, it, cert = self._gi(self.gr, d, active, budget)
            total += it
            if status == QpStatus.OPTIMAL and A:
                y2, lamA = self._polish(y, A, d)
                if self._kkt_ok(y2, A, lamA, d):
                    y = y2
                    lam = np.zeros_like(lam)
                    lam[A] = np.maximum(lamA, 0.0)
            return self._finish(status, y, lam, A, total, cert, lb, ub, d)
        yk = y0
        A = list(active)
        for _ in range(200):
            a = self.gr - self.rho * yk
            status, y, lam, A, it, cert = self._gi(a, d, A, budget - total)
            total += it
            if status != QpStatus.OPTIMAL:
                return self._finish(status, y, lam, A, total, cert, lb, ub, d)
            y2, lamA = self._polish(y, A, d)
            if self._kkt_ok(y2, A, lamA, d):
                lam = np.zeros_like(lam)
                lam[A] = np.maximum(lamA, 0.0)
                return self._finish(status, y2, lam, A, total, None, lb, ub, d)
            step = np.linalg.norm(y - yk, np.inf)
            if self.rho * step <= 1e-10 * max(1.0, np.abs(self.gr).max(initial=1.0)):
                return self._finish(status, y, lam, A, total, None, lb, ub, d)
            if self._is_recession(y - yk):
                return self._finish(QpStatus.UNBOUNDED, y, lam, A, total, y - yk, lb, ub, d)
            yk = y
        return self._finish(QpStatus.ITER_LIMIT, y, lam, A, total, None, lb, ub, d)

    def _failed(self, status, certificate):
        p = self.p
        return QpSolution(
            x=None,
            lam=np.zeros(p.A_in.shape[0]),
            nu=np.zeros(p.A_eq.shape[0]),
            objective=np.inf,
            status=status,
            lam_lb=np.zeros(p.n),
            lam_ub=np.zeros(p.n),
            certificate=certificate,
        )

    def _finish(self, status, y, lam_rows, A, iters, cert, lb, ub, d):
        p = self.p
        r = self.rows
        x = self._lift(y)
        lam = np.zeros(p.A_in.shape[0])
        lam_ub = np.zeros(p.n)
        lam_lb = np.zeros(p.n)
        for kind, target in ((0, lam), (1, lam_ub), (2, lam_lb)):
            sel = r.kind == kind
            np.add.at(target, r.index[sel], lam_rows[sel])
        if status == QpStatus.UNBOUNDED:
            return QpSolution(
                x=x, lam=lam, nu=np.zeros(p.A_eq.shape[0]), objective=-np.inf, status=status,
                lam_lb=lam_lb, lam_ub=lam_ub, iterations=iters, working_set=tuple(A),
                certificate={"direction": self.Z @ cert},
            )
        if status == QpStatus.INFEASIBLE:
            return QpSolution(
                x=None, lam=lam, nu=np.zeros(p.A_eq.shape[0]), objective=np.inf, status=status,
                lam_lb=lam_lb, lam_ub=lam_ub, iterations=iters, working_set=tuple(A),
                certificate={"ray": cert, "rhs": float(cert @ d) if cert is not None else None},
            )
        grad = p.H @ x + p.f + p.A_in.T @ lam + lam_ub - lam_lb
        if p.A_eq.shape[0]:
            if self._eq_pinv is None:
                self._eq_pinv = np.linalg.pinv(p.A_eq.T)
            nu = self._eq_pinv @ -grad
        else:
            nu = np.zeros(0)
        obj = p.objective(x)
        return QpSolution(
            x=x, lam=lam, nu=nu, objective=obj, status=status, lam_lb=lam_lb, lam_ub=lam_ub,
            iterations=iters, working_set=tuple(A),
        )


def solve_qp(problem, warm_start=None):
    """Solve ``problem``; ``warm_start`` is a previous :class:`QpSolution` or a primal guess."""
    return ActiveSetQP(problem).solve(warm_start=warm_start)


def kkt_residuals(problem, sol):
    """``(r_stat, r_prim, r_dual, r_comp)`` as Euclidean norms."""
    p = problem
    x = np.asarray(sol.x, dtype=float)
    lam = np.zeros(p.A_in.shape[0]) if sol.lam is None else np.asarray(sol.lam, dtype=float)
    nu = np.zeros(p.A_eq.shape[0]) if sol.nu is None else np.asarray(sol.nu, dtype=float)
    lam_lb = np.zeros(p.n) if sol.lam_lb is None else np.asarray(sol.lam_lb, dtype=float)
    lam_ub = np.zeros(p.n) if sol.lam_ub is None else np.asarray(sol.lam_ub, dtype=float)
    stat = p.H @ x + p.f + p.A_in.T @ lam + p.A_eq.T @ nu + lam_ub - lam_lb
    g_in = p.A_in @ x - p.b_in
    with np.errstate(invalid="ignore"):
        g_ub = np.where(np.isfinite(p.ub), x - p.ub, -np.inf)
        g_lb = np.where(np.isfinite(p.lb), p.lb - x, -np.inf)
    prim = np.concatenate([p.A_eq @ x - p.b_eq, np.maximum(g_in, 0), np.maximum(g_ub, 0), np.maximum(g_lb, 0)])
    dual = np.minimum(np.concatenate([lam, lam_lb, lam_ub]), 0.0)
    comp = np.concatenate([
        lam * g_in,
        np.where(np.isfinite(p.ub), lam_ub * np.where(np.isfinite(g_ub), g_ub, 0.0), lam_ub),
        np.where(np.isfinite(p.lb), lam_lb * np.where(np.isfinite(g_lb), g_lb, 0.0), lam_lb),
    ])
    return (
        float(np.linalg.norm(stat)),
        float(np.linalg.norm(prim)),
        float(np.linalg.norm(dual)),
        float(np.linalg.norm(comp)),
    )

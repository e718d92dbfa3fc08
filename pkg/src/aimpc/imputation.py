"""Online imputation of the NV's cost weights from its observed states.

The NV is assumed to (approximately) solve a forward problem over the last
``r`` observed steps::

    min  alpha_s f_s + alpha_v f_v + alpha_a f_a
    s.t. s(i+1) = s(i) + Ts v(i),  v(i+1) = v(i) + Ts a(i)
         a_min <= a(i) <= a_max

The acceleration row of the dynamics is the only one containing the NV's
control, so it is left out; the fit then needs state data only. The weights
and duals are found by minimizing the squared stationarity and
complementarity residuals, a convex QP in ``(alpha, lambda, nu)``.
"""

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator

from ._validation import check_finite_array, check_simplex, project_simplex
from .dynamics import NvState
from .planner import AdmissibilityConfig, WeightVector
from .qp import QpProblem, QpStatus, solve_qp

BASIS = ("s", "v", "a")


class WindowTooShort(ValueError):
    """Fewer than two samples: no step to fit."""


@dataclass(frozen=True)
class TrajectoryWindow:
    """``r + 1`` consecutive NV states with the NV's references at the same times."""

    states: np.ndarray
    s_ref: np.ndarray
    v_ref: float
    Ts: float = 0.4

    def __post_init__(self):
        st = np.array([x.as_array() if isinstance(x, NvState) else x for x in self.states], dtype=float)
        st = check_finite_array(st, "states", ndim=2)
        if st.shape[1] != 3:
            raise ValueError("states must be rows of [s, v, a]")
        if st.shape[0] < 2:
            raise WindowTooShort(f"need at least 2 samples, got {st.shape[0]}")
        s_ref = check_finite_array(self.s_ref, "s_ref", shape=(st.shape[0],))
        if not self.Ts > 0:
            raise ValueError("Ts must be positive")
        object.__setattr__(self, "states", st)
        object.__setattr__(self, "s_ref", s_ref)

    @property
    def r(self):
        return self.states.shape[0] - 1


@dataclass
class FitProblem:
    """Gradient data of the fitted forward problem.

    Rows index the window's decision states ``x(1..r)`` as
    ``[s(1), v(1), a(1), s(2), ...]``. ``grad_f`` has one column per basis
    term, ``grad_h`` one per equality row, ``grad_g`` one per inequality.
    """

    grad_f: np.ndarray
    grad_h: np.ndarray
    h: np.ndarray
    grad_g: np.ndarray
    g: np.ndarray


@dataclass
class ImputationResult:
    alpha: WeightVector
    residual_norm: float
    lam: np.ndarray
    nu: np.ndarray
    ok: bool = True


def build_fit_problem(window, admissibility=None):
    adm = admissibility or AdmissibilityConfig()
    X = window.states
    r, Ts = window.r, window.Ts
    nvar = 3 * r

    def col(k, i):
        # state component k at window step i (1..r)
        return 3 * (i - 1) + k

    grad_f = np.zeros((nvar, 3))
    for i in range(1, r + 1):
        grad_f[col(0, i), 0] = 2.0 * (X[i, 0] - window.s_ref[i])
        grad_f[col(1, i), 1] = 2.0 * (X[i, 1] - window.v_ref)
        grad_f[col(2, i), 2] = 2.0 * X[i, 2]

    grad_h = np.zeros((nvar, 2 * r))
    h = np.zeros(2 * r)
    for i in range(r):
        j_s, j_v = 2 * i, 2 * i + 1
        h[j_s] = X[i + 1, 0] - X[i, 0] - Ts * X[i, 1]
        h[j_v] = X[i + 1, 1] - X[i, 1] - Ts * X[i, 2]
        grad_h[col(0, i + 1), j_s] = 1.0
        grad_h[col(1, i + 1), j_v] = 1.0
        if i >= 1:
            grad_h[col(0, i), j_s] = -1.0
            grad_h[col(1, i), j_s] = -Ts
            grad_h[col(1, i), j_v] = -1.0
            grad_h[col(2, i), j_v] = -Ts

    a_max = float(adm.u_max(X[:, 1].mean()))
    grad_g = np.zeros((nvar, 2 * r))
    g = np.zeros(2 * r)
    for i in range(1, r + 1):
        # a - a_max <= 0 and a_min - a <= 0
        grad_g[col(2, i), 2 * (i - 1)] = 1.0
        grad_g[col(2, i), 2 * (i - 1) + 1] = -1.0
        g[2 * (i - 1)] = X[i, 2] - a_max
        g[2 * (i - 1) + 1] = adm.u_a_min - X[i, 2]
    return FitProblem(grad_f, grad_h, h, grad_g, g)


def stationarity_residual(alpha, lam, nu, fit):
    """Gradient of the Lagrangian with respect to every decision state of the window."""
    alpha = np.asarray(alpha.as_array() if isinstance(alpha, WeightVector) else alpha, dtype=float)
    return fit.grad_f @ alpha + fit.grad_g @ np.asarray(lam, float) + fit.grad_h @ np.asarray(nu, float)


def imputation_objective(alpha, lam, nu, fit, alpha_prev=None, eps=1e-3):
    alpha = np.asarray(alpha, dtype=float)
    rs = stationarity_residual(alpha, lam, nu, fit)
    rc = np.asarray(lam) * fit.g
    val = rs @ rs + rc @ rc
    if alpha_prev is not None:
        dv = alpha - np.asarray(alpha_prev, float)
        val += eps * dv @ dv
    return float(val)


def impute_weights(window, alpha_prev=None, eps=1e-3, admissibility=None, slack_tol=1e-3):
    """Weights on the simplex that make ``window`` closest to KKT-optimal.

    Inequalities with slack above ``slack_tol`` in the data are inactive, so
    their multipliers are fixed at zero.
    """
    prev = WeightVector.uniform() if alpha_prev is None else alpha_prev
    prev_arr = check_simplex(prev.as_array() if isinstance(prev, WeightVector) else prev, "alpha_prev")
    fit = build_fit_problem(window, admissibility)
    n_g, n_h = fit.g.size, fit.h.size
    G = np.hstack([fit.grad_f, fit.grad_g, fit.grad_h])
    n = G.shape[1]
    H = 2.0 * G.T @ G
    ig = slice(3, 3 + n_g)
    H[ig, ig] += 2.0 * np.diag(fit.g**2)
    H[:3, :3] += 2.0 * eps * np.eye(3)
    f = np.zeros(n)
    f[:3] = -2.0 * eps * prev_arr
    c = eps * prev_arr @ prev_arr
    lb = np.full(n, -np.inf)
    ub = np.full(n, np.inf)
    lb[:3 + n_g] = 0.0
    ub[3:3 + n_g][-fit.g > slack_tol] = 0.0
    prob = QpProblem(H=H, f=f, A_eq=np.r_[np.ones(3), np.zeros(n - 3)][None], b_eq=[1.0],
                     lb=lb, ub=ub, c=c)
    try:
        sol = solve_qp(prob)
    except (ValueError, np.linalg.LinAlgError):
        sol = None
    if sol is None or sol.status != QpStatus.OPTIMAL:
        return ImputationResult(WeightVector.from_array(prev_arr), np.nan, np.zeros(n_g), np.zeros(n_h), ok=False)
    alpha = project_simplex(np.clip(sol.x[:3], 0.0, None))
    lam = np.clip(sol.x[3:3 + n_g], 0.0, None)
    nu = sol.x[3 + n_g:]
    res = np.sqrt(max(imputation_objective(alpha, lam, nu, fit), 0.0))
    return ImputationResult(WeightVector.from_array(alpha), float(res), lam, nu)


class WeightImputer(BaseEstimator):
    """Sliding-window imputer; ``fit`` consumes a state sequence window by window."""

    def __init__(self, r=3, eps=1e-3, Ts=0.4, admissibility=None):
        self.r = r
        self.eps = eps
        self.Ts = Ts
        self.admissibility = admissibility

    def fit(self, states, s_ref, v_ref):
        """Run the imputer on every full window of ``states`` in order."""
        states = check_finite_array(states, "states", ndim=2)
        s_ref = check_finite_array(s_ref, "s_ref", shape=(states.shape[0],))
        self.alpha_ = WeightVector.uniform()
        self.history_ = []
        for k in range(self.r, states.shape[0]):
            self.update(states[k - self.r:k + 1], s_ref[k - self.r:k + 1], v_ref)
        return self

    def update(self, states, s_ref, v_ref):
        if not hasattr(self, "alpha_"):
            self.alpha_ = WeightVector.uniform()
            self.history_ = []
        window = TrajectoryWindow(states, s_ref, v_ref, self.Ts)
        res = impute_weights(window, self.alpha_, self.eps, self.admissibility)
        self.alpha_ = res.alpha
        self.history_.append(res)
        return res

    def predict(self, X=None):
        return self.alpha_.as_array()

"""Joint ego + NV mixed-integer MPC and its non-interactive baselines.

The decision vector holds, for every horizon step ``i = 0..N-1``, the block
``[u_a, u_l, u_nv, mu, beta, gamma]`` followed by the stacked predicted ego
states ``x_ego(1..N)`` and NV states ``x_nv(1..N)``. The binaries of block
``i`` act on the predicted states at step ``i + 1``:

* ``mu`` flags the ego occupying the NV's lane (forced by ``l > l_enc``),
* ``beta`` picks ego ahead (1) or behind (0) the NV when ``mu = 1``,
* ``gamma`` flags the ego as merged (``l >= l_merged``); the ego may only
  pass the ramp terminus with ``gamma = 1``.

In the frozen (baseline) form the NV columns are dropped and the collision
rows act on a fixed predicted NV trajectory.
"""

import time
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator

from ._validation import check_finite_array, check_nonnegative, check_simplex
from .dynamics import EgoControl, EgoState, ModelParams, NvState, ego_model, nv_model
from .miqp import MiqpProblem, MiqpStatus, solve_miqp
from .qp import QpProblem

FEAS_TOL = 1e-6
# closed-loop states drift from the plan by small amounts; the geometry check
# only rejects clear violations and lets the MIQP decide the rest
GEOMETRY_TOL = 0.05


class InfeasibleGeometry(ValueError):
    """The current state already violates a hard constraint of the planner."""


class PlanInfeasible(RuntimeError):
    """The mixed-integer problem has no feasible assignment."""

    def __init__(self, message, solution=None):
        super().__init__(message)
        self.solution = solution


@dataclass(frozen=True)
class EgoWeights:
    q_s: float = 0.1
    q_v: float = 1.0
    q_a: float = 0.5
    q_l: float = 2.0
    q_ua: float = 0.5

    def __post_init__(self):
        for name in ("q_s", "q_v", "q_a", "q_l", "q_ua"):
            check_nonnegative(getattr(self, name), name)


@dataclass(frozen=True)
class WeightVector:
    alpha_s: float
    alpha_v: float
    alpha_a: float

    def __post_init__(self):
        check_simplex(self.as_array(), "alpha")

    def as_array(self):
        return np.array([self.alpha_s, self.alpha_v, self.alpha_a], dtype=float)

    @classmethod
    def from_array(cls, w):
        w = np.asarray(w, dtype=float)
        return cls(float(w[0]), float(w[1]), float(w[2]))

    @classmethod
    def uniform(cls):
        return cls(1 / 3, 1 / 3, 1 / 3)


@dataclass(frozen=True)
class ReferenceSignal:
    """Reference trajectories over steps ``0..N`` for both vehicles."""

    v_ref: float
    s_ref: np.ndarray
    v_ref_nv: float
    s_ref_nv: np.ndarray
    l_ref: float = 1.0
    Ts: float = 0.4

    def __post_init__(self):
        s = check_finite_array(self.s_ref, "s_ref", ndim=1)
        s_nv = check_finite_array(self.s_ref_nv, "s_ref_nv", ndim=1)
        if s.shape != s_nv.shape:
            raise ValueError("s_ref and s_ref_nv must have the same length")
        for name, arr, v in (("s_ref", s, self.v_ref), ("s_ref_nv", s_nv, self.v_ref_nv)):
            if arr.size > 1 and not np.allclose(np.diff(arr), v * self.Ts, atol=1e-9, rtol=0):
                raise ValueError(f"{name} must advance by v_ref*Ts per step")
        object.__setattr__(self, "s_ref", s)
        object.__setattr__(self, "s_ref_nv", s_nv)

    @property
    def N(self):
        return self.s_ref.size - 1

    @classmethod
    def anchored(cls, s_ego, v_ref, s_nv_ref0, v_ref_nv, N, Ts, l_ref=1.0):
        """Ego schedule re-anchored at ``s_ego``; NV schedule starting at ``s_nv_ref0``."""
        i = np.arange(N + 1)
        return cls(v_ref=float(v_ref), s_ref=s_ego + v_ref * Ts * i,
                   v_ref_nv=float(v_ref_nv), s_ref_nv=s_nv_ref0 + v_ref_nv * Ts * i,
                   l_ref=float(l_ref), Ts=float(Ts))


@dataclass(frozen=True)
class SafetyConfig:
    L: float = 5.0
    gap: float = 2.5
    M: float = 10000.0
    s_ramp_end: float = 80.0
    l_enc: float = 0.3
    l_merged: float = 0.8
    s_merge_start: float = 0.0
    M_l: float = 2.0

    def __post_init__(self):
        if not 0 < self.l_enc <= self.l_merged <= 1:
            raise ValueError("need 0 < l_enc <= l_merged <= 1")
        for name in ("L", "gap", "M", "M_l"):
            check_nonnegative(getattr(self, name), name)
        if self.M_l < 1.0 + self.l_merged:
            raise ValueError("M_l too small to deactivate the lane rows")

    @property
    def clearance(self):
        return self.L + self.gap


@dataclass(frozen=True)
class AdmissibilityConfig:
    u_a_min: float = -4.0
    m1: float = -0.1
    b1: float = 4.0
    m2: float = -0.4
    b2: float = 8.0

    def u_max(self, v):
        """Velocity-dependent acceleration cap."""
        return np.minimum(self.m1 * np.asarray(v) + self.b1, self.m2 * np.asarray(v) + self.b2)

    def admissible(self, u, v, tol=1e-8):
        return bool(u >= self.u_a_min - tol and u <= self.u_max(v) + tol)


@dataclass(frozen=True)
class HorizonConfig:
    N: int = 15
    Ts: float = 0.4

    def __post_init__(self):
        if int(self.N) != self.N or self.N < 1:
            raise ValueError("N must be a positive integer")
        if not self.Ts > 0:
            raise ValueError("Ts must be positive")


@dataclass(frozen=True)
class PlannerConfig:
    safety: SafetyConfig = field(default_factory=SafetyConfig)
    admissibility: AdmissibilityConfig = field(default_factory=AdmissibilityConfig)
    horizon: HorizonConfig = field(default_factory=HorizonConfig)
    ego_weights: EgoWeights = field(default_factory=EgoWeights)
    model: ModelParams = field(default_factory=ModelParams)
    terminal_weight: float = 1.0
    # curvature on otherwise cost-free columns (binaries, u_l, u_nv) keeps H definite
    regularization: float = 1e-6
    node_limit: int = 20000
    rel_gap: float = 1e-6


_BLOCK = ("u_a", "u_l", "u_nv", "mu", "beta", "gamma")
_BLOCK_FROZEN = ("u_a", "u_l", "mu", "beta", "gamma")


@dataclass(frozen=True)
class Layout:
    """Column indices of the stacked decision vector."""

    N: int
    joint: bool

    @property
    def block(self):
        return _BLOCK if self.joint else _BLOCK_FROZEN

    @property
    def n_block(self):
        return len(self.block)

    @property
    def ego0(self):
        return self.N * self.n_block

    @property
    def nv0(self):
        return self.ego0 + 5 * self.N

    @property
    def n(self):
        return self.nv0 + (3 * self.N if self.joint else 0)

    def var(self, name, i):
        return i * self.n_block + self.block.index(name)

    def vars(self, name):
        return np.array([self.var(name, i) for i in range(self.N)])

    def ego(self, comp, i):
        """Column of ego state component ``comp`` at step ``i >= 1``."""
        return self.ego0 + 5 * (i - 1) + comp

    def nv(self, comp, i):
        return self.nv0 + 3 * (i - 1) + comp

    def integer_set(self):
        names = ("u_l", "mu", "beta", "gamma")
        return tuple(sorted(self.var(nm, i) for nm in names for i in range(self.N)))


@dataclass
class JointProblem(MiqpProblem):
    layout: Layout = None
    x_ego0: np.ndarray = None
    x_nv0: np.ndarray = None
    nv_prediction: np.ndarray = None


@dataclass
class PlanResult:
    u_ego_first: EgoControl
    ego_trajectory: np.ndarray
    nv_trajectory: np.ndarray
    mu: np.ndarray
    beta: np.ndarray
    gamma: np.ndarray
    u_a: np.ndarray
    u_l: np.ndarray
    u_nv: np.ndarray
    objective: float
    status: MiqpStatus
    nodes: int
    gap: float
    solve_time: float
    x: np.ndarray = None


class _Rows:
    def __init__(self, n):
        self.n = n
        self.A, self.b = [], []

    def le(self, coefs, rhs):
        """Append ``sum(c * x[j]) <= rhs``."""
        row = np.zeros(self.n)
        for j, c in coefs:
            row[j] += c
        self.A.append(row)
        self.b.append(float(rhs))

    def arrays(self):
        if not self.A:
            return np.zeros((0, self.n)), np.zeros(0)
        return np.array(self.A), np.array(self.b)


def _as_array(x, cls):
    return x.as_array() if isinstance(x, cls) else np.asarray(x, dtype=float)


def _speed_bound(v, a, adm):
    """Upper bound on reachable speed under the admissibility caps."""
    # the cap reaches zero at v_stop; the acceleration lag adds at most tau * a
    v_stop = min(-adm.b1 / adm.m1 if adm.m1 < 0 else np.inf, -adm.b2 / adm.m2 if adm.m2 < 0 else np.inf)
    a_hi = max(a, float(adm.u_max(v)), 0.0)
    return max(v, v_stop) + a_hi + 1.0


def check_geometry(x_ego, x_nv, cfg):
    """Raise :class:`InfeasibleGeometry` if the current state breaks a hard rule."""
    sf = cfg.safety
    s_e, v_e, _, l_e, _ = x_ego
    if l_e > sf.l_enc + FEAS_TOL and x_nv is not None and abs(s_e - x_nv[0]) < sf.clearance - GEOMETRY_TOL:
        raise InfeasibleGeometry(
            f"ego encroaches (l={l_e:.3f}) within {abs(s_e - x_nv[0]):.2f} m of the NV")
    if s_e > sf.s_ramp_end + GEOMETRY_TOL and l_e < sf.l_merged - GEOMETRY_TOL:
        raise InfeasibleGeometry(f"ego is past the ramp end (s={s_e:.2f}) without having merged")
    if v_e < -FEAS_TOL:
        raise InfeasibleGeometry("negative ego speed")


def build_joint_problem(x_ego, x_nv, alpha, refs, cfg=None, nv_prediction=None):
    """Assemble the MIQP for one planning step.

    With ``nv_prediction`` (an ``(N, 3)`` array of NV states at steps
    ``1..N``) the NV is frozen and no NV columns are created.
    """
    cfg = cfg or PlannerConfig()
    N, Ts = cfg.horizon.N, cfg.horizon.Ts
    sf, adm, w = cfg.safety, cfg.admissibility, cfg.ego_weights
    xe0 = check_finite_array(_as_array(x_ego, EgoState), "x_ego", shape=(5,))
    xn0 = check_finite_array(_as_array(x_nv, NvState), "x_nv", shape=(3,))
    if refs.N != N:
        raise ValueError(f"references cover {refs.N} steps, horizon is {N}")
    joint = nv_prediction is None
    if joint:
        alpha = alpha if isinstance(alpha, WeightVector) else WeightVector.from_array(alpha)
    else:
        nv_prediction = check_finite_array(nv_prediction, "nv_prediction", shape=(N, 3))
    check_geometry(xe0, xn0, cfg)

    lay = Layout(N, joint)
    n = lay.n
    em = ego_model(Ts, cfg.model)
    nm = nv_model(Ts, cfg.model.tau)

    # cost
    H = np.zeros((n, n))
    f = np.zeros(n)
    c = 0.0

    def track(j, weight, ref=0.0):
        nonlocal c
        H[j, j] += 2.0 * weight
        f[j] -= 2.0 * weight * ref
        c += weight * ref * ref

    for i in range(1, N + 1):
        tw = cfg.terminal_weight if i == N else 1.0
        track(lay.ego(0, i), tw * w.q_s, refs.s_ref[i])
        track(lay.ego(1, i), tw * w.q_v, refs.v_ref)
        track(lay.ego(2, i), tw * w.q_a)
        track(lay.ego(3, i), tw * w.q_l, refs.l_ref)
        if joint:
            track(lay.nv(0, i), tw * alpha.alpha_s, refs.s_ref_nv[i])
            track(lay.nv(1, i), tw * alpha.alpha_v, refs.v_ref_nv)
            track(lay.nv(2, i), tw * alpha.alpha_a)
    for i in range(N):
        track(lay.var("u_a", i), w.q_ua)
    reg_names = ("u_l", "u_nv", "mu", "beta", "gamma") if joint else ("u_l", "mu", "beta", "gamma")
    for nm_ in reg_names:
        for j in lay.vars(nm_):
            H[j, j] += cfg.regularization

    # dynamics: x(i+1) - A x(i) - B u(i) = 0
    n_eq = 5 * N + (3 * N if joint else 0) + (N - 1)
    A_eq = np.zeros((n_eq, n))
    b_eq = np.zeros(n_eq)
    r = 0
    for i in range(N):
        for k in range(5):
            A_eq[r, lay.ego(k, i + 1)] = 1.0
            if i == 0:
                b_eq[r] = em.A_d[k] @ xe0
            else:
                for kk in range(5):
                    A_eq[r, lay.ego(kk, i)] -= em.A_d[k, kk]
            A_eq[r, lay.var("u_a", i)] -= em.B_d[k, 0]
            A_eq[r, lay.var("u_l", i)] -= em.B_d[k, 1]
            r += 1
        if joint:
            for k in range(3):
                A_eq[r, lay.nv(k, i + 1)] = 1.0
                if i == 0:
                    b_eq[r] = nm.A_d[k] @ xn0
                else:
                    for kk in range(3):
                        A_eq[r, lay.nv(kk, i)] -= nm.A_d[k, kk]
                A_eq[r, lay.var("u_nv", i)] -= nm.B_d[k, 0]
                r += 1
    # one front/rear order per horizon: passing inside a shared lane is not possible anyway
    for i in range(N - 1):
        A_eq[r, lay.var("beta", i)] = 1.0
        A_eq[r, lay.var("beta", i + 1)] = -1.0
        r += 1

    rows = _Rows(n)
    Ml, D = sf.M_l, sf.clearance
    # position envelopes over the horizon give the smallest valid big-M per step
    t = Ts * np.arange(1, N + 1)
    se_hi = xe0[0] + _speed_bound(xe0[1], xe0[2], adm) * t
    if joint:
        sn_lo, sn_hi = np.full(N, xn0[0]), xn0[0] + _speed_bound(xn0[1], xn0[2], adm) * t
    else:
        sn_lo = sn_hi = nv_prediction[:, 0]
    for i in range(N):
        se, le = lay.ego(0, i + 1), lay.ego(3, i + 1)
        spread = max(se_hi[i] - sn_lo[i], sn_hi[i] - xe0[0])
        M = min(sf.M, spread + D + 1.0)
        M_start = min(sf.M, max(sf.s_merge_start - xe0[0], 0.0) + 1.0)
        M_end = min(sf.M, max(se_hi[i] - sf.s_ramp_end, 0.0) + 1.0)
        mu, beta, gam = lay.var("mu", i), lay.var("beta", i), lay.var("gamma", i)
        if joint:
            sn_col, sn_const = lay.nv(0, i + 1), 0.0
        else:
            sn_col, sn_const = None, nv_prediction[i, 0]
        nv_terms = [(sn_col, 1.0)] if sn_col is not None else []
        neg_nv = [(sn_col, -1.0)] if sn_col is not None else []
        # ahead:  s_e - s_n - M beta - M mu >= D - 2M
        rows.le([(se, -1.0), (beta, M), (mu, M)] + nv_terms, 2 * M - D - sn_const)
        # behind: s_n - s_e + M beta - M mu >= D - M
        rows.le([(se, 1.0), (beta, -M), (mu, M)] + neg_nv, M - D + sn_const)
        # encroachment forces mu
        rows.le([(le, 1.0), (mu, -Ml)], sf.l_enc)
        # no encroaching before the merge window opens
        rows.le([(se, -1.0), (mu, M_start)], M_start - sf.s_merge_start)
        # ramp end only when merged
        rows.le([(se, 1.0), (gam, -M_end)], sf.s_ramp_end)
        rows.le([(le, -1.0), (gam, Ml)], Ml - sf.l_merged)
        # no reversing
        rows.le([(lay.ego(1, i + 1), -1.0)], 0.0)
        if joint:
            rows.le([(lay.nv(1, i + 1), -1.0)], 0.0)
        # admissibility, velocity of the step the command is applied at
        for m_, b_ in ((adm.m1, adm.b1), (adm.m2, adm.b2)):
            ua = lay.var("u_a", i)
            if i == 0:
                rows.le([(ua, 1.0)], m_ * xe0[1] + b_)
            else:
                rows.le([(ua, 1.0), (lay.ego(1, i), -m_)], b_)
            if joint:
                un = lay.var("u_nv", i)
                if i == 0:
                    rows.le([(un, 1.0)], m_ * xn0[1] + b_)
                else:
                    rows.le([(un, 1.0), (lay.nv(1, i), -m_)], b_)
    # monotone lane logic inside one horizon
    for i in range(N - 1):
        for nm_ in ("u_l", "mu", "gamma"):
            rows.le([(lay.var(nm_, i), 1.0), (lay.var(nm_, i + 1), -1.0)], 0.0)
    A_in, b_in = rows.arrays()

    lb = np.full(n, -np.inf)
    ub = np.full(n, np.inf)
    for nm_ in ("u_l", "mu", "beta", "gamma"):
        lb[lay.vars(nm_)] = 0.0
        ub[lay.vars(nm_)] = 1.0
    lb[lay.vars("u_a")] = adm.u_a_min
    if joint:
        lb[lay.vars("u_nv")] = adm.u_a_min

    base = QpProblem(H=H, f=f, A_eq=A_eq, b_eq=b_eq, A_in=A_in, b_in=b_in, lb=lb, ub=ub, c=c)
    return JointProblem(base=base, integer_set=lay.integer_set(), layout=lay,
                        x_ego0=xe0, x_nv0=xn0, nv_prediction=nv_prediction)


def shift_solution(problem, x):
    """Previous optimal vector advanced by one step (last block repeated)."""
    lay = problem.layout
    x = np.asarray(x, dtype=float)
    out = x.copy()
    nb = lay.n_block
    blocks = x[: lay.ego0].reshape(lay.N, nb)
    out[: lay.ego0] = np.vstack([blocks[1:], blocks[-1:]]).ravel()
    ego = x[lay.ego0: lay.nv0].reshape(lay.N, 5)
    out[lay.ego0: lay.nv0] = np.vstack([ego[1:], ego[-1:]]).ravel()
    if lay.joint:
        nv = x[lay.nv0:].reshape(lay.N, 3)
        out[lay.nv0:] = np.vstack([nv[1:], nv[-1:]]).ravel()
    return out


def extract_plan(problem, sol, elapsed=0.0):
    lay = problem.layout
    x = sol.x
    ego = x[lay.ego0: lay.nv0].reshape(lay.N, 5)
    if lay.joint:
        nv = x[lay.nv0:].reshape(lay.N, 3)
        u_nv = x[lay.vars("u_nv")]
    else:
        nv = problem.nv_prediction.copy()
        u_nv = np.full(lay.N, np.nan)
    u_l = np.round(x[lay.vars("u_l")])
    u_a = x[lay.vars("u_a")]
    return PlanResult(
        u_ego_first=EgoControl(float(u_a[0]), int(u_l[0])),
        ego_trajectory=ego, nv_trajectory=nv,
        mu=np.round(x[lay.vars("mu")]), beta=np.round(x[lay.vars("beta")]),
        gamma=np.round(x[lay.vars("gamma")]),
        u_a=u_a, u_l=u_l, u_nv=u_nv,
        objective=float(sol.objective), status=sol.status, nodes=sol.nodes_explored,
        gap=float(sol.gap), solve_time=elapsed, x=x,
    )


def plan(x_ego, x_nv, alpha, refs, cfg=None, warm=None, nv_prediction=None):
    """Solve one receding-horizon step; ``warm`` is a previous :class:`PlanResult`."""
    cfg = cfg or PlannerConfig()
    problem = build_joint_problem(x_ego, x_nv, alpha, refs, cfg, nv_prediction)
    hint = None
    if warm is not None and warm.x is not None and warm.x.shape == (problem.layout.n,):
        hint = shift_solution(problem, warm.x)
    t0 = time.perf_counter()
    sol = solve_miqp(problem, incumbent_hint=hint, node_limit=cfg.node_limit, rel_gap=cfg.rel_gap)
    elapsed = time.perf_counter() - t0
    if sol.x is None:
        raise PlanInfeasible(f"planner MIQP returned {sol.status.value}", sol)
    return extract_plan(problem, sol, elapsed)


def baseline_predict(x_nv, mode, N, Ts=0.4):
    """Non-interactive NV prediction over steps ``1..N`` as an ``(N, 3)`` array.

    ``"cv"`` holds the observed speed with zero acceleration; ``"ca"`` holds the
    observed acceleration.
    """
    s, v, a = _as_array(x_nv, NvState)
    t = Ts * np.arange(1, N + 1)
    mode = mode.lower()
    if mode in ("cv", "constantvelocity", "constant_velocity"):
        return np.column_stack([s + v * t, np.full(N, v), np.zeros(N)])
    if mode in ("ca", "constantacceleration", "constant_acceleration"):
        return np.column_stack([s + v * t + 0.5 * a * t**2, v + a * t, np.full(N, a)])
    raise ValueError(f"unknown baseline mode {mode!r}")


class JointPlanner(BaseEstimator):
    """Receding-horizon wrapper that keeps the previous solution as warm start.

    ``prediction`` is ``"joint"`` for the interactive planner or ``"cv"`` /
    ``"ca"`` for the frozen-NV baselines.
    """

    def __init__(self, config=None, prediction="joint"):
        self.config = config
        self.prediction = prediction

    def reset(self):
        self.last_ = None
        return self

    def plan(self, x_ego, x_nv, alpha, refs):
        cfg = self.config or PlannerConfig()
        if self.prediction not in ("joint", "cv", "ca"):
            raise ValueError(f"unknown prediction {self.prediction!r}")
        pred = None
        if self.prediction != "joint":
            pred = baseline_predict(x_nv, self.prediction, cfg.horizon.N, cfg.horizon.Ts)
        result = plan(x_ego, x_nv, alpha, refs, cfg, warm=getattr(self, "last_", None),
                      nv_prediction=pred)
        self.last_ = result
        return result

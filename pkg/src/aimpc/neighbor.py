"""Simulated neighboring vehicle: a short-horizon MPC that avoids the ego.

The NV keeps outside an ellipse centred on the ego,
``(s_nv - s_ego)^2 / a^2 + (l_nv - l_ego)^2 / b^2 >= 1``. The constraint is
non-convex, so each control step replaces it by the supporting half-plane of
the ellipse along the ray towards the NV's previously predicted position.
The half-plane lies entirely outside the ellipse, so every accepted plan is
also feasible for the original constraint.
"""

from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator

from ._validation import check_finite_array, check_nonnegative, check_positive
from .dynamics import EgoState, NvControl, NvState, nv_model
from .planner import AdmissibilityConfig
from .qp import QpProblem, QpStatus, solve_qp


class DegenerateDirection(ValueError):
    """The relative position is the zero vector, so no ray is defined."""


@dataclass(frozen=True)
class NvTrueWeights:
    q_s: float = 0.0
    q_v: float = 1.0
    q_a: float = 0.0

    def __post_init__(self):
        for name in ("q_s", "q_v", "q_a"):
            check_nonnegative(getattr(self, name), name)

    def as_array(self):
        return np.array([self.q_s, self.q_v, self.q_a], dtype=float)


@dataclass(frozen=True)
class EllipseConfig:
    a: float = 12.0
    b: float = 0.9

    def __post_init__(self):
        check_positive(self.a, "a")
        check_positive(self.b, "b")

    def level(self, ds, dl):
        """Ellipse function; values >= 1 are outside."""
        return (np.asarray(ds) / self.a) ** 2 + (np.asarray(dl) / self.b) ** 2


@dataclass(frozen=True)
class NvMpcConfig:
    T: int = 3
    Ts: float = 0.4
    tau: float = 0.275
    l_nv: float = 1.0
    ellipse: EllipseConfig = field(default_factory=EllipseConfig)
    admissibility: AdmissibilityConfig = field(default_factory=AdmissibilityConfig)

    def __post_init__(self):
        if int(self.T) != self.T or self.T < 1:
            raise ValueError("T must be a positive integer")
        check_positive(self.Ts, "Ts")


@dataclass(frozen=True)
class HalfPlane:
    """``n_s * ds + n_l * dl >= 1`` in NV-minus-ego coordinates."""

    n_s: float
    n_l: float
    point: tuple

    def value(self, ds, dl):
        return self.n_s * ds + self.n_l * dl

    def contains(self, ds, dl, tol=1e-9):
        return self.value(ds, dl) >= 1.0 - tol


@dataclass
class NvPlan:
    control: NvControl
    trajectory: np.ndarray
    status: str
    failsafe: bool
    objective: float = np.nan


def project_ego(x_ego, T, Ts):
    """Constant-speed, constant-lane-rate projection of the observed ego; ``(T, 5)``."""
    x = x_ego.as_array() if isinstance(x_ego, EgoState) else np.asarray(x_ego, dtype=float)
    s, v, _, l, r_l = x
    t = Ts * np.arange(1, int(T) + 1)
    return np.column_stack([s + v * t, np.full(t.size, v), np.zeros(t.size), l + r_l * t,
                            np.full(t.size, r_l)])


def ellipse_halfplane(rel, cfg=None):
    """Tangent half-plane of the ellipse where the ray through ``rel`` leaves it."""
    cfg = cfg or EllipseConfig()
    ds, dl = check_finite_array(rel, "rel", shape=(2,))
    # hypot instead of sqrt(level): tiny offsets must not square to zero
    scale = np.hypot(ds / cfg.a, dl / cfg.b)
    if scale == 0.0:
        raise DegenerateDirection("relative position is zero")
    ps, pl = ds / scale, dl / scale
    return HalfPlane(n_s=ps / cfg.a**2, n_l=pl / cfg.b**2, point=(float(ps), float(pl)))


def nv_plan(x_nv, x_ego_obs, q, cfg=None, v_ref=None, s_ref=None, previous=None,
            last_direction=None):
    """One NV control step.

    ``s_ref`` is the NV schedule at steps ``1..T``; ``previous`` is the
    previous predicted NV trajectory ``(T, 3)`` used to orient the
    half-planes. ``x_ego_obs=None`` removes the ego (free driving).
    """
    cfg = cfg or NvMpcConfig()
    q = q if isinstance(q, NvTrueWeights) else NvTrueWeights(*q)
    T, Ts = int(cfg.T), cfg.Ts
    xn = x_nv.as_array() if isinstance(x_nv, NvState) else check_finite_array(x_nv, "x_nv", shape=(3,))
    v_ref = xn[1] if v_ref is None else float(v_ref)
    s_ref = np.zeros(T) if s_ref is None else check_finite_array(s_ref, "s_ref", shape=(T,))
    model = nv_model(Ts, cfg.tau)
    adm = cfg.admissibility

    # variables: u(0..T-1), then x(1..T) stacked as [s, v, a]
    n = T + 3 * T

    def sx(k, i):
        return T + 3 * (i - 1) + k

    H = np.zeros((n, n))
    f = np.zeros(n)
    c = 0.0
    for i in range(1, T + 1):
        for k, w, ref in ((0, q.q_s, s_ref[i - 1]), (1, q.q_v, v_ref), (2, q.q_a, 0.0)):
            j = sx(k, i)
            H[j, j] += 2 * w
            f[j] -= 2 * w * ref
            c += w * ref * ref
    A_eq = np.zeros((3 * T, n))
    b_eq = np.zeros(3 * T)
    for i in range(T):
        for k in range(3):
            r = 3 * i + k
            A_eq[r, sx(k, i + 1)] = 1.0
            A_eq[r, i] = -model.B_d[k, 0]
            if i == 0:
                b_eq[r] = model.A_d[k] @ xn
            else:
                for kk in range(3):
                    A_eq[r, sx(kk, i)] -= model.A_d[k, kk]
    rows, rhs = [], []

    def le(coefs, b):
        row = np.zeros(n)
        for j, cf in coefs:
            row[j] += cf
        rows.append(row)
        rhs.append(b)

    for i in range(T):
        for m_, b_ in ((adm.m1, adm.b1), (adm.m2, adm.b2)):
            if i == 0:
                le([(i, 1.0)], m_ * xn[1] + b_)
            else:
                le([(i, 1.0), (sx(1, i), -m_)], b_)
        le([(sx(1, i + 1), -1.0)], 0.0)

    planes = []
    if x_ego_obs is not None:
        ego = project_ego(x_ego_obs, T, Ts)
        xe = x_ego_obs.as_array() if isinstance(x_ego_obs, EgoState) else np.asarray(x_ego_obs, float)
        for i in range(T):
            if previous is not None:
                rel = np.array([previous[i, 0] - ego[i, 0], cfg.l_nv - ego[i, 3]])
            else:
                rel = np.array([xn[0] - xe[0], cfg.l_nv - xe[3]])
            try:
                hp = ellipse_halfplane(rel, cfg.ellipse)
            except DegenerateDirection:
                if last_direction is None:
                    raise
                hp = ellipse_halfplane(last_direction, cfg.ellipse)
            planes.append(hp)
            # n_s (s_nv - s_e) + n_l (l_nv - l_e) >= 1
            le([(sx(0, i + 1), -hp.n_s)], -1.0 + hp.n_l * (cfg.l_nv - ego[i, 3]) - hp.n_s * ego[i, 0])

    A_in = np.array(rows) if rows else np.zeros((0, n))
    lb = np.full(n, -np.inf)
    lb[:T] = adm.u_a_min
    prob = QpProblem(H=H + 1e-9 * np.eye(n), f=f, A_eq=A_eq, b_eq=b_eq, A_in=A_in,
                     b_in=np.array(rhs), lb=lb, c=c)
    sol = solve_qp(prob)
    if sol.status != QpStatus.OPTIMAL:
        return _failsafe(xn, model, adm, T, sol.status.value)
    traj = sol.x[T:].reshape(T, 3)
    return NvPlan(NvControl(float(sol.x[0])), traj, sol.status.value, False, float(sol.objective))


def _failsafe(xn, model, adm, T, status):
    """Hardest admissible braking, held over the horizon."""
    def brake(x):
        # hardest braking that does not push the next speed below zero
        # (positive once the lagged deceleration alone would overshoot zero)
        floor = -(model.A_d[1] @ x) / model.B_d[1, 0]
        return float(min(max(adm.u_a_min, floor), adm.u_max(x[1])))

    x = xn.copy()
    traj = []
    u0 = brake(xn)
    for _ in range(T):
        x = model.A_d @ x + model.B_d[:, 0] * brake(x)
        traj.append(x)
    return NvPlan(NvControl(float(u0)), np.array(traj), status, True)


class NeighborMPC(BaseEstimator):
    """Stateful NV controller that re-orients its half-planes from its last plan."""

    def __init__(self, weights=None, config=None, v_ref=None, s_ref0=0.0):
        self.weights = weights
        self.config = config
        self.v_ref = v_ref
        self.s_ref0 = s_ref0

    def reset(self):
        self.previous_ = None
        self.direction_ = None
        return self

    def plan(self, x_nv, x_ego_obs, t):
        """Plan at time ``t``; the schedule is ``s_ref0 + v_ref * time``."""
        cfg = self.config or NvMpcConfig()
        q = self.weights or NvTrueWeights()
        xn = x_nv.as_array() if isinstance(x_nv, NvState) else np.asarray(x_nv, dtype=float)
        v_ref = xn[1] if self.v_ref is None else self.v_ref
        times = t + cfg.Ts * np.arange(1, cfg.T + 1)
        s_ref = self.s_ref0 + v_ref * times
        prev = getattr(self, "previous_", None)
        guess = None
        if prev is not None:
            # shift the last prediction one step; extend at constant speed
            last = prev[-1]
            tail = np.array([last[0] + cfg.Ts * last[1], last[1], last[2]])
            guess = np.vstack([prev[1:], tail])
        if x_ego_obs is not None:
            ego = x_ego_obs.as_array() if isinstance(x_ego_obs, EgoState) else np.asarray(x_ego_obs)
            rel_now = np.array([xn[0] - ego[0], cfg.l_nv - ego[3]])
            if np.any(rel_now != 0.0):
                self.direction_ = rel_now
        result = nv_plan(xn, x_ego_obs, q, cfg, v_ref=v_ref, s_ref=s_ref, previous=guess,
                         last_direction=getattr(self, "direction_", None))
        self.previous_ = result.trajectory
        return result

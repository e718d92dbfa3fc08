"""Closed-loop merge simulation: imputation, ego planner, NV controller, plants."""

import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .dynamics import EgoState, NvState, ego_model, nv_model, step
from .imputation import WeightImputer
from .miqp import MiqpStatus
from .neighbor import NeighborMPC, NvMpcConfig, NvTrueWeights
from .planner import (
    InfeasibleGeometry,
    JointPlanner,
    PlanInfeasible,
    PlannerConfig,
    ReferenceSignal,
    WeightVector,
)

MODES = ("aimpc", "nonadaptive", "cv", "ca")
MERGED_AHEAD = "MergedAhead"
MERGED_BEHIND = "MergedBehind"
FAILED = "Failed"


class SimulationError(RuntimeError):
    pass


@dataclass(frozen=True)
class Scenario:
    name: str = "A"
    nv_weights: NvTrueWeights = field(default_factory=NvTrueWeights)
    v0_ego: float = 10.0
    v0_nv: float = 12.0
    s0_ego: float = 0.0
    s0_nv: float = 0.0
    v_ref_ego: float = 12.0
    v_ref_nv: float = None
    mode: str = "aimpc"
    alpha_fixed: tuple = (1 / 3, 1 / 3, 1 / 3)
    sim_time: float = 8.0
    planner: PlannerConfig = field(default_factory=PlannerConfig)
    nv: NvMpcConfig = field(default_factory=NvMpcConfig)
    r: int = 3
    eps: float = 1e-3

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not self.sim_time > 0:
            raise ValueError("sim_time must be positive")
        if abs(self.nv.Ts - self.Ts) > 1e-12:
            raise ValueError("NV and ego controllers must share Ts")
        WeightVector.from_array(self.alpha_fixed)

    @property
    def Ts(self):
        return self.planner.horizon.Ts

    @property
    def steps(self):
        return int(round(self.sim_time / self.Ts))

    @property
    def nv_v_ref(self):
        return self.v0_nv if self.v_ref_nv is None else self.v_ref_nv


@dataclass
class StepRecord:
    t: float
    ego: np.ndarray
    nv: np.ndarray
    u_a: float = math.nan
    u_l: float = math.nan
    u_nv: float = math.nan
    alpha: np.ndarray = None
    mu: float = math.nan
    beta: float = math.nan
    objective: float = math.nan
    nodes: int = 0
    solve_time: float = 0.0
    ego_fallback: bool = False
    nv_failsafe: bool = False
    gap: float = 0.0


@dataclass
class SimLog:
    scenario: Scenario
    records: list = field(default_factory=list)
    ego_free: bool = False

    @property
    def t(self):
        return np.array([r.t for r in self.records])

    @property
    def ego(self):
        return np.array([r.ego for r in self.records])

    @property
    def nv(self):
        return np.array([r.nv for r in self.records])

    @property
    def alpha(self):
        return np.array([r.alpha for r in self.records])


@dataclass
class Metrics:
    merge_outcome: str
    merge_time: float
    hindrance_pct: float
    rms_jerk_ego: float
    min_same_lane_gap: float
    mean_solve_ms: float
    max_solve_ms: float
    final_alpha: tuple
    ramp_violation: bool = False


def _alpha_for(sc, imputer, nv_hist, sref_hist, k):
    if sc.mode == "nonadaptive":
        return WeightVector.from_array(sc.alpha_fixed)
    if sc.mode != "aimpc":
        return None
    if k >= 1:
        # shorter windows until r steps of history exist
        lo = max(0, k - sc.r)
        imputer.update(np.array(nv_hist[lo:k + 1]), np.array(sref_hist[lo:k + 1]), sc.nv_v_ref)
    return imputer.alpha_


def _fallback_brake(model, x, u_l, adm):
    # hardest braking that keeps the next speed non-negative
    free = model.A_d[1] @ x + model.B_d[1, 1] * u_l
    floor = -free / model.B_d[1, 0]
    return float(min(max(adm.u_a_min, floor), adm.u_max(x[1])))


def _fallback_hold(model, x, u_l, adm):
    # command that keeps the next speed at the current one
    free = model.A_d[1] @ x + model.B_d[1, 1] * u_l
    u = (x[1] - free) / model.B_d[1, 0]
    return float(min(max(adm.u_a_min, u), adm.u_max(x[1])))


def run_scenario(sc, ego_present=True):
    """Simulate ``sc``; ``ego_present=False`` gives the unimpeded NV reference run."""
    Ts = sc.Ts
    N = sc.planner.horizon.N
    em = ego_model(Ts, sc.planner.model)
    nm = nv_model(Ts, sc.nv.tau)
    x_e = EgoState(sc.s0_ego, sc.v0_ego, 0.0, 0.0, 0.0).as_array()
    x_n = NvState(sc.s0_nv, sc.v0_nv, 0.0).as_array()
    prediction = {"aimpc": "joint", "nonadaptive": "joint", "cv": "cv", "ca": "ca"}[sc.mode]
    planner = JointPlanner(sc.planner, prediction).reset()
    neighbor = NeighborMPC(sc.nv_weights, sc.nv, v_ref=sc.nv_v_ref, s_ref0=sc.s0_nv).reset()
    imputer = WeightImputer(r=sc.r, eps=sc.eps, Ts=Ts, admissibility=sc.planner.admissibility)
    imputer.alpha_ = WeightVector.uniform()
    imputer.history_ = []
    log = SimLog(sc, ego_free=not ego_present)
    nv_hist, sref_hist = [], []
    last_ul = 0
    for k in range(sc.steps + 1):
        t = k * Ts
        rec = StepRecord(t=t, ego=x_e.copy(), nv=x_n.copy())
        nv_hist.append(x_n.copy())
        sref_hist.append(sc.s0_nv + sc.nv_v_ref * t)
        log.records.append(rec)
        if k == sc.steps:
            rec.alpha = log.records[-2].alpha if k else np.full(3, 1 / 3)
            break
        if not np.all(np.isfinite(x_e)) or not np.all(np.isfinite(x_n)):
            raise SimulationError(f"non-finite plant state at t={t:.1f}")
        if ego_present:
            alpha = _alpha_for(sc, imputer, nv_hist, sref_hist, k)
            rec.alpha = (alpha or WeightVector.uniform()).as_array() if sc.mode in ("aimpc", "nonadaptive") \
                else np.full(3, math.nan)
            refs = ReferenceSignal.anchored(
                x_e[0], sc.v_ref_ego, sc.s0_nv + sc.nv_v_ref * t, sc.nv_v_ref, N, Ts)
            t0 = time.perf_counter()
            try:
                res = planner.plan(x_e, x_n, alpha or WeightVector.uniform(), refs)
            except (PlanInfeasible, InfeasibleGeometry):
                res = None
            rec.solve_time = time.perf_counter() - t0
            if res is None:
                # fail-safe: abort an unfinished lane change and hold speed in the
                # ramp lane; brake only when merged behind the NV
                planner.last_ = None
                merged = x_e[3] >= sc.planner.safety.l_merged
                u_l = last_ul if merged else 0
                if merged and x_e[0] < x_n[0]:
                    u_a = _fallback_brake(em, x_e, u_l, sc.planner.admissibility)
                else:
                    u_a = _fallback_hold(em, x_e, u_l, sc.planner.admissibility)
                rec.ego_fallback = True
            else:
                u_a, u_l = res.u_ego_first.u_a, res.u_ego_first.u_l
                rec.mu, rec.beta = float(res.mu[0]), float(res.beta[0])
                rec.objective, rec.nodes, rec.gap = res.objective, res.nodes, res.gap
                if res.status == MiqpStatus.NODE_LIMIT:
                    rec.gap = res.gap
            last_ul = u_l
            rec.u_a, rec.u_l = u_a, u_l
            nv_res = neighbor.plan(x_n, x_e, t)
        else:
            rec.alpha = np.full(3, math.nan)
            nv_res = neighbor.plan(x_n, None, t)
        rec.u_nv = nv_res.control.u
        rec.nv_failsafe = nv_res.failsafe
        if ego_present:
            x_e = step(em, x_e, np.array([rec.u_a, rec.u_l], dtype=float))
        x_n = step(nm, x_n, np.array([rec.u_nv]))
    return log


def hindrance(log, unimpeded):
    """Percent shortfall of NV travel distance relative to the ego-free run."""
    if len(log.records) != len(unimpeded.records) or not np.allclose(log.t, unimpeded.t):
        raise ValueError("logs are on different time grids")
    free = unimpeded.nv[-1, 0] - unimpeded.nv[0, 0]
    actual = log.nv[-1, 0] - log.nv[0, 0]
    if free <= 0:
        raise ValueError("reference run has no NV travel")
    return 100.0 * (free - actual) / free


def rms_jerk(log):
    a = log.ego[:, 2]
    if a.size < 3:
        raise ValueError("need at least 3 samples")
    jerk = np.diff(a) / log.scenario.Ts
    return float(np.sqrt(np.mean(jerk**2)))


def merge_outcome(log, safety=None):
    """``(outcome, merge_time)`` from the first sample with ``l >= l_merged``."""
    sf = safety or log.scenario.planner.safety
    ego, nv, t = log.ego, log.nv, log.t
    for k in range(len(t)):
        if ego[k, 3] >= sf.l_merged:
            return (MERGED_AHEAD if ego[k, 0] > nv[k, 0] else MERGED_BEHIND), float(t[k])
        if ego[k, 0] > sf.s_ramp_end + 0.1:
            break
    return FAILED, math.nan


def same_lane_gaps(log, safety=None):
    """``|s_ego - s_nv|`` at the samples where the ego encroaches the NV's lane."""
    sf = safety or log.scenario.planner.safety
    ego, nv = log.ego, log.nv
    mask = np.abs(ego[:, 3] - log.scenario.nv.l_nv) < 1.0 - sf.l_enc
    return np.abs(ego[mask, 0] - nv[mask, 0])


def ramp_violation(log, safety=None, tol=0.1):
    sf = safety or log.scenario.planner.safety
    ego = log.ego
    return bool(np.any((ego[:, 0] > sf.s_ramp_end + tol) & (ego[:, 3] < sf.l_merged)))


def compute_metrics(log, unimpeded=None):
    outcome, t_merge = merge_outcome(log)
    gaps = same_lane_gaps(log)
    solve = np.array([r.solve_time for r in log.records[:-1]])
    alpha = log.records[-1].alpha
    return Metrics(
        merge_outcome=outcome,
        merge_time=t_merge,
        hindrance_pct=hindrance(log, unimpeded) if unimpeded is not None else math.nan,
        rms_jerk_ego=rms_jerk(log),
        min_same_lane_gap=float(gaps.min()) if gaps.size else math.inf,
        mean_solve_ms=float(solve.mean() * 1e3) if solve.size else 0.0,
        max_solve_ms=float(solve.max() * 1e3) if solve.size else 0.0,
        final_alpha=tuple(float(a) for a in alpha) if alpha is not None else (math.nan,) * 3,
        ramp_violation=ramp_violation(log),
    )


def with_mode(sc, mode):
    return replace(sc, mode=mode)


def imputation_benchmark(nature, windows, r=3, v0=8.0, a0=1.0, v_ref=14.0, nv=None, eps=1e-3):
    """Drive the NV alone and impute its weights from ``windows`` sliding windows.

    Starting below ``v_ref`` with a non-zero acceleration excites the speed and
    acceleration terms, so every nature leaves a trace in the first windows.
    Returns ``(states, imputer)``.
    """
    nature = nature if isinstance(nature, NvTrueWeights) else NvTrueWeights(*nature)
    if int(windows) != windows or windows < 1:
        raise ValueError("windows must be a positive integer")
    cfg = nv or NvMpcConfig()
    model = nv_model(cfg.Ts, cfg.tau)
    ctrl = NeighborMPC(nature, cfg, v_ref=v_ref).reset()
    x = np.array([0.0, v0, a0])
    states = [x]
    for k in range(int(windows) + r - 1):
        x = step(model, x, np.array([ctrl.plan(x, None, k * cfg.Ts).control.u]))
        states.append(x)
    states = np.array(states)
    s_ref = v_ref * cfg.Ts * np.arange(states.shape[0])
    imputer = WeightImputer(r=r, eps=eps, Ts=cfg.Ts, admissibility=cfg.admissibility)
    imputer.fit(states, s_ref, v_ref)
    return states, imputer

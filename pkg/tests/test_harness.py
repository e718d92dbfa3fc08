import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from aimpc.dynamics import ego_model, nv_model, step
from aimpc.harness import (
    FAILED,
    MERGED_AHEAD,
    MERGED_BEHIND,
    Scenario,
    SimLog,
    StepRecord,
    _fallback_brake,
    _fallback_hold,
    compute_metrics,
    hindrance,
    imputation_benchmark,
    merge_outcome,
    ramp_violation,
    rms_jerk,
    run_scenario,
    same_lane_gaps,
    with_mode,
)
from aimpc.neighbor import NvTrueWeights
from aimpc.planner import AdmissibilityConfig, PlannerConfig, SafetyConfig

TS = 0.4


def _log(ego, nv, sc=None):
    sc = sc or Scenario()
    recs = [StepRecord(t=TS * k, ego=np.asarray(e, float), nv=np.asarray(n, float))
            for k, (e, n) in enumerate(zip(ego, nv))]
    return SimLog(sc, recs)


def _straight(n, v=12.0, s0=0.0):
    return [[s0 + v * TS * k, v, 0.0] for k in range(n)]


def _ego(s, l, a=0.0):
    return [s, 10.0, a, l, 0.0]


class TestHindrance:
    def test_identical_runs(self):
        log = _log([_ego(0, 0)] * 5, _straight(5))
        assert hindrance(log, log) == 0.0

    def test_braking_nv_is_hindered(self):
        free = _log([_ego(0, 0)] * 5, _straight(5))
        braked = _log([_ego(0, 0)] * 5, _straight(5, v=9.0))
        # travel 4 steps at 12 vs 9 m/s: 100 * (19.2 - 14.4) / 19.2
        assert hindrance(braked, free) == pytest.approx(25.0)

    def test_faster_nv_negative(self):
        free = _log([_ego(0, 0)] * 5, _straight(5))
        fast = _log([_ego(0, 0)] * 5, _straight(5, v=15.0))
        assert hindrance(fast, free) < 0

    def test_mismatched_grid(self):
        with pytest.raises(ValueError):
            hindrance(_log([_ego(0, 0)] * 5, _straight(5)), _log([_ego(0, 0)] * 4, _straight(4)))


class TestJerk:
    def test_constant_acceleration(self):
        log = _log([_ego(0, 0, a=1.5)] * 6, _straight(6))
        assert rms_jerk(log) == 0.0

    def test_alternating(self):
        log = _log([_ego(0, 0, a=(-1) ** k) for k in range(6)], _straight(6))
        assert rms_jerk(log) == pytest.approx(5.0)

    def test_too_short(self):
        with pytest.raises(ValueError):
            rms_jerk(_log([_ego(0, 0)] * 2, _straight(2)))


class TestMergeOutcome:
    sf = SafetyConfig(s_ramp_end=50.0)

    def test_ahead(self):
        ego = [_ego(10, 0.0), _ego(14, 0.5), _ego(18, 1.0)]
        out, t = merge_outcome(_log(ego, _straight(3)), self.sf)
        assert out == MERGED_AHEAD and t == pytest.approx(0.8)

    def test_behind(self):
        ego = [_ego(-10, 0.0), _ego(-6, 0.9)]
        assert merge_outcome(_log(ego, _straight(2)), self.sf)[0] == MERGED_BEHIND

    def test_never_merges(self):
        out, t = merge_outcome(_log([_ego(0, 0.5)] * 4, _straight(4)), self.sf)
        assert out == FAILED and math.isnan(t)

    def test_merging_past_ramp_end_fails(self):
        ego = [_ego(40, 0.0), _ego(55, 0.2), _ego(60, 1.0)]
        log = _log(ego, _straight(3))
        assert merge_outcome(log, self.sf)[0] == FAILED
        assert ramp_violation(log, self.sf)

    def test_same_lane_gaps_only_when_encroaching(self):
        ego = [_ego(0, 0.0), _ego(5, 0.5), _ego(20, 1.0)]
        gaps = same_lane_gaps(_log(ego, _straight(3, v=0.0)), SafetyConfig(l_enc=0.3))
        np.testing.assert_allclose(gaps, [5.0, 20.0])


class TestFallback:
    model = ego_model(TS)
    adm = AdmissibilityConfig()

    @given(v=st.floats(0, 20), a=st.floats(-4, 3), r=st.floats(-0.5, 0.5), u_l=st.sampled_from([0, 1]))
    def test_brake_keeps_speed_nonnegative(self, v, a, r, u_l):
        x = np.array([0.0, v, a, 0.5, r])
        u = _fallback_brake(self.model, x, u_l, self.adm)
        assert u >= self.adm.u_a_min - 1e-12
        # only the acceleration cap can stop it from arresting a lagged deceleration
        v_next = step(self.model, x, np.array([u, u_l]))[1]
        assert v_next >= -1e-9 or u == pytest.approx(float(self.adm.u_max(v)))

    @given(v=st.floats(1, 20), a=st.floats(-1, 1))
    def test_hold_keeps_speed(self, v, a):
        x = np.array([0.0, v, a, 1.0, 0.0])
        u = _fallback_hold(self.model, x, 1, self.adm)
        if self.adm.u_a_min < u < float(self.adm.u_max(v)):
            assert step(self.model, x, np.array([u, 1]))[1] == pytest.approx(v, abs=1e-9)


class TestScenario:
    def test_bad_mode(self):
        with pytest.raises(ValueError):
            Scenario(mode="oracle")

    def test_bad_sim_time(self):
        with pytest.raises(ValueError):
            Scenario(sim_time=0.0)

    def test_steps(self):
        assert Scenario(sim_time=8.0).steps == 20


SHORT = Scenario(name="short", nv_weights=NvTrueWeights(0, 1, 0), v0_ego=10.0, v0_nv=12.0,
                 s0_nv=-4.0, v_ref_ego=14.0, v_ref_nv=16.0, sim_time=2.0,
                 planner=PlannerConfig(safety=SafetyConfig(s_ramp_end=80.0)))


@pytest.fixture(scope="module")
def logs():
    return {m: run_scenario(with_mode(SHORT, m)) for m in ("aimpc", "cv")}


class TestClosedLoop:
    def test_grid(self, logs):
        log = logs["aimpc"]
        assert len(log.records) == SHORT.steps + 1
        np.testing.assert_allclose(np.diff(log.t), TS)

    def test_deterministic(self, logs):
        again = run_scenario(with_mode(SHORT, "aimpc"))
        for a, b in zip(logs["aimpc"].records, again.records):
            assert np.array_equal(a.ego, b.ego) and np.array_equal(a.nv, b.nv)
            assert np.array_equal(a.alpha, b.alpha, equal_nan=True)
            assert (a.u_a, a.u_l, a.mu, a.beta) == (b.u_a, b.u_l, b.mu, b.beta)

    @pytest.mark.parametrize("mode", ["aimpc", "cv"])
    def test_plants_follow_logged_controls(self, logs, mode):
        log = logs[mode]
        em, nm = ego_model(TS, SHORT.planner.model), nv_model(TS, SHORT.nv.tau)
        for r, nxt in zip(log.records, log.records[1:]):
            np.testing.assert_array_equal(step(em, r.ego, np.array([r.u_a, r.u_l], float)), nxt.ego)
            np.testing.assert_array_equal(step(nm, r.nv, np.array([r.u_nv])), nxt.nv)

    def test_nv_speed_change_within_authority(self, logs):
        adm = SHORT.planner.admissibility
        bound = max(abs(adm.u_a_min), float(adm.u_max(0.0))) * TS
        assert np.all(np.abs(np.diff(logs["aimpc"].nv[:, 1])) <= bound + 1e-9)

    def test_alpha_on_simplex(self, logs):
        for r in logs["aimpc"].records:
            assert abs(r.alpha.sum() - 1) <= 1e-9 and np.all(r.alpha >= 0)

    def test_baseline_logs_no_alpha(self, logs):
        assert all(np.isnan(r.alpha).all() for r in logs["cv"].records)

    def test_metrics(self, logs):
        free = run_scenario(SHORT, ego_present=False)
        m = compute_metrics(logs["aimpc"], free)
        assert m.merge_outcome in (MERGED_AHEAD, MERGED_BEHIND, FAILED)
        assert m.rms_jerk_ego >= 0 and np.isfinite(m.hindrance_pct)
        assert m.max_solve_ms >= m.mean_solve_ms > 0
        assert compute_metrics(free, free).hindrance_pct == 0.0


def test_free_run_has_no_ego_controls():
    log = run_scenario(SHORT, ego_present=False)
    assert all(math.isnan(r.u_a) for r in log.records)
    assert not np.any(log.ego[:, 0])


@pytest.mark.parametrize("nature", [(0, 1, 0), (0, 0, 1)])
def test_imputation_benchmark_recovers(nature):
    _, imp = imputation_benchmark(nature, 5)
    assert len(imp.history_) == 5
    assert np.max(np.abs(imp.predict() - np.array(nature))) <= 0.15

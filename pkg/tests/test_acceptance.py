"""Calibration runs over the bundled scenarios."""
import pytest

from app.metrics.report import compare
from app.models import ROUND_ROBIN, STICKY
from app.sim import events as ev
from app.sim.engine import run, run_ablation, run_health_ablation
from app.sim.scenario import load_scenario
from app.utils.cost_model import PRESETS
from app.utils.health import REMOVED
from tests.conftest import bundled


@pytest.fixture(scope='module')
def followup_run():
    return run(load_scenario(bundled('table6')))


@pytest.fixture(scope='module')
def preset_reports():
    scenario = load_scenario(bundled('table5_presets'))
    student, _ = run(scenario.with_cost_preset('student_300b'), label='student_300b')
    teacher, _ = run(scenario.with_cost_preset('teacher_405b'), label='teacher_405b')
    return student, teacher


def test_steady_state_cache_efficiency(followup_run):
    report, _ = followup_run
    steady = report.cache['steady']
    assert steady['chr'] == pytest.approx(0.964, abs=0.02)
    assert steady['reuse_factor'] == pytest.approx(24.5, abs=2.5)
    assert steady['avg_recomputed'] == pytest.approx(128, abs=15)


def test_cold_start_prefills_everything(followup_run):
    report, _ = followup_run
    cold, steady = report.cache['cold'], report.cache['steady']
    assert cold['chr'] == 0.0
    assert cold['avg_recomputed'] == pytest.approx(2450, rel=0.05)
    assert cold['avg_prefill_ms'] >= 15 * steady['avg_prefill_ms']
    assert report.eviction_rate == 0.0


def test_voice_latency_budget(followup_run):
    report, log = followup_run
    assert report.counts['turns'] >= 10_000
    assert report.counts['failures'] == 0
    assert report.latency['ttft']['p50'] <= 500
    assert report.latency['ttfa']['p50'] < 1000
    for e in log.of_kind(ev.TURN_DONE)[:200]:
        breakdown = e.payload['ttfa_breakdown']
        assert sum(breakdown.values()) == pytest.approx(e.payload['ttfa_ms'])


def test_request_throughput_tracks_preset(preset_reports):
    student, teacher = preset_reports
    ratio = student.throughput['req_throughput'] / teacher.throughput['req_throughput']
    assert ratio == pytest.approx(14.31 / 10.96, abs=0.05)
    assert student.throughput['req_throughput'] == pytest.approx(PRESETS['student_300b'].req_throughput, rel=0.03)
    assert teacher.throughput['req_throughput'] == pytest.approx(PRESETS['teacher_405b'].req_throughput, rel=0.03)


def test_tpot_tail_tracks_preset(preset_reports):
    student, teacher = preset_reports
    assert student.latency['tpot']['p99'] == pytest.approx(PRESETS['student_300b'].tpot_p99_ms, rel=0.10)
    assert teacher.latency['tpot']['p99'] == pytest.approx(PRESETS['teacher_405b'].tpot_p99_ms, rel=0.10)


def test_preset_comparison_rows(preset_reports):
    rows = {r.key: r for r in compare(*preset_reports)}
    assert rows['req_throughput'].ratio > 1.25
    assert rows['tpot_p99'].ratio < 1.0


def test_failed_node_is_pruned_within_detection_bound():
    scenario = load_scenario(bundled('failure_drill'))
    report, log = run(scenario)
    fault = scenario.faults[0]
    removals = [e.time_us for e in log.of_kind(ev.TRANSITION)
                if e.payload['node'] == fault.node and e.payload['to_state'] == REMOVED]
    assert removals
    assert removals[0] <= (fault.fail_at_ms + scenario.health.detection_bound_ms) * 1000
    assert not [e for e in log.of_kind(ev.DISPATCH)
                if e.payload['node'] == fault.node and e.time_us >= removals[0]]
    assert report.counts['reroutes'] > 0


def test_health_checks_cut_tail_latency():
    on, off = run_health_ablation(load_scenario(bundled('failure_drill')))
    assert on.counts['turns'] == off.counts['turns']
    assert off.counts['failures'] > 0
    assert on.latency['ttfa']['p99'] < off.latency['ttfa']['p99']


def test_sticky_routing_beats_round_robin():
    sticky, rr = run_ablation(load_scenario(bundled('ablation_roundrobin')), STICKY, ROUND_ROBIN)
    assert sticky.cache['steady']['chr'] > rr.cache['steady']['chr']
    assert sticky.cache['steady']['avg_prefill_ms'] < rr.cache['steady']['avg_prefill_ms']
    assert sticky.label == STICKY
    assert rr.label == ROUND_ROBIN

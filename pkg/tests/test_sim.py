import pytest

from app.errors import TraceError
from app.metrics.report import assemble, check_laws, render_json
from app.models import ROUND_ROBIN, STATUS_NO_CAPACITY, STATUS_REROUTED_COLD, STICKY
from app.sim import events as ev
from app.sim.engine import KIND_RANK, Simulation, replay, run, run_ablation, turn_entity
from app.sim.events import EventLog
from app.utils.health import REMOVED
from app.utils.workload import TRACE_HEADER, read_trace, write_trace
from tests.conftest import SMALL, scenario_from

ONE_NODE = SMALL.replace("""
      - {id: b}
      - {id: c}""", '')

TWO_NODES = SMALL.replace("""
      - {id: c}""", '')


def _with(base, extra):
    return scenario_from(base + extra, name='variant')


def test_turn_entity():
    assert turn_entity('s1', 2) == 's1#2'
    assert turn_entity('s1', 2, 1) == 's1#2#1'


def test_kind_rank_orders_state_changes_first():
    assert KIND_RANK[ev.FAULT] < KIND_RANK[ev.TRANSITION] < KIND_RANK[ev.TURN_DONE] < KIND_RANK[ev.ARRIVAL]


def test_runs_are_deterministic(small_scenario):
    report_a, log_a = run(small_scenario)
    report_b, log_b = run(small_scenario)
    assert render_json(report_a) == render_json(report_b)
    assert log_a.to_jsonl() == log_b.to_jsonl()


def test_laws_hold(small_scenario):
    report, log = run(small_scenario)
    assert check_laws(log) == []
    assert report.errors == []
    assert report.aborted is None
    assert report.counts['completed'] == report.counts['turns'] > 0


def test_meta_identifies_run(small_scenario):
    _, log = run(small_scenario, label='baseline')
    assert log.meta['scenario'] == 'small'
    assert log.meta['label'] == 'baseline'
    assert log.meta['config_digest'] == small_scenario.digest()
    assert log.meta['nodes'] == ['a', 'b', 'c']


def test_sessions_are_serial(small_scenario):
    _, log = run(small_scenario)
    done_at = {}
    for e in log.of_kind(ev.TURN_DONE):
        done_at[(e.payload['session'], e.payload['turn'])] = e.time_us
    for e in log.of_kind(ev.DISPATCH):
        p = e.payload
        if p['turn'] > 0:
            assert e.time_us >= done_at[(p['session'], p['turn'] - 1)]


def test_sticky_routing_reuses_context(small_scenario):
    report, log = run(small_scenario)
    nodes = {}
    for e in log.of_kind(ev.DISPATCH):
        nodes.setdefault(e.payload['session'], set()).add(e.payload['node'])
    assert all(len(n) == 1 for n in nodes.values())
    assert report.counts['cold_starts'] == report.counts['sessions']
    assert report.counts['reroutes'] == 0
    for e in log.of_kind(ev.TURN_DONE):
        assert e.payload['cold_start'] == (e.payload['turn'] == 0)


def test_round_robin_loses_context(small_scenario):
    sticky, rr = run_ablation(small_scenario, small_scenario.routing_policy, ROUND_ROBIN)
    assert sticky.counts['turns'] == rr.counts['turns']
    assert rr.cache['steady']['chr'] < sticky.cache['steady']['chr']
    assert rr.cache['steady']['avg_prefill_ms'] > sticky.cache['steady']['avg_prefill_ms']


def test_seed_changes_workload(small_scenario):
    report, log = run(small_scenario.with_seed(10))
    assert check_laws(log) == []
    assert render_json(report) != render_json(run(small_scenario)[0])


def test_event_log_round_trip(small_scenario, tmp_path):
    report, log = run(small_scenario)
    path = tmp_path / 'events.jsonl'
    log.write_jsonl(str(path))
    again = EventLog.read_jsonl(str(path))
    assert again.meta == log.meta
    assert len(again) == len(log)
    assert render_json(assemble(again)) == render_json(report)


def test_replay_matches_run(small_scenario, tmp_path):
    report, _ = run(small_scenario)
    path = tmp_path / 'trace.jsonl'
    write_trace(small_scenario.generate_trace(), str(path))
    replayed = replay(read_trace(str(path)), small_scenario)
    assert render_json(replayed) == render_json(report)


def test_empty_trace():
    scenario = _with(SMALL, '')
    report, log = run(scenario, trace=[])
    assert report.counts['turns'] == 0
    assert not log.of_kind(ev.PROBE)


def test_timeouts_without_health_checks():
    scenario = _with(TWO_NODES, """
    health: {enabled: false}
    gateway: {request_timeout_ms: 3000, retries: 1}
    faults:
      - {node: b, fail_at_ms: 0}
    """)
    report, log = run(scenario)
    assert check_laws(log) == []
    failures = log.of_kind(ev.FAILURE)
    assert failures
    assert {e.payload['reason'] for e in failures} == {'timeout'}
    assert {e.payload['node'] for e in failures} == {'b'}
    finals = [e.payload for e in failures if e.payload['final']]
    assert all(p['elapsed_ms'] == 6000.0 for p in finals)
    assert report.counts['retries'] == report.counts['failures'] == len(finals)
    assert report.latency['ttfa']['p99'] >= 6000.0
    assert not log.of_kind(ev.TRANSITION)


def test_health_checks_remove_a_down_node():
    scenario = _with(TWO_NODES, """
    health: {probe_interval_ms: 1000, probe_timeout_ms: 200}
    faults:
      - {node: b, fail_at_ms: 1000}
    """)
    report, log = run(scenario)
    assert check_laws(log) == []
    removals = [e for e in log.of_kind(ev.TRANSITION)
                if e.payload['node'] == 'b' and e.payload['to_state'] == REMOVED]
    assert len(removals) == 1
    removed_at = removals[0].time_us
    assert removed_at <= (1000 + scenario.health.detection_bound_ms) * 1000
    assert removed_at == 1_200_000
    assert all(e.payload['node'] == 'a' for e in log.of_kind(ev.DISPATCH) if e.time_us >= removed_at)
    assert report.counts['failures'] == 0


def test_recovered_node_rejoins_after_threshold():
    scenario = _with(TWO_NODES, """
    health: {probe_interval_ms: 1000, probe_timeout_ms: 200, recover_threshold: 2}
    faults:
      - {node: b, fail_at_ms: 1000, recover_at_ms: 5000}
    """)
    _, log = run(scenario)
    states = [(e.time_us, e.payload['to_state']) for e in log.of_kind(ev.TRANSITION)
              if e.payload['node'] == 'b']
    assert states[0] == (1_200_000, REMOVED)
    assert (6_000_000 + 1000, 'Healthy') in states
    assert check_laws(log) == []


def test_single_node_failure_aborts():
    scenario = _with(ONE_NODE, """
    faults:
      - {node: a, fail_at_ms: 5000}
    """)
    report, log = run(scenario)
    assert report.aborted == 'no capacity'
    assert log.meta['aborted'] == 'no capacity'
    assert [e for e in log.of_kind(ev.FAILURE) if e.payload['reason'] == STATUS_NO_CAPACITY]
    assert check_laws(log) == []


def test_slow_fault_scales_service_times():
    base = _with(ONE_NODE, '')
    slow = _with(ONE_NODE, """
    faults:
      - {node: a, fail_at_ms: 0, mode: slow}
    """)
    trace = base.generate_trace()
    _, fast_log = run(base, trace=trace)
    _, slow_log = run(slow, trace=trace)
    fast = {(e.payload['session'], e.payload['turn']): e.payload for e in fast_log.of_kind(ev.TURN_DONE)}
    slowed = {(e.payload['session'], e.payload['turn']): e.payload for e in slow_log.of_kind(ev.TURN_DONE)}
    assert fast.keys() == slowed.keys()
    for key, p in fast.items():
        assert slowed[key]['prefill_ms'] == pytest.approx(4.0 * p['prefill_ms'])
        assert slowed[key]['decode_ms'] == pytest.approx(4.0 * p['decode_ms'])


def test_unsorted_trace_rejected(small_scenario):
    trace = small_scenario.generate_trace()
    with pytest.raises(TraceError):
        Simulation(small_scenario, trace=list(reversed(trace)))


def test_busy_nodes_stay_in_ring():
    scenario = _with(TWO_NODES, """
    health: {probe_interval_ms: 1000, probe_timeout_ms: 200}
    cost: {service_rate_reqs: 0.5}
    """)
    report, log = run(scenario)
    backlog = max(e.payload['backlog_ms'] for e in log.of_kind(ev.PROBE))
    assert backlog > scenario.health.probe_timeout_ms
    assert all(e.payload['ok'] for e in log.of_kind(ev.PROBE))
    assert not log.of_kind(ev.TRANSITION)
    assert report.aborted is None
    assert report.counts['failures'] == 0
    assert check_laws(log) == []


def test_policies_agree_on_one_node():
    scenario = _with(ONE_NODE, '')
    sticky, rr = run_ablation(scenario, STICKY, ROUND_ROBIN)
    a, b = sticky.to_dict(), rr.to_dict()
    for key in ('label', 'config_digest'):
        assert a.pop(key) != b.pop(key)
    assert a == b


def test_sticky_turns_recompute_only_new_tokens(small_scenario):
    _, log = run(small_scenario)
    steady = [e.payload for e in log.of_kind(ev.TURN_DONE) if e.payload['turn'] > 0]
    assert steady
    for p in steady:
        assert p['miss'] == p['new_tokens']
        assert p['hit'] == p['required'] - p['new_tokens']


def test_remapped_turn_is_flagged_cold():
    scenario = _with(TWO_NODES, """
    health: {probe_interval_ms: 1000, probe_timeout_ms: 200}
    faults:
      - {node: b, fail_at_ms: 10000}
    """)
    report, log = run(scenario)
    last_node = {}
    remapped = []
    for e in log.of_kind(ev.TURN_DONE):
        p = e.payload
        previous = last_node.get(p['session'])
        if previous is not None and previous != p['node']:
            remapped.append(p)
        last_node[p['session']] = p['node']
    assert remapped
    for p in remapped:
        assert p['cold_start']
        assert p['status'] == STATUS_REROUTED_COLD
        assert p['rerouted']
    assert report.counts['reroutes'] == len(remapped)


HAND_TRACE = (
    's1\t0\t1000\t1000\t2\t0\n'
    's1\t1\t1200\t200\t2\t1000000\n'
    's2\t0\t400\t400\t1\t1000000\n'
    's1\t2\t1300\t100\t3\t2000000\n'
    's2\t1\t500\t100\t1\t2000000\n'
)


def test_replay_of_hand_written_trace(tmp_path):
    scenario = scenario_from("""
    seed: 1
    duration_s: 10
    health: {enabled: false}
    cost:
      prefill_ms_per_token: 0.5
      ttft_floor: 100
      tpot: 10
      endpoint_asr: 200
      tts: 150
      playout: 50
      service_rate_reqs: 100
    nodes:
      - {id: solo}
    """, name='hand')
    path = tmp_path / 'trace.tsv'
    path.write_text(TRACE_HEADER + '\n' + HAND_TRACE)
    trace = read_trace(str(path))
    report = replay(trace, scenario)
    _, log = run(scenario, trace=trace)

    # admission spacing is 10 ms, so s2 turn 0 waits behind s1 turn 1
    done = {(e.payload['session'], e.payload['turn']): e.payload for e in log.of_kind(ev.TURN_DONE)}
    assert {k: (p['hit'], p['miss'], p['ttft_ms']) for k, p in done.items()} == {
        ('s1', 0): (0, 1000, 600.0),
        ('s1', 1): (1000, 200, 200.0),
        ('s2', 0): (0, 400, 310.0),
        ('s1', 2): (1200, 100, 150.0),
        ('s2', 1): (400, 100, 160.0),
    }
    assert [done[k]['total_ms'] for k in sorted(done)] == [620.0, 220.0, 180.0, 320.0, 170.0]

    cold, steady = report.cache['cold'], report.cache['steady']
    assert (cold['lookups'], cold['miss_tokens'], cold['avg_recomputed']) == (2, 1400, 700.0)
    assert cold['avg_prefill_ms'] == 350.0
    assert (steady['lookups'], steady['hit_tokens'], steady['miss_tokens']) == (3, 2600, 400)
    assert steady['reuse_factor'] == 6.5
    assert steady['chr'] == pytest.approx(2600 / 3000)
    assert report.cache['overall']['chr'] == pytest.approx(2600 / 4400)
    assert report.latency['ttft']['p50'] == 200.0
    assert report.latency['ttft']['p99'] == 600.0
    assert report.latency['ttfa']['p50'] == 600.0
    assert report.latency['total']['p50'] == 220.0
    assert report.latency['tpot']['p50'] == 10.0
    assert report.throughput['req_throughput'] == pytest.approx(5 / 2.18)
    assert (report.counts['sessions'], report.counts['cold_starts'], report.counts['failures']) == (2, 2, 0)

import json
import math

import pytest

from app.errors import ReportError
from app.metrics.report import (HIGHER, LOWER, LatencySeries, RunReport, assemble, check_assertions,
                                check_laws, compare, direction, load_report, parse_assertion, quantile,
                                render_json, render_text)
from app.sim import events as ev
from app.sim.events import Event, EventLog
from app.utils.health import REMOVED


def _turn(log, at_us, session, turn, required, hit, node='a', cold=False):
    log.append(at_us, ev.ARRIVAL, session=session, turn=turn, required=required, new_tokens=100,
               output_tokens=10)
    log.append(at_us + 10, ev.DISPATCH, session=session, turn=turn, node=node, attempt=0)
    log.append(at_us + 200_000, ev.PREFILL_DONE, session=session, turn=turn, node=node, attempt=0)
    log.append(at_us + 300_000, ev.FIRST_TOKEN, session=session, turn=turn, node=node, attempt=0)
    log.append(at_us + 500_000, ev.TURN_DONE, session=session, turn=turn, node=node, attempt=0,
               status='ok', required=required, hit=hit, miss=required - hit, cold_start=cold,
               new_tokens=100, output_tokens=10, prefill_ms=(required - hit) * 0.18, ttft_ms=300.0,
               ttfa_ms=700.0, total_ms=500.0, tpot_samples=[20.0, 21.0], committed_tokens=required - hit)


@pytest.fixture
def two_turns():
    log = EventLog({'scenario': 'unit', 'label': 'run', 'config_digest': 'abc123'})
    _turn(log, 0, 's0', 0, 1000, 0, cold=True)
    _turn(log, 1_500_000, 's0', 1, 1100, 1000)
    return log


def test_quantile_is_nearest_rank():
    samples = list(range(1, 101))
    assert quantile(samples, 0.5) == 50
    assert quantile(samples, 0.95) == 95
    assert quantile(samples, 0.99) == 99
    assert quantile([7.0], 0.99) == 7.0
    assert quantile([3, 1, 2], 0.5) == 2


def test_quantile_errors():
    with pytest.raises(ReportError):
        quantile([], 0.5)
    for q in (0, 1, 1.5):
        with pytest.raises(ReportError):
            quantile([1.0], q)


def test_latency_series_domain():
    series = LatencySeries('ttfa')
    assert series.summary() == {'p50': 0.0, 'p95': 0.0, 'p99': 0.0, 'mean': 0.0}
    for bad in (-1.0, math.nan, math.inf):
        with pytest.raises(ReportError):
            series.add(bad)
    series.add(10)
    series.add(30)
    assert series.summary()['mean'] == 20.0
    assert series.summary()['p99'] == 30.0


def test_assemble_cache_buckets(two_turns):
    report = assemble(two_turns)
    assert report.errors == []
    cold, steady, overall = (report.cache[b] for b in ('cold', 'steady', 'overall'))
    assert cold['chr'] == 0.0
    assert cold['reuse_factor'] == 0.0
    assert steady['chr'] == pytest.approx(1000 / 1100)
    assert steady['reuse_factor'] == pytest.approx(10.0)
    assert steady['avg_recomputed'] == 100
    assert overall['lookups'] == 2
    assert overall['hit_tokens'] + overall['miss_tokens'] == 2100
    assert report.counts['turns'] == 2
    assert report.counts['sessions'] == 1
    assert report.counts['cold_starts'] == 1
    assert report.throughput['req_throughput'] == pytest.approx(2 / 2.0)
    assert report.latency['tpot']['p99'] == 21.0
    assert report.scenario == 'unit'


def test_all_hit_reuse_is_none():
    log = EventLog()
    _turn(log, 0, 's0', 0, 500, 500)
    report = assemble(log)
    assert report.cache['overall']['reuse_factor'] is None
    assert 'all-hit' in render_text(report)


def test_empty_log_reports_zeros():
    report = assemble(EventLog())
    assert report.throughput['req_throughput'] == 0.0
    assert report.cache['overall']['lookups'] == 0


def test_laws_hold(two_turns):
    assert check_laws(two_turns) == []


def test_conservation_violation(two_turns):
    two_turns.events[-1].payload['miss'] += 1
    laws = {law for law, _ in check_laws(two_turns)}
    assert 'conservation' in laws
    with pytest.raises(ReportError) as e:
        assemble(two_turns)
    assert e.value.law == 'conservation'
    assert assemble(two_turns, strict=False).errors


def test_time_order_violation(two_turns):
    two_turns.events.append(Event(5, ev.PROBE, {'node': 'a', 'ok': True, 'latency_ms': 1.0}))
    assert ('time order' in {law for law, _ in check_laws(two_turns)})


def test_causality_violation():
    log = EventLog()
    _turn(log, 0, 's0', 0, 1000, 0, cold=True)
    first_token = log.of_kind(ev.FIRST_TOKEN)[0]
    prefill = log.of_kind(ev.PREFILL_DONE)[0]
    first_token.time_us, prefill.time_us = prefill.time_us, first_token.time_us
    laws = {law for law, _ in check_laws(log)}
    assert 'causality' in laws


def test_dispatch_without_outcome():
    log = EventLog()
    log.append(0, ev.ARRIVAL, session='s0', turn=0, required=10, new_tokens=10, output_tokens=1)
    log.append(1, ev.DISPATCH, session='s0', turn=0, node='a', attempt=0)
    laws = {law for law, _ in check_laws(log)}
    assert 'dispatch pairing' in laws
    assert 'termination' in laws


def test_aborted_run_tolerates_unfinished_turns():
    log = EventLog({'aborted': 'no capacity'})
    log.append(0, ev.ARRIVAL, session='s0', turn=0, required=10, new_tokens=10, output_tokens=1)
    assert check_laws(log) == []


def test_dispatch_to_removed_node():
    log = EventLog()
    log.append(0, ev.TRANSITION, node='a', from_state='healthy', to_state=REMOVED)
    _turn(log, 10, 's0', 0, 100, 0, cold=True)
    assert 'removed dispatch' in {law for law, _ in check_laws(log)}


def test_duplicate_outcome():
    log = EventLog()
    _turn(log, 0, 's0', 0, 100, 0, cold=True)
    log.append(600_000, ev.FAILURE, session='s0', turn=0, node=None, attempt=1, reason='no_capacity',
               final=True, required=100, elapsed_ms=600.0)
    assert 'termination' in {law for law, _ in check_laws(log)}


def test_final_failures_count_toward_ttfa():
    log = EventLog()
    log.append(0, ev.ARRIVAL, session='s0', turn=0, required=10, new_tokens=10, output_tokens=1)
    log.append(10, ev.DISPATCH, session='s0', turn=0, node='a', attempt=0)
    log.append(3_000_010, ev.FAILURE, session='s0', turn=0, node='a', attempt=0, reason='timeout',
               final=True, required=10, elapsed_ms=3000.0)
    report = assemble(log)
    assert report.counts['failures'] == 1
    assert report.latency['ttfa']['p99'] == 3000.0


def test_direction():
    assert direction('req_throughput') == HIGHER
    assert direction('steady_chr') == HIGHER
    assert direction('ttfa_p99') == LOWER
    assert direction('steady_prefill_ms') == LOWER
    assert direction('failures') == LOWER
    assert direction('sessions') is None


def test_compare_and_undefined_ratio(two_turns):
    a = assemble(two_turns)
    rows = {r.key: r for r in compare(a, a)}
    assert rows['req_throughput'].ratio == 1.0
    assert rows['failures'].undefined
    assert rows['cold_chr'].undefined


def test_assertions(two_turns):
    rows = compare(assemble(two_turns), assemble(two_turns))
    assert check_assertions(rows, ['req_throughput ratio >= 1.0', 'ttfa_p99 ratio == 1']) == []
    failed = check_assertions(rows, ['req_throughput ratio > 1.0', 'failures ratio <= 1',
                                     'bogus ratio > 0'])
    assert len(failed) == 3
    assert 'undefined' in failed[1]
    assert 'unknown metric' in failed[2]


def test_parse_assertion():
    assert parse_assertion('req_throughput ratio >= 1.25') == ('req_throughput', '>=', 1.25)
    assert parse_assertion('  ttfa_p99 ratio<0.8 ') == ('ttfa_p99', '<', 0.8)
    for bad in ('req_throughput >= 1.25', 'req_throughput ratio => 1', 'x ratio >= abc'):
        with pytest.raises(ReportError):
            parse_assertion(bad)


def test_render_json_is_stable(two_turns, tmp_path):
    report = assemble(two_turns)
    text = render_json(report)
    assert text == render_json(assemble(two_turns))
    data = json.loads(text)
    assert data['cache']['steady']['chr'] == round(1000 / 1100, 6)

    path = tmp_path / 'report.json'
    path.write_text(text)
    loaded = load_report(str(path))
    assert loaded.flat()['steady_chr'] == data['cache']['steady']['chr']


def test_unknown_report_keys_rejected(tmp_path):
    with pytest.raises(ReportError):
        RunReport.from_dict({'label': 'x', 'extra': 1})
    path = tmp_path / 'bad.json'
    path.write_text('{not json')
    with pytest.raises(ReportError):
        load_report(str(path))


def test_render_text_sections(two_turns):
    text = render_text(assemble(two_turns))
    assert 'Cache hit rate' in text
    assert 'TTFA' in text
    assert 'req_throughput' in text

"""Run reports: exact quantiles, assembly from an event log, comparison.

Assembly is a pure function of the log. It re-checks the run's laws
(time order, causality, dispatch pairing, token conservation, no dispatch to
a Removed node, one outcome per turn) before computing anything.
"""
import json
import math
import re
from dataclasses import asdict, dataclass, field

import numpy as np

from app.errors import ReportError
from app.models import STATUS_REROUTED_COLD
from app.sim import events as ev
from app.utils.cache import CacheCounters, CacheMetrics
from app.utils.health import REMOVED

LABELS = ('ttfa', 'ttft', 'prefill', 'tpot', 'total')
STATS = ('p50', 'p95', 'p99', 'mean')
BUCKETS = ('cold', 'steady', 'overall')
THROUGHPUT_KEYS = ('req_throughput', 'in_tok_throughput', 'out_tok_throughput')
COUNT_KEYS = ('sessions', 'turns', 'completed', 'failures', 'retries', 'reroutes', 'cold_starts',
              'evictions', 'dispatches')
ROUND_DIGITS = 6

HIGHER = 'higher'
LOWER = 'lower'


def quantile(samples, q):
    """Nearest-rank order statistic: the ceil(q*n)-th smallest sample"""
    if not 0 < q < 1:
        raise ReportError(f'quantile must be in (0, 1), got {q}')
    ordered = np.sort(np.asarray(samples, dtype=float))
    n = len(ordered)
    if n == 0:
        raise ReportError('quantile of an empty series')
    k = max(1, math.ceil(q * n - 1e-9))
    return float(ordered[k - 1])


@dataclass
class LatencySeries:
    label: str
    samples: list = field(default_factory=list)

    def add(self, value):
        value = float(value)
        if not math.isfinite(value) or value < 0:
            raise ReportError(f'{self.label}: sample {value} is not a finite non-negative latency',
                              law='latency domain')
        self.samples.append(value)

    def summary(self):
        """P50/P95/P99/mean in ms; all zero for an empty series"""
        if not self.samples:
            return {s: 0.0 for s in STATS}
        return {
            'p50': quantile(self.samples, 0.50),
            'p95': quantile(self.samples, 0.95),
            'p99': quantile(self.samples, 0.99),
            'mean': float(np.mean(self.samples)),
        }


@dataclass
class RunReport:
    label: str = ''
    scenario: str = ''
    config_digest: str = ''
    cache: dict = field(default_factory=dict)
    eviction_rate: float = 0.0
    latency: dict = field(default_factory=dict)
    throughput: dict = field(default_factory=dict)
    counts: dict = field(default_factory=dict)
    elapsed_s: float = 0.0
    aborted: str = None
    errors: list = field(default_factory=list)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ReportError(f'unknown report key(s): {", ".join(sorted(unknown))}', law='schema')
        return cls(**data)

    def flat(self):
        """Short metric keys (``req_throughput``, ``steady_chr``, ``ttfa_p99``) for comparison"""
        out = {}
        for key in THROUGHPUT_KEYS:
            out[key] = self.throughput.get(key)
        for bucket in BUCKETS:
            b = self.cache.get(bucket, {})
            out[f'{bucket}_chr'] = b.get('chr')
            out[f'{bucket}_reuse'] = b.get('reuse_factor')
            out[f'{bucket}_recomputed'] = b.get('avg_recomputed')
            out[f'{bucket}_prefill_ms'] = b.get('avg_prefill_ms')
        out['eviction_rate'] = self.eviction_rate
        for label in LABELS:
            for stat in STATS:
                out[f'{label}_{stat}'] = self.latency.get(label, {}).get(stat)
        for key in COUNT_KEYS:
            out[key] = self.counts.get(key)
        return out


def direction(key):
    """Which way is better for a flattened metric; None when neither"""
    if key in THROUGHPUT_KEYS or key.endswith('_chr') or key.endswith('_reuse'):
        return HIGHER
    if key in ('failures', 'retries', 'reroutes', 'evictions', 'eviction_rate'):
        return LOWER
    if key.endswith(('_recomputed', '_prefill_ms')) or key.split('_')[0] in LABELS:
        return LOWER
    return None


def _round(value):
    if isinstance(value, float):
        return round(value, ROUND_DIGITS)
    if isinstance(value, dict):
        return {k: _round(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_round(v) for v in value]
    return value


def check_laws(log):
    """List of (law, message) violations found in ``log``"""
    violations = []
    aborted = log.meta.get('aborted')

    previous = None
    for e in log:
        if previous is not None and e.time_us < previous:
            violations.append(('time order', f'{e.kind} at {e.time_us} us precedes {previous} us'))
        previous = e.time_us

    arrivals = {}
    for e in log.of_kind(ev.ARRIVAL):
        arrivals[(e.payload['session'], e.payload['turn'])] = e.payload

    # Per attempt: dispatch <= prefill_done <= first_token <= turn_done
    stages = (ev.DISPATCH, ev.PREFILL_DONE, ev.FIRST_TOKEN, ev.TURN_DONE)
    times = {}
    terminal = {}
    outcomes = {}
    state = {}
    for e in log:
        p = e.payload
        if e.kind == ev.TRANSITION:
            state[p['node']] = p['to_state']
            continue
        if e.kind == ev.DISPATCH and state.get(p['node']) == REMOVED:
            violations.append(('removed dispatch',
                               f'{p["session"]}#{p["turn"]} dispatched to Removed node {p["node"]}'))
        if e.kind in stages or e.kind == ev.FAILURE:
            attempt = (p['session'], p['turn'], p.get('attempt', 0))
            times.setdefault(attempt, {})[e.kind] = e.time_us
            if e.kind in (ev.TURN_DONE, ev.FAILURE) and p.get('node') is not None:
                terminal[attempt] = terminal.get(attempt, 0) + 1
            if e.kind == ev.TURN_DONE or (e.kind == ev.FAILURE and p.get('final')):
                key = (p['session'], p['turn'])
                outcomes[key] = outcomes.get(key, 0) + 1

    for attempt, t in sorted(times.items()):
        seen = [t[k] for k in stages if k in t]
        if seen != sorted(seen):
            violations.append(('causality', f'{attempt[0]}#{attempt[1]} attempt {attempt[2]} out of order'))
        if ev.DISPATCH in t and terminal.get(attempt, 0) != 1:
            violations.append(('dispatch pairing',
                               f'{attempt[0]}#{attempt[1]} attempt {attempt[2]} has '
                               f'{terminal.get(attempt, 0)} outcome records'))

    hit_miss = 0
    required = 0
    for e in log.of_kind(ev.TURN_DONE):
        p = e.payload
        if p['hit'] + p['miss'] != p['required']:
            violations.append(('conservation', f'{p["session"]}#{p["turn"]}: hit + miss != required'))
        arrival = arrivals.get((p['session'], p['turn']))
        if arrival is None:
            violations.append(('conservation', f'{p["session"]}#{p["turn"]} completed without arriving'))
            continue
        hit_miss += p['hit'] + p['miss']
        required += arrival['required']
    if hit_miss != required:
        violations.append(('conservation', f'served {hit_miss} context tokens for {required} required'))

    for key in sorted(set(arrivals) | set(outcomes)):
        count = outcomes.get(key, 0)
        if count > 1 or (count == 0 and not aborted) or key not in arrivals:
            violations.append(('termination', f'{key[0]}#{key[1]} has {count} outcomes'))
    return violations


def _bucket(records):
    counters = CacheCounters()
    prefill = 0.0
    for p in records:
        counters.lookups += 1
        counters.hits_tokens += p['hit']
        counters.miss_tokens += p['miss']
        if p['cold_start']:
            counters.cold_lookups += 1
            counters.cold_miss_tokens += p['miss']
        prefill += p['prefill_ms']
    if counters.lookups == 0:
        return {'lookups': 0, 'hit_tokens': 0, 'miss_tokens': 0, 'chr': 0.0, 'reuse_factor': None,
                'avg_recomputed': 0.0, 'avg_prefill_ms': 0.0}
    m = CacheMetrics.from_counters(counters)
    return {
        'lookups': m.lookups,
        'hit_tokens': m.hit_tokens,
        'miss_tokens': m.miss_tokens,
        'chr': m.chr,
        'reuse_factor': m.reuse_factor,
        'avg_recomputed': m.miss_tokens / m.lookups,
        'avg_prefill_ms': prefill / m.lookups,
    }


def assemble(log, strict=True):
    """
    Build a RunReport from a completed (or snapshot) event log
    With ``strict`` a violated law raises ReportError naming it; otherwise it is listed in ``errors``
    """
    violations = check_laws(log)
    if violations and strict:
        law, message = violations[0]
        raise ReportError(f'{law} violated: {message}', law=law)

    done = [e for e in log.of_kind(ev.TURN_DONE)]
    records = [e.payload for e in done]
    failures = log.of_kind(ev.FAILURE)

    series = {label: LatencySeries(label) for label in LABELS}
    for p in records:
        series['ttfa'].add(p['ttfa_ms'])
        series['ttft'].add(p['ttft_ms'])
        series['prefill'].add(p['prefill_ms'])
        series['total'].add(p['total_ms'])
        for sample in p.get('tpot_samples', ()):
            series['tpot'].add(sample)
    for e in failures:
        if e.payload.get('final') and 'elapsed_ms' in e.payload:
            series['ttfa'].add(e.payload['elapsed_ms'])
            series['total'].add(e.payload['elapsed_ms'])

    elapsed_s = done[-1].time_us / 1e6 if done else 0.0
    in_tokens = sum(p['required'] for p in records)
    out_tokens = sum(p['output_tokens'] for p in records)
    throughput = {
        'req_throughput': len(records) / elapsed_s if elapsed_s else 0.0,
        'in_tok_throughput': in_tokens / elapsed_s if elapsed_s else 0.0,
        'out_tok_throughput': out_tokens / elapsed_s if elapsed_s else 0.0,
    }

    evictions = log.of_kind(ev.EVICTION)
    evicted = sum(e.payload['tokens'] for e in evictions)
    committed = sum(p.get('committed_tokens', 0) for p in records)
    arrivals = log.of_kind(ev.ARRIVAL)

    counts = {
        'sessions': len({e.payload['session'] for e in arrivals}),
        'turns': len(arrivals),
        'completed': len(records),
        'failures': sum(1 for e in failures if e.payload.get('final')),
        'retries': sum(1 for e in failures if not e.payload.get('final')),
        'reroutes': sum(1 for p in records if p.get('rerouted') or p.get('status') == STATUS_REROUTED_COLD),
        'cold_starts': sum(1 for p in records if p['cold_start']),
        'evictions': len(evictions),
        'dispatches': len(log.of_kind(ev.DISPATCH)),
    }

    return RunReport(
        label=log.meta.get('label', ''),
        scenario=log.meta.get('scenario', ''),
        config_digest=log.meta.get('config_digest', ''),
        cache={
            'cold': _bucket([p for p in records if p['cold_start']]),
            'steady': _bucket([p for p in records if not p['cold_start']]),
            'overall': _bucket(records),
        },
        eviction_rate=evicted / committed if committed else 0.0,
        latency={label: series[label].summary() for label in LABELS},
        throughput=throughput,
        counts=counts,
        elapsed_s=elapsed_s,
        aborted=log.meta.get('aborted'),
        errors=[f'{law}: {message}' for law, message in violations],
    )


# Comparison

@dataclass(frozen=True)
class CompareRow:
    key: str
    a: float
    b: float
    ratio: float = None
    direction: str = None
    undefined: bool = False


def compare(a, b):
    """Per-metric ratio a/b; zero or missing denominators are flagged, not computed"""
    fa, fb = a.flat(), b.flat()
    if set(fa) != set(fb):
        raise ReportError('reports do not share a metric schema', law='schema')
    rows = []
    for key in fa:
        va, vb = fa[key], fb[key]
        if va is None or vb is None or vb == 0:
            rows.append(CompareRow(key, va, vb, None, direction(key), True))
        else:
            rows.append(CompareRow(key, va, vb, va / vb, direction(key)))
    return rows


_ASSERTION = re.compile(r'^\s*(?P<key>[a-z0-9_]+)\s+ratio\s*(?P<op>>=|<=|==|>|<)\s*(?P<value>[-+0-9.eE]+)\s*$')
_OPS = {
    '>=': lambda x, y: x >= y,
    '<=': lambda x, y: x <= y,
    '>': lambda x, y: x > y,
    '<': lambda x, y: x < y,
    '==': lambda x, y: x == y,
}


def parse_assertion(text):
    """``"req_throughput ratio >= 1.25"`` -> (key, op, value)"""
    m = _ASSERTION.match(text)
    if not m:
        raise ReportError(f'bad assertion {text!r}; expected "<key> ratio <op> <number>"', law='assertion')
    try:
        value = float(m.group('value'))
    except ValueError:
        raise ReportError(f'bad number in assertion {text!r}', law='assertion')
    return m.group('key'), m.group('op'), value


def check_assertions(rows, assertions):
    """Failed assertion messages; an undefined or unknown ratio fails its assertion"""
    by_key = {row.key: row for row in rows}
    failed = []
    for text in assertions:
        key, op, value = parse_assertion(text)
        row = by_key.get(key)
        if row is None:
            failed.append(f'{text}: unknown metric {key!r}')
        elif row.undefined:
            failed.append(f'{text}: ratio undefined')
        elif not _OPS[op](row.ratio, value):
            failed.append(f'{text}: ratio is {row.ratio:.4f}')
    return failed


# Rendering

def _fmt(value, pct=False, unit=''):
    if value is None:
        return '-'
    if isinstance(value, int) and not isinstance(value, bool):
        return str(value)
    if pct:
        return f'{value * 100:.1f}%'
    return f'{value:.2f}{unit}'


def _table(header, rows):
    widths = [max(len(str(r[i])) for r in [header] + rows) for i in range(len(header))]
    lines = ['  '.join(str(c).ljust(w) if i == 0 else str(c).rjust(w)
                       for i, (c, w) in enumerate(zip(r, widths)))
             for r in [header] + rows]
    lines.insert(1, '  '.join('-' * w for w in widths))
    return '\n'.join(lines)


def render_text(report):
    """Aligned plain-text tables: cache efficiency, latency, throughput, counts"""
    c = report.cache
    reuse = []
    for bucket in BUCKETS:
        b = c.get(bucket, {})
        if b.get('lookups') and b.get('reuse_factor') is None:
            reuse.append('all-hit')
        else:
            reuse.append(_fmt(b.get('reuse_factor'), unit='x'))
    cache_rows = [
        ['Cache hit rate'] + [_fmt(c[b]['chr'], pct=True) for b in BUCKETS],
        ['Avg recomputed tokens'] + [_fmt(c[b]['avg_recomputed']) for b in BUCKETS],
        ['Context reuse factor'] + reuse,
        ['Avg prefill latency'] + [_fmt(c[b]['avg_prefill_ms'], unit=' ms') for b in BUCKETS],
        ['Lookups'] + [_fmt(c[b]['lookups']) for b in BUCKETS],
    ]
    latency_rows = [[label.upper()] + [_fmt(report.latency[label][s]) for s in STATS] for label in LABELS]
    throughput_rows = [[k, _fmt(report.throughput[k])] for k in THROUGHPUT_KEYS]
    count_rows = [[k, str(report.counts[k])] for k in COUNT_KEYS]

    out = [
        f'Run {report.label} ({report.scenario}, digest {report.config_digest})',
        '',
        _table(['Prefix cache', 'Cold start (turn 0)', 'Steady state', 'Overall'], cache_rows),
        f'Eviction rate: {_fmt(report.eviction_rate, pct=True)}',
        '',
        _table(['Latency (ms)', 'P50', 'P95', 'P99', 'Mean'], latency_rows),
        '',
        _table(['Throughput', 'per second'], throughput_rows),
        '',
        _table(['Counts', ''], count_rows),
    ]
    if report.aborted:
        out.append(f'\nABORTED: {report.aborted}')
    for error in report.errors:
        out.append(f'ERROR: {error}')
    return '\n'.join(out) + '\n'


def render_json(report):
    """Sorted keys and rounded floats, so equal runs are byte-identical"""
    return json.dumps(_round(report.to_dict()), sort_keys=True, indent=2) + '\n'


def render_compare_text(rows, label_a='a', label_b='b'):
    table = []
    for row in rows:
        ratio = 'undefined' if row.undefined else f'{row.ratio:.4f}'
        table.append([row.key, _fmt(row.a), _fmt(row.b), ratio, row.direction or '-'])
    return _table(['Metric', label_a, label_b, 'Ratio a/b', 'Better'], table) + '\n'


def render_compare_json(rows):
    return json.dumps([_round(asdict(r)) for r in rows], sort_keys=True, indent=2) + '\n'


def load_report(path):
    try:
        with open(path) as f:
            return RunReport.from_dict(json.load(f))
    except (OSError, json.JSONDecodeError, TypeError) as e:
        raise ReportError(f'cannot read report {path}: {e}', law='schema')

"""Clinical workload profiles, trace generation and trace files.

A turn's history delta (``new_tokens``) folds in the previous agent reply plus
the new user utterance and tool output, so
``required(t) = required(t-1) + new_tokens(t)`` and turn 0 requires the whole
initial context.

Trace file: tab-separated, one TurnRequest per line, header line::

    #session_id  turn_index  required_context_tokens  new_tokens  output_tokens  arrival_us
"""
import csv
import logging
from dataclasses import dataclass, fields, replace

from app.errors import TraceError, WorkloadError
from app.models import TurnRequest
from app.utils.distributions import Distribution, stream

logger = logging.getLogger(__name__)

TRACE_FIELDS = ('session_id', 'turn_index', 'required_context_tokens', 'new_tokens', 'output_tokens', 'arrival_us')
TRACE_HEADER = '#' + '\t'.join(TRACE_FIELDS)


@dataclass(frozen=True)
class WorkloadProfile:
    name: str
    initial_context_tokens: Distribution
    new_tokens_per_turn: Distribution
    output_tokens_per_turn: Distribution
    turns_per_session: Distribution
    inter_turn_gap_ms: Distribution
    arrival_rate: float

    def __post_init__(self):
        if not self.name:
            raise WorkloadError('profile name must be non-empty')
        if self.arrival_rate < 0:
            raise WorkloadError('arrival_rate must be >= 0')

    @classmethod
    def from_config(cls, data, base=None):
        """Explicit profile block, or overrides on top of ``base``"""
        data = dict(data)
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise WorkloadError(f'unknown profile key(s): {", ".join(sorted(unknown))}')
        values = {}
        for key, value in data.items():
            if key == 'name':
                values[key] = str(value)
            elif key == 'arrival_rate':
                values[key] = float(value)
            else:
                values[key] = Distribution.from_config(value)
        if base is not None:
            return replace(base, **values)
        missing = known - set(values)
        if missing:
            raise WorkloadError(f'profile missing key(s): {", ".join(sorted(missing))}')
        return cls(**values)

    def to_config(self):
        out = {}
        for f in fields(self):
            value = getattr(self, f.name)
            out[f.name] = value.to_config() if isinstance(value, Distribution) else value
        return out

    def __repr__(self):
        return f'<WorkloadProfile {self.name} {self.arrival_rate}/s>'


_LN = Distribution.lognormal
_GEO = Distribution.geometric

BUILTIN_PROFILES = {
    # High-context RAG: schedule blocks injected up front
    'pcp_scheduling': WorkloadProfile(
        name='pcp_scheduling',
        initial_context_tokens=_LN(9000, 0.15),
        new_tokens_per_turn=_LN(150, 0.4),
        output_tokens_per_turn=_LN(45, 0.4),
        turns_per_session=_GEO(14, shift=4),
        inter_turn_gap_ms=_LN(6000, 0.5),
        arrival_rate=0.5,
    ),
    # Long-horizon dialogue, linear growth
    'discharge_followup': WorkloadProfile(
        name='discharge_followup',
        initial_context_tokens=_LN(3000, 0.25),
        new_tokens_per_turn=_LN(110, 0.4),
        output_tokens_per_turn=_LN(40, 0.4),
        turns_per_session=_GEO(65, shift=45),
        inter_turn_gap_ms=_LN(5000, 0.5),
        arrival_rate=0.2,
    ),
    'care_gap': WorkloadProfile(
        name='care_gap',
        initial_context_tokens=_LN(2500, 0.25),
        new_tokens_per_turn=_LN(120, 0.4),
        output_tokens_per_turn=_LN(40, 0.4),
        turns_per_session=_GEO(55, shift=35),
        inter_turn_gap_ms=_LN(5000, 0.5),
        arrival_rate=0.3,
    ),
    'welcome_call': WorkloadProfile(
        name='welcome_call',
        initial_context_tokens=_LN(2000, 0.25),
        new_tokens_per_turn=_LN(120, 0.4),
        output_tokens_per_turn=_LN(40, 0.4),
        turns_per_session=_GEO(25, shift=12),
        inter_turn_gap_ms=_LN(5000, 0.5),
        arrival_rate=0.3,
    ),
    # Engagement and verification, short horizon
    'insurance_benefits': WorkloadProfile(
        name='insurance_benefits',
        initial_context_tokens=_LN(1800, 0.25),
        new_tokens_per_turn=_LN(100, 0.4),
        output_tokens_per_turn=_LN(35, 0.4),
        turns_per_session=_GEO(6, shift=2),
        inter_turn_gap_ms=_LN(4000, 0.5),
        arrival_rate=1.0,
    ),
}


def builtin_profile(name):
    if name not in BUILTIN_PROFILES:
        raise WorkloadError(f'unknown workload profile {name!r}; expected one of {", ".join(sorted(BUILTIN_PROFILES))}')
    return BUILTIN_PROFILES[name]


def _session_turns(profile, session_id, start_us, rng):
    turns = profile.turns_per_session.sample_count(rng, minimum=1)
    required = profile.initial_context_tokens.sample_count(rng)
    arrival = start_us
    out = []
    for t in range(turns):
        if t == 0:
            new_tokens = required
        else:
            new_tokens = profile.new_tokens_per_turn.sample_count(rng)
            required += new_tokens
            arrival += int(round(profile.inter_turn_gap_ms.sample(rng) * 1000))
        out.append(TurnRequest(
            session=session_id,
            turn_index=t,
            required_context_tokens=required,
            new_tokens=new_tokens,
            output_tokens=profile.output_tokens_per_turn.sample_count(rng),
            arrival=arrival,
        ))
    return out


def generate_trace(profile, duration_s, rng, weight=1.0):
    """
    Poisson session arrivals over ``duration_s``; each session's turns follow
    its start with sampled gaps; result sorted by (arrival, session, turn)
    """
    if duration_s <= 0:
        raise WorkloadError('duration must be > 0')
    rate = profile.arrival_rate * weight
    trace = []
    if rate <= 0:
        return trace

    horizon_us = int(duration_s * 1_000_000)
    now_us = 0
    index = 0
    while True:
        now_us += int(round(rng.exponential(1.0 / rate) * 1_000_000))
        if now_us > horizon_us:
            break
        trace.extend(_session_turns(profile, f'{profile.name}-{index:06d}', now_us, rng))
        index += 1

    trace.sort(key=lambda r: (r.arrival, r.session, r.turn_index))
    logger.debug(f'Generated {index} sessions / {len(trace)} turns for {profile.name}')
    return trace


def generate_mixed_trace(components, duration_s, seed):
    """
    Merge traces of ``[(profile, weight), ...]``; session ids stay distinct by profile prefix
    Each component draws from its own ``workload`` stream keyed by profile name
    """
    names = [p.name for p, _ in components]
    if len(set(names)) != len(names):
        raise WorkloadError('mixed workload components must have distinct profile names')
    trace = []
    for profile, weight in components:
        trace.extend(generate_trace(profile, duration_s, stream(seed, 'workload', profile.name), weight=weight))
    trace.sort(key=lambda r: (r.arrival, r.session, r.turn_index))
    return trace


def check_trace(trace, linenos=None):
    """
    Validate session ordering and context monotonicity
    Turn indexes of a session must be 0..n-1 in arrival order
    """
    last = {}
    previous_arrival = None
    linenos = linenos or range(1, len(trace) + 1)
    for lineno, turn in zip(linenos, trace):
        if previous_arrival is not None and turn.arrival < previous_arrival:
            raise TraceError('arrivals must be non-decreasing', line=lineno)
        previous_arrival = turn.arrival
        prior = last.get(turn.session)
        expected = 0 if prior is None else prior.turn_index + 1
        if turn.turn_index != expected:
            raise TraceError(f'{turn.session}: expected turn {expected}, got {turn.turn_index}', line=lineno)
        if prior is not None and turn.required_context_tokens < prior.required_context_tokens:
            raise TraceError(f'{turn.session}: context shrank at turn {turn.turn_index}', line=lineno)
        last[turn.session] = turn
    return trace


def write_trace(trace, path):
    with open(path, 'w', newline='') as f:
        f.write(TRACE_HEADER + '\n')
        writer = csv.writer(f, delimiter='\t', lineterminator='\n')
        for r in trace:
            writer.writerow([r.session, r.turn_index, r.required_context_tokens,
                             r.new_tokens, r.output_tokens, r.arrival])


def read_trace(path):
    """Parse a trace file; errors name the offending line"""
    trace = []
    linenos = []
    with open(path, newline='') as f:
        # header is line 1; data lines follow
        for lineno, raw in enumerate(f, start=1):
            line = raw.rstrip('\n')
            if lineno == 1:
                if line != TRACE_HEADER:
                    raise TraceError(f'expected header {TRACE_HEADER!r}', line=lineno)
                continue
            if not line.strip():
                continue
            parts = line.split('\t')
            if len(parts) != len(TRACE_FIELDS):
                raise TraceError(f'expected {len(TRACE_FIELDS)} fields, got {len(parts)}', line=lineno)
            if not raw.endswith('\n'):
                raise TraceError('truncated record (missing newline)', line=lineno)
            session = parts[0]
            if not session:
                raise TraceError('empty session id', line=lineno)
            try:
                values = [int(p) for p in parts[1:]]
            except ValueError:
                raise TraceError('numeric fields must be integers', line=lineno)
            if any(v < 0 for v in values):
                raise TraceError('numeric fields must be non-negative', line=lineno)
            turn_index, required, new_tokens, output_tokens, arrival = values
            trace.append(TurnRequest(session, turn_index, required, new_tokens, output_tokens, arrival))
            linenos.append(lineno)

    return check_trace(trace, linenos)

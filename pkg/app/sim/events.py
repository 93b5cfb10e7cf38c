"""Event log of a run: ordered (time, kind, payload) records, exportable as JSON lines."""
import json
from dataclasses import dataclass, field

from app.errors import ReportError

ARRIVAL = 'arrival'
DISPATCH = 'dispatch'
PREFILL_DONE = 'prefill_done'
FIRST_TOKEN = 'first_token'
TURN_DONE = 'turn_done'
FAILURE = 'failure'
PROBE = 'probe'
TRANSITION = 'transition'
EVICTION = 'eviction'
FAULT = 'fault'

KINDS = (ARRIVAL, DISPATCH, PREFILL_DONE, FIRST_TOKEN, TURN_DONE, FAILURE, PROBE, TRANSITION,
         EVICTION, FAULT)


@dataclass
class Event:
    time_us: int
    kind: str
    payload: dict = field(default_factory=dict)

    def to_record(self):
        return {'time_us': self.time_us, 'kind': self.kind, **self.payload}

    @classmethod
    def from_record(cls, record):
        record = dict(record)
        return cls(int(record.pop('time_us')), record.pop('kind'), record)


class EventLog:
    """
    Append-only, time-ordered record of a run
    ``meta`` carries the run identity (scenario name, digest, label, abort marker)
    """

    def __init__(self, meta=None):
        self.meta = dict(meta or {})
        self.events = []

    def append(self, time_us, kind, **payload):
        if kind not in KINDS:
            raise ReportError(f'unknown event kind {kind!r}', law='schema')
        if self.events and time_us < self.events[-1].time_us:
            raise ReportError(f'{kind} at {time_us} us precedes {self.events[-1].time_us} us', law='time order')
        event = Event(int(time_us), kind, payload)
        self.events.append(event)
        return event

    def of_kind(self, *kinds):
        return [e for e in self.events if e.kind in kinds]

    def __iter__(self):
        return iter(self.events)

    def __len__(self):
        return len(self.events)

    def to_jsonl(self):
        lines = [json.dumps({'kind': 'meta', **self.meta}, sort_keys=True)]
        lines.extend(json.dumps(e.to_record(), sort_keys=True) for e in self.events)
        return '\n'.join(lines) + '\n'

    def write_jsonl(self, path):
        with open(path, 'w') as f:
            f.write(self.to_jsonl())

    @classmethod
    def read_jsonl(cls, path):
        log = cls()
        with open(path) as f:
            for lineno, line in enumerate(f, start=1):
                if not line.strip():
                    continue
                try:
                    record = json.loads(line)
                except json.JSONDecodeError as e:
                    raise ReportError(f'line {lineno}: {e.msg}', law='schema')
                if record.get('kind') == 'meta':
                    record.pop('kind')
                    log.meta = record
                    continue
                event = Event.from_record(record)
                log.append(event.time_us, event.kind, **event.payload)
        return log

    def __repr__(self):
        return f'<EventLog {len(self.events)} events>'

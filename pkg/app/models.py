"""Records shared by the simulator, the live gateway and reports."""
from dataclasses import asdict, dataclass, field

# Reply statuses
STATUS_OK = 'ok'
STATUS_REROUTED_COLD = 'rerouted_cold'
STATUS_NO_CAPACITY = 'no_capacity'
STATUS_NODE_ERROR = 'node_error'
STATUSES = (STATUS_OK, STATUS_REROUTED_COLD, STATUS_NO_CAPACITY, STATUS_NODE_ERROR)

# Routing policies
STICKY = 'sticky_consistent_hash'
ROUND_ROBIN = 'round_robin'
ROUTING_POLICIES = (STICKY, ROUND_ROBIN)


@dataclass(frozen=True)
class TurnRequest:
    """One conversational turn; ``arrival`` is in microseconds since run start"""
    session: str
    turn_index: int
    required_context_tokens: int
    new_tokens: int
    output_tokens: int
    arrival: int

    def __repr__(self):
        return f'<TurnRequest {self.session}#{self.turn_index} {self.required_context_tokens} tok>'


@dataclass(frozen=True)
class TurnWire:
    """Network form of a TurnRequest"""
    session_id: str
    turn_index: int
    required_context_tokens: int
    new_tokens: int
    output_tokens: int

    @classmethod
    def from_turn(cls, turn):
        return cls(turn.session, turn.turn_index, turn.required_context_tokens,
                   turn.new_tokens, turn.output_tokens)

    def to_record(self):
        return {'type': 'turn', **asdict(self)}


@dataclass
class TurnReply:
    node_id: str
    status: str = STATUS_OK
    hit_tokens: int = 0
    miss_tokens: int = 0
    cold_start: bool = False
    prefill_ms: float = 0.0
    ttft_ms: float = 0.0
    decode_ms: float = 0.0
    total_ms: float = 0.0
    tpot_samples: list = field(default_factory=list)
    message: str = ''
    gateway_ttft_ms: float = None  # set by the gateway, measured to the node's first chunk

    @property
    def ok(self):
        return self.status in (STATUS_OK, STATUS_REROUTED_COLD)

    def to_record(self):
        return {
            'type': 'reply',
            'node_id': self.node_id,
            'status': self.status,
            'cache': {'hit_tokens': self.hit_tokens, 'miss_tokens': self.miss_tokens,
                      'cold_start': self.cold_start},
            'timing': {'prefill_ms': self.prefill_ms, 'ttft_ms': self.ttft_ms,
                       'decode_ms': self.decode_ms, 'total_ms': self.total_ms,
                       'gateway_ttft_ms': self.gateway_ttft_ms},
            'tpot_samples': list(self.tpot_samples),
            'message': self.message,
        }

    @classmethod
    def from_record(cls, record):
        cache = record.get('cache', {})
        timing = record.get('timing', {})
        return cls(
            node_id=record.get('node_id', ''),
            status=record.get('status', STATUS_NODE_ERROR),
            hit_tokens=int(cache.get('hit_tokens', 0)),
            miss_tokens=int(cache.get('miss_tokens', 0)),
            cold_start=bool(cache.get('cold_start', False)),
            prefill_ms=float(timing.get('prefill_ms', 0.0)),
            ttft_ms=float(timing.get('ttft_ms', 0.0)),
            decode_ms=float(timing.get('decode_ms', 0.0)),
            total_ms=float(timing.get('total_ms', 0.0)),
            tpot_samples=list(record.get('tpot_samples', [])),
            message=record.get('message', ''),
            gateway_ttft_ms=timing.get('gateway_ttft_ms'),
        )

    def __repr__(self):
        return f'<TurnReply {self.node_id} {self.status}>'

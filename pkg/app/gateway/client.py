"""Gateway client and trace driver.

The driver replays a trace against a running gateway and records an event
log in the simulator's schema, so live runs are assembled into reports by
the same ``assemble`` as simulated ones.
"""
import asyncio
import logging
from collections import defaultdict

from app.errors import ProtocolError
from app.gateway.wire import MAX_FRAME_BYTES, read_frame, write_frame
from app.models import STATUS_NO_CAPACITY, STATUS_NODE_ERROR, STATUS_REROUTED_COLD, TurnReply, TurnWire
from app.sim import events as ev
from app.sim.engine import turn_entity
from app.sim.events import EventLog
from app.utils.distributions import stream

logger = logging.getLogger(__name__)


class GatewayClient:
    """One connection per turn; at most ``retries`` immediate retries on node_error"""

    def __init__(self, host, port, timeout_ms=3000, retries=1, max_frame_bytes=MAX_FRAME_BYTES):
        self.host = host
        self.port = port
        self.timeout_s = timeout_ms / 1000.0
        self.retries = retries
        self.max_frame_bytes = max_frame_bytes

    async def send_once(self, wire):
        """Returns (reply, first chunk time or None, reply time) on the loop clock"""
        loop = asyncio.get_running_loop()
        reader, writer = await asyncio.wait_for(asyncio.open_connection(self.host, self.port), self.timeout_s)
        try:
            await write_frame(writer, wire.to_record())
            first_at = None
            while True:
                record = await read_frame(reader, self.max_frame_bytes)
                if record is None:
                    raise ConnectionError('gateway closed the connection')
                if record['type'] == 'chunk':
                    first_at = loop.time()
                elif record['type'] == 'reply':
                    return TurnReply.from_record(record), first_at, loop.time()
                elif record['type'] == 'error':
                    raise ProtocolError(record.get('message', 'gateway error'))
        finally:
            writer.close()

    async def send(self, wire):
        """List of (reply, first_at, done_at) attempts; the last one is the outcome"""
        attempts = []
        for _ in range(self.retries + 1):
            result = await self.send_once(wire)
            attempts.append(result)
            if result[0].status != STATUS_NODE_ERROR:
                break
        return attempts


class TraceDriver:
    def __init__(self, scenario, client, time_scale=1.0):
        self.scenario = scenario
        self.client = client
        self.time_scale = time_scale
        self._records = []
        self._last_node = {}
        self._t0 = None

    def _us(self, t):
        return int(round((t - self._t0) * 1_000_000))

    def _add(self, t, kind, **payload):
        self._records.append((self._us(t), kind, payload))

    async def _session(self, turns):
        loop = asyncio.get_running_loop()
        for turn in turns:
            arrival = self._t0 + turn.arrival / 1e6 * self.time_scale
            await asyncio.sleep(max(0.0, arrival - loop.time()))
            released = loop.time()
            self._add(max(arrival, self._t0), ev.ARRIVAL, session=turn.session, turn=turn.turn_index,
                      required=turn.required_context_tokens, new_tokens=turn.new_tokens,
                      output_tokens=turn.output_tokens)
            wire = TurnWire.from_turn(turn)
            dispatched = loop.time()
            attempts = await self.client.send(wire)
            for number, (reply, first_at, done_at) in enumerate(attempts):
                final = number == len(attempts) - 1
                self._record(turn, number, reply, dispatched, first_at, done_at, released, final)
                dispatched = done_at

    def _record(self, turn, number, reply, dispatched, first_at, done_at, released, final):
        base = dict(session=turn.session, turn=turn.turn_index, attempt=number)
        if reply.status == STATUS_NO_CAPACITY:
            self._add(done_at, ev.FAILURE, node=None, reason=STATUS_NO_CAPACITY, final=True,
                      required=turn.required_context_tokens, elapsed_ms=(done_at - released) * 1000.0, **base)
            return
        self._add(dispatched, ev.DISPATCH, node=reply.node_id, **base)
        if reply.status == STATUS_NODE_ERROR:
            failure = dict(node=reply.node_id, reason=reply.message or STATUS_NODE_ERROR, final=final,
                           required=turn.required_context_tokens, **base)
            if final:
                failure['elapsed_ms'] = (done_at - released) * 1000.0
            self._add(done_at, ev.FAILURE, **failure)
            return

        first_at = first_at if first_at is not None else done_at
        prefill_at = min(first_at, dispatched + reply.prefill_ms / 1000.0)
        self._add(prefill_at, ev.PREFILL_DONE, node=reply.node_id, **base)
        self._add(first_at, ev.FIRST_TOKEN, node=reply.node_id, **base)

        ttft_ms = (first_at - released) * 1000.0
        cost = self.scenario.node(reply.node_id).cost
        ttfa_ms, breakdown = cost.ttfa(ttft_ms, stream(self.scenario.seed, 'stages',
                                                       turn_entity(turn.session, turn.turn_index)))
        previous = self._last_node.get(turn.session)
        rerouted = previous is not None and previous != reply.node_id
        self._last_node[turn.session] = reply.node_id
        self._add(done_at, ev.TURN_DONE, node=reply.node_id, status=reply.status,
                  required=turn.required_context_tokens, hit=reply.hit_tokens, miss=reply.miss_tokens,
                  cold_start=reply.cold_start, new_tokens=turn.new_tokens, output_tokens=turn.output_tokens,
                  prefill_ms=reply.prefill_ms, ttft_ms=ttft_ms, ttfa_ms=ttfa_ms, ttfa_breakdown=breakdown,
                  decode_ms=reply.decode_ms, total_ms=(done_at - released) * 1000.0,
                  tpot_samples=list(reply.tpot_samples),
                  committed_tokens=turn.required_context_tokens - reply.hit_tokens,
                  rerouted=rerouted or reply.status == STATUS_REROUTED_COLD, retries=number,
                  gateway_ttft_ms=reply.gateway_ttft_ms, node_ttft_ms=reply.ttft_ms)

    async def run(self, trace, label='live'):
        """Replay ``trace``: sessions run concurrently, turns of a session serially"""
        loop = asyncio.get_running_loop()
        self._t0 = loop.time()
        self._records = []
        by_session = defaultdict(list)
        for turn in trace:
            by_session[turn.session].append(turn)
        logger.info(f'Driving {len(trace)} turns over {len(by_session)} sessions')
        await asyncio.gather(*(self._session(turns) for _, turns in sorted(by_session.items())))

        log = EventLog(meta={
            'scenario': self.scenario.name,
            'label': label,
            'config_digest': self.scenario.digest(),
            'seed': self.scenario.seed,
            'routing_policy': self.scenario.routing_policy,
            'health_checks': self.scenario.health.enabled,
            'nodes': self.scenario.node_ids,
            'aborted': None,
        })
        # Stable sort keeps each attempt's records in causal order on equal timestamps
        for time_us, kind, payload in sorted(self._records, key=lambda r: r[0]):
            log.append(time_us, kind, **payload)
        return log

"""Stub inference node: a real prefix cache plus cost-model delays over TCP."""
import asyncio
import errno
import logging

from app.errors import CacheError, PortInUseError, ProtocolError
from app.gateway.wire import MAX_FRAME_BYTES, error_frame, parse_turn, read_frame, write_frame
from app.models import STATUS_OK, TurnReply
from app.sim.engine import MAX_TPOT_SAMPLES, turn_entity
from app.utils.cache import NodeCache
from app.utils.distributions import stream

logger = logging.getLogger(__name__)


class InferenceNode:
    """
    Serves ``turn`` and ``ping`` frames
    Cache lookups, commits and admission slots are serialized by one lock per node
    """

    def __init__(self, spec, seed, max_frame_bytes=MAX_FRAME_BYTES):
        self.spec = spec
        self.node_id = spec.id
        self.cost = spec.cost
        self.seed = seed
        self.max_frame_bytes = max_frame_bytes
        self.cache = NodeCache(spec.capacity_tokens, spec.bytes_per_token)
        self.served = 0
        self.inflight = 0
        self.host = None
        self.port = None
        self._server = None
        self._lock = None
        self._next_admit = 0.0
        self._connections = set()

    async def start(self, host, port):
        self._lock = asyncio.Lock()
        try:
            self._server = await asyncio.start_server(self._handle, host, port)
        except OSError as e:
            if e.errno == errno.EADDRINUSE:
                raise PortInUseError(host, port)
            raise
        self.host = host
        self.port = self._server.sockets[0].getsockname()[1]
        logger.info(f'Node {self.node_id} listening on {host}:{self.port}')
        return self.port

    async def stop(self, grace_s=5.0):
        """Stop accepting, wait up to ``grace_s`` for in-flight turns, then close connections"""
        if self._server is None:
            return
        self._server.close()
        deadline = asyncio.get_running_loop().time() + grace_s
        while self.inflight and asyncio.get_running_loop().time() < deadline:
            await asyncio.sleep(0.01)
        for writer in list(self._connections):
            writer.close()
        await self._server.wait_closed()
        self._server = None
        logger.info(f'Node {self.node_id} stopped after {self.served} turns')

    def backlog_ms(self):
        loop = asyncio.get_running_loop()
        return max(0.0, self._next_admit - loop.time()) * 1000.0

    async def _handle(self, reader, writer):
        self._connections.add(writer)
        try:
            while True:
                try:
                    record = await read_frame(reader, self.max_frame_bytes)
                except ProtocolError as e:
                    logger.warning(f'Node {self.node_id}: malformed frame: {e}')
                    await write_frame(writer, error_frame(e))
                    continue
                if record is None:
                    break
                kind = record['type']
                if kind == 'ping':
                    await write_frame(writer, {'type': 'pong', 'node_id': self.node_id,
                                               'backlog_ms': self.backlog_ms(),
                                               'resident_tokens': self.cache.resident_tokens})
                elif kind == 'turn':
                    try:
                        wire = parse_turn(record)
                    except ProtocolError as e:
                        await write_frame(writer, error_frame(e))
                        continue
                    await self.serve_turn(wire, writer)
                else:
                    await write_frame(writer, error_frame(f'unexpected frame type {kind!r}'))
        except (ConnectionError, asyncio.CancelledError):
            pass
        finally:
            self._connections.discard(writer)
            writer.close()

    async def serve_turn(self, wire, writer):
        """Lookup, wait out admission and TTFT, stream the first chunk, decode, commit, reply"""
        loop = asyncio.get_running_loop()
        received = loop.time()
        self.inflight += 1
        try:
            async with self._lock:
                outcome = self.cache.lookup(wire.session_id, wire.required_context_tokens)
                start = max(received, self._next_admit)
                self._next_admit = start + self.cost.admission_interval_ms / 1000.0

            rng = stream(self.seed, 'service', turn_entity(wire.session_id, wire.turn_index))
            prefill_ms = self.cost.prefill_latency(outcome.miss_tokens)
            model_ttft_ms = self.cost.ttft(prefill_ms, rng)
            tpot = self.cost.decode_samples(wire.output_tokens, rng)
            decode_ms = float(tpot.sum())

            await asyncio.sleep(max(0.0, start - loop.time()) + model_ttft_ms / 1000.0)
            first = loop.time()
            ttft_ms = (first - received) * 1000.0
            await write_frame(writer, {'type': 'chunk', 'seq': 0, 'node_id': self.node_id,
                                       'ttft_ms': ttft_ms})
            await asyncio.sleep(decode_ms / 1000.0)

            async with self._lock:
                try:
                    self.cache.commit(wire.session_id, wire.required_context_tokens)
                except CacheError as e:
                    logger.warning(f'Node {self.node_id}: not caching {wire.session_id}: {e}')

            reply = TurnReply(
                node_id=self.node_id,
                status=STATUS_OK,
                hit_tokens=outcome.hit_tokens,
                miss_tokens=outcome.miss_tokens,
                cold_start=outcome.cold_start,
                prefill_ms=prefill_ms,
                ttft_ms=ttft_ms,
                decode_ms=decode_ms,
                total_ms=(loop.time() - received) * 1000.0,
                tpot_samples=[float(x) for x in tpot[:MAX_TPOT_SAMPLES]],
            )
            await write_frame(writer, reply.to_record())
            self.served += 1
        finally:
            self.inflight -= 1

    def __repr__(self):
        return f'<InferenceNode {self.node_id} port={self.port}>'

"""Live gateway: sticky routing over the monitor's effective ring, proxied to stub nodes."""
import asyncio
import errno
import logging
import threading
from collections import Counter

from app.errors import PortInUseError, ProtocolError
from app.gateway.monitor import HealthMonitor
from app.gateway.wire import MAX_FRAME_BYTES, error_frame, parse_turn, read_frame, write_frame
from app.metrics.report import LatencySeries
from app.models import (
    STATUS_NO_CAPACITY, STATUS_NODE_ERROR, STATUS_REROUTED_COLD, STICKY, TurnReply,
)
from app.utils.audit import AuditLog
from app.utils.cache import CacheCounters, CacheMetrics

logger = logging.getLogger(__name__)

_NODE_FAILURES = (OSError, ConnectionError, TimeoutError, asyncio.IncompleteReadError, ProtocolError)


class GatewayStats:
    """Counters and latency series since start; owned by the gateway's event loop"""

    def __init__(self, node_ids):
        self.requests = 0
        self.by_status = Counter()
        self.caches = {n: CacheCounters() for n in node_ids}
        self.ttft = LatencySeries('ttft')
        self.total = LatencySeries('total')

    def record(self, reply, total_ms):
        self.requests += 1
        self.by_status[reply.status] += 1
        if not reply.ok:
            return
        c = self.caches[reply.node_id]
        c.lookups += 1
        c.hits_tokens += reply.hit_tokens
        c.miss_tokens += reply.miss_tokens
        if reply.cold_start:
            c.cold_lookups += 1
            c.cold_miss_tokens += reply.miss_tokens
        if reply.gateway_ttft_ms is not None:
            self.ttft.add(reply.gateway_ttft_ms)
        self.total.add(total_ms)

    def cache_metrics(self):
        out = {}
        for node, c in sorted(self.caches.items()):
            if c.lookups:
                m = CacheMetrics.from_counters(c)
                out[node] = {'lookups': m.lookups, 'hit_tokens': m.hit_tokens, 'miss_tokens': m.miss_tokens,
                             'chr': m.chr, 'reuse_factor': m.reuse_factor}
            else:
                out[node] = {'lookups': 0, 'hit_tokens': 0, 'miss_tokens': 0, 'chr': 0.0, 'reuse_factor': None}
        return out


class Gateway:
    def __init__(self, scenario, addresses, max_frame_bytes=MAX_FRAME_BYTES):
        self.scenario = scenario
        self.routing_policy = scenario.routing_policy
        self.addresses = dict(addresses)
        self.timeout_s = scenario.gateway.request_timeout_ms / 1000.0
        self.max_frame_bytes = max_frame_bytes
        self.audit = AuditLog()
        self.monitor = HealthMonitor(scenario.build_ring(), self.addresses, scenario.health, audit=self.audit)
        self.stats = GatewayStats(scenario.node_ids)
        self.inflight = 0
        self.loop = None
        self.host = None
        self.port = None
        self._server = None
        self._last_node = {}
        self._rr = 0
        self._connections = set()
        self._loop_thread = None

    async def start(self, host, port):
        try:
            self._server = await asyncio.start_server(self._handle, host, port)
        except OSError as e:
            if e.errno == errno.EADDRINUSE:
                raise PortInUseError(host, port)
            raise
        self.loop = asyncio.get_running_loop()
        self._loop_thread = threading.current_thread()
        self.host = host
        self.port = self._server.sockets[0].getsockname()[1]
        self.monitor.start()
        logger.info(f'Gateway listening on {host}:{self.port} ({self.routing_policy}, '
                    f'{len(self.addresses)} nodes)')
        return self.port

    async def stop(self, grace_s=5.0):
        """Stop accepting, drain in-flight turns for up to ``grace_s``, then stop probing"""
        if self._server is None:
            return
        self._server.close()
        deadline = self.loop.time() + grace_s
        while self.inflight and self.loop.time() < deadline:
            await asyncio.sleep(0.01)
        await self.monitor.stop()
        for writer in list(self._connections):
            writer.close()
        await self._server.wait_closed()
        self._server = None
        logger.info(f'Gateway stopped after {self.stats.requests} requests')

    def _route(self, ring, session_id):
        if self.routing_policy == STICKY:
            return ring.route(session_id)
        ids = ring.node_ids
        node_id = ids[self._rr % len(ids)]
        self._rr += 1
        return node_id

    async def dispatch(self, wire, downstream=None):
        """
        Route one turn and proxy it
        The first chunk is forwarded to ``downstream`` as soon as it arrives
        """
        loop = asyncio.get_running_loop()
        received = loop.time()
        self.inflight += 1
        try:
            ring = self.monitor.ring
            if ring.is_empty():
                reply = TurnReply(node_id='', status=STATUS_NO_CAPACITY, message='no capacity: ring has no members')
                self.stats.record(reply, 0.0)
                return reply

            node_id = self._route(ring, wire.session_id)
            self.audit.log_action('dispatch', 'node', node_id, {
                'session': wire.session_id, 'turn': wire.turn_index,
                'state': self.monitor.cluster[node_id].state, 'ring': ring.node_ids,
            })
            try:
                reply = await self._forward(node_id, wire, downstream, received)
            except _NODE_FAILURES as e:
                message = str(e) or type(e).__name__
                logger.warning(f'Node {node_id} failed {wire.session_id}#{wire.turn_index}: {message}')
                self.audit.log_action('node_error', 'node', node_id, {'session': wire.session_id, 'error': message})
                self.monitor.passive_failure(node_id)
                reply = TurnReply(node_id=node_id, status=STATUS_NODE_ERROR, message=message)
            else:
                previous = self._last_node.get(wire.session_id)
                if previous is not None and previous != node_id and reply.cold_start:
                    reply.status = STATUS_REROUTED_COLD
                self._last_node[wire.session_id] = node_id
            self.stats.record(reply, (loop.time() - received) * 1000.0)
            return reply
        finally:
            self.inflight -= 1

    async def _forward(self, node_id, wire, downstream, received):
        loop = asyncio.get_running_loop()
        host, port = self.addresses[node_id]
        writer = None
        try:
            # Connect through first chunk is bounded; decode time is not
            async with asyncio.timeout(self.timeout_s):
                reader, writer = await asyncio.open_connection(host, port)
                await write_frame(writer, wire.to_record())
                chunk = await read_frame(reader, self.max_frame_bytes)
            if chunk is None:
                raise ConnectionError('node closed the connection')
            if chunk['type'] == 'error':
                raise ProtocolError(chunk.get('message', 'node error'))
            if chunk['type'] != 'chunk':
                raise ProtocolError(f'expected a chunk frame, got {chunk["type"]!r}')
            gateway_ttft_ms = (loop.time() - received) * 1000.0
            if downstream is not None:
                await write_frame(downstream, {**chunk, 'gateway_ttft_ms': gateway_ttft_ms})

            record = await read_frame(reader, self.max_frame_bytes)
            if record is None:
                raise ConnectionError('node closed the connection mid-turn')
            if record['type'] != 'reply':
                raise ProtocolError(f'expected a reply frame, got {record["type"]!r}')
            reply = TurnReply.from_record(record)
            reply.gateway_ttft_ms = gateway_ttft_ms
            return reply
        finally:
            if writer is not None:
                writer.close()

    async def _handle(self, reader, writer):
        self._connections.add(writer)
        try:
            while True:
                try:
                    record = await read_frame(reader, self.max_frame_bytes)
                except ProtocolError as e:
                    await write_frame(writer, error_frame(e))
                    continue
                if record is None:
                    break
                if record['type'] == 'turn':
                    try:
                        wire = parse_turn(record)
                    except ProtocolError as e:
                        await write_frame(writer, error_frame(e))
                        continue
                    reply = await self.dispatch(wire, downstream=writer)
                    await write_frame(writer, reply.to_record())
                elif record['type'] == 'ping':
                    await write_frame(writer, {'type': 'pong', 'node_id': 'gateway'})
                else:
                    await write_frame(writer, error_frame(f'unexpected frame type {record["type"]!r}'))
        except (ConnectionError, asyncio.CancelledError):
            pass
        finally:
            self._connections.discard(writer)
            writer.close()

    def snapshot(self):
        """Ring members with health states, per-node cache metrics, latency since start"""
        ring = self.monitor.ring
        return {
            'routing_policy': self.routing_policy,
            'ring': {'members': ring.node_ids, 'configured': self.monitor.full_ring.node_ids,
                     'points': ring.point_counts()},
            'health': self.monitor.snapshot(),
            'cache': self.stats.cache_metrics(),
            'requests': self.stats.requests,
            'by_status': dict(sorted(self.stats.by_status.items())),
            'latency': {'ttft': self.stats.ttft.summary(), 'total': self.stats.total.summary()},
            'inflight': self.inflight,
            'removed_dispatches': len(self.audit.removed_dispatches()),
        }

    def snapshot_threadsafe(self, timeout=5.0):
        """Snapshot taken on the gateway's own loop when called from another thread"""
        loop = self.loop
        if loop is None or not loop.is_running() or threading.current_thread() is self._loop_thread:
            return self.snapshot()

        async def take():
            return self.snapshot()

        return asyncio.run_coroutine_threadsafe(take(), loop).result(timeout)

    def __repr__(self):
        return f'<Gateway port={self.port} {len(self.addresses)} nodes>'

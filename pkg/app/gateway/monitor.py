"""Live health monitor: the single owner of cluster health and the effective ring.

Probes run concurrently; their results are applied in one synchronous step,
so routing always reads a complete, immutable ring snapshot.
"""
import asyncio
import logging
from dataclasses import replace

from app.gateway.wire import read_frame, write_frame
from app.utils.health import (
    ProbeResult, Transition, effective_ring, initial_cluster, probe_cycle, record_probe_result,
)

logger = logging.getLogger(__name__)


class HealthMonitor:
    def __init__(self, full_ring, addresses, cfg, audit=None):
        self.full_ring = full_ring
        self.addresses = dict(addresses)
        self.cfg = cfg
        self.audit = audit
        self.cluster = {h.node: h for h in initial_cluster(full_ring.node_ids)}
        self.ring = full_ring
        self.transitions = []
        self.cycles = 0
        self._task = None
        self._stopped = None
        self._t0 = None

    def _now_ms(self):
        return (asyncio.get_running_loop().time() - self._t0) * 1000.0

    async def probe(self, node_id):
        """ping/pong round trip, bounded by probe_timeout_ms"""
        host, port = self.addresses[node_id]
        loop = asyncio.get_running_loop()
        started = loop.time()
        writer = None
        try:
            async with asyncio.timeout(self.cfg.probe_timeout_ms / 1000.0):
                reader, writer = await asyncio.open_connection(host, port)
                await write_frame(writer, {'type': 'ping'})
                record = await read_frame(reader)
            ok = record is not None and record.get('type') == 'pong'
            return ProbeResult(ok=ok, latency_ms=(loop.time() - started) * 1000.0)
        except (OSError, ConnectionError, TimeoutError, asyncio.IncompleteReadError):
            return ProbeResult(ok=False, latency_ms=float(self.cfg.probe_timeout_ms))
        finally:
            if writer is not None:
                writer.close()

    async def run_cycle(self):
        """
        Probe every node once and apply the results
        Cycles run on a logical clock (cycle * interval) so every node is due each cycle
        """
        now = self.cycles * self.cfg.probe_interval_ms
        ids = sorted(self.cluster)
        results = dict(zip(ids, await asyncio.gather(*(self.probe(n) for n in ids))))
        updated, transitions = probe_cycle(list(self.cluster.values()), now, results.__getitem__, self.cfg)
        self.cycles += 1
        self._apply(updated, transitions)
        return transitions

    def _apply(self, updated, transitions):
        for health in updated:
            self.cluster[health.node] = health
        for t in transitions:
            self.transitions.append(t)
            if self.audit is not None:
                self.audit.log_action('transition', 'node', t.node, {'from': t.from_state, 'to': t.to_state})
        if transitions:
            self.ring = effective_ring(self.full_ring, self.cluster.values())
            logger.info(f'Effective ring now {self.ring.node_ids}')

    def passive_failure(self, node_id):
        """A failed connection counts as a failed probe; the probe schedule is unchanged"""
        if not self.cfg.enabled or node_id not in self.cluster:
            return None
        old = self.cluster[node_id]
        now = self._now_ms() if self._t0 is not None else 0.0
        new = replace(record_probe_result(old, False, now, self.cfg), last_probe_at=old.last_probe_at)
        transitions = []
        if new.state != old.state:
            transitions.append(Transition(node_id, old.state, new.state, now))
            logger.warning(f'Node {node_id}: {old.state} -> {new.state} (passive)')
        self._apply([new], transitions)
        return new

    async def _run(self):
        while not self._stopped.is_set():
            await self.run_cycle()
            try:
                await asyncio.wait_for(self._stopped.wait(), self.cfg.probe_interval_ms / 1000.0)
            except TimeoutError:
                pass

    def start(self):
        self._t0 = asyncio.get_running_loop().time()
        self._stopped = asyncio.Event()
        if self.cfg.enabled:
            self._task = asyncio.create_task(self._run())
            logger.info(f'Health monitor probing {len(self.cluster)} nodes every {self.cfg.probe_interval_ms} ms')

    async def stop(self):
        if self._stopped is not None:
            self._stopped.set()
        if self._task is not None:
            await self._task
            self._task = None

    def snapshot(self):
        return {
            node: {'state': h.state, 'consecutive_failures': h.consecutive_failures,
                   'consecutive_successes': h.consecutive_successes, 'in_ring': h.node in self.ring}
            for node, h in sorted(self.cluster.items())
        }

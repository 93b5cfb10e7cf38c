"""Active health checking: probe state machine, probe cycles and the effective ring.

Everything here is a pure function of its arguments; the owner (simulator or
live monitor) keeps the cluster state and applies results serially.
"""
import logging
from dataclasses import dataclass, replace

logger = logging.getLogger(__name__)

HEALTHY = 'Healthy'
DEGRADED = 'Degraded'
REMOVED = 'Removed'
STATES = (HEALTHY, DEGRADED, REMOVED)


@dataclass(frozen=True)
class HealthConfig:
    probe_interval_ms: int = 5000
    probe_timeout_ms: int = 1000
    fail_threshold: int = 1
    recover_threshold: int = 3
    degraded_latency_ms: float = 250.0
    enabled: bool = True

    def __post_init__(self):
        if self.probe_interval_ms <= 0 or self.probe_timeout_ms <= 0:
            raise ValueError('probe interval and timeout must be positive')
        if self.probe_timeout_ms >= self.probe_interval_ms:
            raise ValueError('probe_timeout_ms must be shorter than probe_interval_ms')
        if self.fail_threshold < 1 or self.recover_threshold < 1:
            raise ValueError('fail_threshold and recover_threshold must be >= 1')
        if self.degraded_latency_ms <= 0:
            raise ValueError('degraded_latency_ms must be positive')

    @property
    def detection_bound_ms(self):
        """Worst case from first missed probe to removal"""
        return self.fail_threshold * self.probe_interval_ms + self.probe_timeout_ms


@dataclass(frozen=True)
class ProbeResult:
    ok: bool
    latency_ms: float = 0.0


@dataclass(frozen=True)
class NodeHealth:
    node: str
    state: str = HEALTHY
    consecutive_failures: int = 0
    consecutive_successes: int = 0
    last_probe_at: float = float('-inf')

    @property
    def in_ring(self):
        return self.state != REMOVED

    def __repr__(self):
        return f'<NodeHealth {self.node} {self.state} fails={self.consecutive_failures}>'


@dataclass(frozen=True)
class Transition:
    node: str
    from_state: str
    to_state: str
    at_ms: float


def record_probe_result(health, ok, now, cfg, latency_ms=0.0):
    """
    Apply one probe outcome
    Failures below fail_threshold leave the state alone; only latency marks a node Degraded
    A Removed node needs recover_threshold successes in a row
    """
    if not ok:
        failures = health.consecutive_failures + 1
        state = REMOVED if failures >= cfg.fail_threshold else health.state
        return replace(health, state=state, consecutive_failures=failures,
                       consecutive_successes=0, last_probe_at=now)

    successes = health.consecutive_successes + 1
    if health.state == REMOVED:
        if successes >= cfg.recover_threshold:
            return replace(health, state=HEALTHY, consecutive_failures=0,
                           consecutive_successes=0, last_probe_at=now)
        return replace(health, consecutive_failures=0, consecutive_successes=successes, last_probe_at=now)

    state = DEGRADED if latency_ms > cfg.degraded_latency_ms else HEALTHY
    return replace(health, state=state, consecutive_failures=0,
                   consecutive_successes=successes, last_probe_at=now)


def probe_cycle(cluster, now, probe_fn, cfg):
    """
    Probe every node that is due, in node-id order
    ``probe_fn(node_id)`` returns a ProbeResult or a bare flag; a result slower than
    probe_timeout_ms counts as a failure observed at ``now + probe_timeout_ms``
    Returns (updated cluster, transitions)
    """
    updated = []
    transitions = []
    for health in sorted(cluster, key=lambda h: h.node):
        if health.last_probe_at + cfg.probe_interval_ms > now:
            updated.append(health)
            continue
        result = probe_fn(health.node)
        if not isinstance(result, ProbeResult):
            result = ProbeResult(ok=bool(result), latency_ms=0.0 if result else cfg.probe_timeout_ms)
        ok = result.ok and result.latency_ms <= cfg.probe_timeout_ms
        elapsed = min(result.latency_ms, cfg.probe_timeout_ms)
        new = record_probe_result(health, ok, now, cfg, latency_ms=result.latency_ms)
        if new.state != health.state:
            transitions.append(Transition(health.node, health.state, new.state, now + elapsed))
            level = logging.WARNING if new.state != HEALTHY else logging.INFO
            logger.log(level, f'Node {health.node}: {health.state} -> {new.state}')
        updated.append(new)
    return updated, transitions


def effective_ring(full, cluster):
    """
    Ring restricted to Healthy and Degraded members
    An empty result is returned as an empty ring; routing on it raises EmptyRingError
    """
    removed = {h.node for h in cluster if h.state == REMOVED}
    if not removed:
        return full
    return full.with_members((n, w) for n, w in full.members if n not in removed)


def initial_cluster(node_ids):
    return [NodeHealth(node=n) for n in sorted(node_ids)]

"""Deterministic discrete-event engine.

Times are integer microseconds since run start. Pending work lives in one
heap keyed by (time, kind rank, entity, sequence); every random draw comes
from a stream named after its purpose and entity, so runs with equal
scenarios and traces produce equal logs.

Per turn: route -> cache lookup -> admission on the node (spacing of
1 / service rate) -> prefill -> first token -> decode -> commit. Turns of one
session are serial: turn t+1 is released once it has arrived and turn t is
finished.
"""
import heapq
import itertools
import logging
from collections import deque
from dataclasses import dataclass, field

from app.errors import CacheError
from app.metrics.report import assemble
from app.models import (
    STATUS_NO_CAPACITY, STATUS_OK, STATUS_REROUTED_COLD, STICKY,
)
from app.sim import events as ev
from app.sim.events import EventLog
from app.utils.cache import NodeCache
from app.utils.distributions import stream
from app.utils.health import REMOVED, ProbeResult, effective_ring, initial_cluster, probe_cycle
from app.utils.workload import check_trace

logger = logging.getLogger(__name__)

# Heap-only kind for request timeouts; never logged
TIMEOUT = 'timeout'

KIND_RANK = {
    ev.FAULT: 0,
    ev.TRANSITION: 1,
    ev.TURN_DONE: 2,
    ev.FIRST_TOKEN: 3,
    ev.PREFILL_DONE: 4,
    TIMEOUT: 5,
    ev.PROBE: 6,
    ev.ARRIVAL: 7,
}

PROBE_RTT_MS = 1.0
MAX_TPOT_SAMPLES = 8
NO_CAPACITY = 'no capacity'


def _us(ms):
    return int(round(ms * 1000))


def turn_entity(session, turn_index, attempt=0):
    """Stream entity of one attempt; a first attempt is keyed by session and turn only"""
    if attempt == 0:
        return f'{session}#{turn_index}'
    return f'{session}#{turn_index}#{attempt}'


@dataclass(eq=False)
class _Attempt:
    turn: object
    released_us: int
    retries_left: int
    number: int = 0
    token: int = 0
    node: str = None
    dispatched_us: int = 0
    state: str = 'idle'
    outcome: object = None
    service: dict = None


@dataclass
class _Session:
    pending: deque = field(default_factory=deque)
    busy: bool = False
    last_node: str = None


class _SimNode:
    def __init__(self, spec):
        self.spec = spec
        self.cache = NodeCache(spec.capacity_tokens, spec.bytes_per_token)
        self.next_admit_us = 0
        self.down = False
        self.slowdown = 1.0
        self.inflight = set()

    def backlog_ms(self, now_us):
        return max(0, self.next_admit_us - now_us) / 1000.0


class Simulation:
    """One run of a scenario over a trace; ``run()`` returns the EventLog"""

    def __init__(self, scenario, trace=None, label=None):
        self.scenario = scenario
        self.trace = check_trace(list(trace)) if trace is not None else scenario.generate_trace()
        self.label = label or scenario.routing_policy
        self.seed = scenario.seed
        self.health_cfg = scenario.health
        self.timeout_us = scenario.gateway.request_timeout_ms * 1000
        self.full_ring = scenario.build_ring()
        self.ring = self.full_ring
        self.cluster = {h.node: h for h in initial_cluster(self.full_ring.node_ids)}
        self.nodes = {spec.id: _SimNode(spec) for spec in scenario.nodes}
        self.sessions = {}
        self.now = 0
        self.aborted = None
        self._heap = []
        self._seq = itertools.count()
        self._rr = 0
        self._open_turns = len(self.trace)
        self._pending_faults = 0
        self.log = EventLog(meta={
            'scenario': scenario.name,
            'label': self.label,
            'config_digest': scenario.digest(),
            'seed': scenario.seed,
            'routing_policy': scenario.routing_policy,
            'health_checks': scenario.health.enabled,
            'nodes': scenario.node_ids,
            'aborted': None,
        })
        self._handlers = {
            ev.ARRIVAL: self._on_arrival,
            ev.PREFILL_DONE: self._on_prefill_done,
            ev.FIRST_TOKEN: self._on_first_token,
            ev.TURN_DONE: self._on_turn_done,
            ev.PROBE: self._on_probe,
            ev.TRANSITION: self._on_transition,
            ev.FAULT: self._on_fault,
            TIMEOUT: self._on_timeout,
        }

    def _push(self, time_us, kind, entity, *data):
        heapq.heappush(self._heap, (int(time_us), KIND_RANK[kind], entity, next(self._seq), kind, data))

    def run(self):
        logger.info(f'Simulating {self.scenario.name} ({self.label}): {len(self.trace)} turns, '
                    f'{len(self.nodes)} nodes')
        for turn in self.trace:
            self._push(turn.arrival, ev.ARRIVAL, turn.session, turn)
        for fault in self.scenario.faults:
            self._push(fault.fail_at_ms * 1000, ev.FAULT, fault.node, fault, 'fail')
            self._pending_faults += 1
            if fault.recover_at_ms is not None:
                self._push(fault.recover_at_ms * 1000, ev.FAULT, fault.node, fault, 'recover')
                self._pending_faults += 1
        if self.health_cfg.enabled and (self.trace or self.scenario.faults):
            self._push(0, ev.PROBE, '')

        while self._heap and self.aborted is None:
            time_us, _, _, _, kind, data = heapq.heappop(self._heap)
            self.now = time_us
            self._handlers[kind](*data)

        self.log.meta['aborted'] = self.aborted
        logger.info(f'Finished {self.scenario.name} ({self.label}) at {self.now / 1e6:.1f}s: '
                    f'{len(self.log)} events')
        return self.log

    # Arrivals and releases

    def _on_arrival(self, turn):
        self.log.append(self.now, ev.ARRIVAL, session=turn.session, turn=turn.turn_index,
                        required=turn.required_context_tokens, new_tokens=turn.new_tokens,
                        output_tokens=turn.output_tokens)
        session = self.sessions.setdefault(turn.session, _Session())
        session.pending.append(turn)
        if not session.busy:
            self._release(session)

    def _release(self, session):
        turn = session.pending.popleft()
        session.busy = True
        attempt = _Attempt(turn, released_us=self.now, retries_left=self.scenario.gateway.retries)
        self._dispatch(attempt)

    def _finish(self, attempt):
        session = self.sessions[attempt.turn.session]
        session.busy = False
        self._open_turns -= 1
        if session.pending:
            self._release(session)

    # Routing and service

    def _route(self, session_id):
        if self.ring.is_empty():
            return None
        if self.scenario.routing_policy == STICKY:
            return self.ring.route(session_id)
        ids = self.ring.node_ids
        node_id = ids[self._rr % len(ids)]
        self._rr += 1
        return node_id

    def _dispatch(self, attempt):
        turn = attempt.turn
        node_id = self._route(turn.session)
        if node_id is None:
            self._abort(attempt)
            return

        attempt.token += 1
        attempt.node = node_id
        attempt.dispatched_us = self.now
        self.log.append(self.now, ev.DISPATCH, session=turn.session, turn=turn.turn_index,
                        node=node_id, attempt=attempt.number)
        node = self.nodes[node_id]
        node.inflight.add(attempt)
        if node.down:
            attempt.state = 'hanging'
            self._push(self.now + self.timeout_us, TIMEOUT, turn.session, attempt, attempt.token)
        else:
            self._serve(attempt, node)

    def _serve(self, attempt, node):
        turn = attempt.turn
        cost = node.spec.cost
        outcome = node.cache.lookup(turn.session, turn.required_context_tokens, now=self.now)
        rng = stream(self.seed, 'service', turn_entity(turn.session, turn.turn_index, attempt.number))

        start = max(self.now, node.next_admit_us)
        node.next_admit_us = start + _us(cost.admission_interval_ms * node.slowdown)

        prefill_ms = cost.prefill_latency(outcome.miss_tokens) * node.slowdown
        service_ttft_ms = cost.ttft(prefill_ms, rng)
        tpot = cost.decode_samples(turn.output_tokens, rng) * node.slowdown
        decode_ms = float(tpot.sum())

        prefill_done = start + _us(prefill_ms)
        first_token = start + _us(service_ttft_ms)
        done = first_token + _us(decode_ms)

        attempt.state = 'serving'
        attempt.outcome = outcome
        attempt.service = {
            'start_us': start,
            'first_token_us': first_token,
            'prefill_ms': prefill_ms,
            'decode_ms': decode_ms,
            'tpot_samples': [float(x) for x in tpot[:MAX_TPOT_SAMPLES]],
        }
        self._push(prefill_done, ev.PREFILL_DONE, turn.session, attempt, attempt.token)
        self._push(first_token, ev.FIRST_TOKEN, turn.session, attempt, attempt.token)
        self._push(done, ev.TURN_DONE, turn.session, attempt, attempt.token)

    def _stale(self, attempt, token):
        return token != attempt.token or attempt.state != 'serving'

    def _on_prefill_done(self, attempt, token):
        if self._stale(attempt, token):
            return
        self.log.append(self.now, ev.PREFILL_DONE, session=attempt.turn.session,
                        turn=attempt.turn.turn_index, node=attempt.node, attempt=attempt.number)

    def _on_first_token(self, attempt, token):
        if self._stale(attempt, token):
            return
        self.log.append(self.now, ev.FIRST_TOKEN, session=attempt.turn.session,
                        turn=attempt.turn.turn_index, node=attempt.node, attempt=attempt.number)

    def _commit(self, node, attempt):
        """Persist the turn's context; returns the tokens newly made resident"""
        turn = attempt.turn
        before = node.cache.cached_prefix(turn.session)
        try:
            node.cache.commit(turn.session, turn.required_context_tokens, now=self.now)
            committed = turn.required_context_tokens - before
        except CacheError as e:
            logger.warning(f'{node.spec.id}: not caching {turn.session}: {e}')
            committed = 0
        for victim, tokens in node.cache.last_evictions:
            self.log.append(self.now, ev.EVICTION, node=node.spec.id, session=victim, tokens=tokens,
                            by=turn.session)
        return committed

    def _on_turn_done(self, attempt, token):
        if self._stale(attempt, token):
            return
        turn = attempt.turn
        node = self.nodes[attempt.node]
        node.inflight.discard(attempt)
        attempt.state = 'done'
        committed = self._commit(node, attempt)

        svc = attempt.service
        outcome = attempt.outcome
        ttft_ms = (svc['first_token_us'] - attempt.released_us) / 1000.0
        ttfa_ms, breakdown = node.spec.cost.ttfa(
            ttft_ms, stream(self.seed, 'stages', turn_entity(turn.session, turn.turn_index)))

        session = self.sessions[turn.session]
        rerouted = session.last_node is not None and session.last_node != attempt.node
        status = STATUS_REROUTED_COLD if rerouted and outcome.cold_start else STATUS_OK
        self.log.append(
            self.now, ev.TURN_DONE,
            session=turn.session, turn=turn.turn_index, node=attempt.node, attempt=attempt.number,
            status=status, required=turn.required_context_tokens, hit=outcome.hit_tokens,
            miss=outcome.miss_tokens, cold_start=outcome.cold_start, new_tokens=turn.new_tokens,
            output_tokens=turn.output_tokens, prefill_ms=svc['prefill_ms'], ttft_ms=ttft_ms,
            ttfa_ms=ttfa_ms, ttfa_breakdown=breakdown, decode_ms=svc['decode_ms'],
            total_ms=(self.now - attempt.released_us) / 1000.0, tpot_samples=svc['tpot_samples'],
            committed_tokens=committed, rerouted=rerouted, retries=attempt.number,
        )
        session.last_node = attempt.node
        self._finish(attempt)

    # Failures

    def _on_timeout(self, attempt, token):
        if token == attempt.token and attempt.state == 'hanging':
            self._fail(attempt, 'timeout')

    def _fail(self, attempt, reason):
        if self.aborted is not None:
            return
        turn = attempt.turn
        self.nodes[attempt.node].inflight.discard(attempt)
        attempt.token += 1
        attempt.state = 'failed'
        final = attempt.retries_left == 0
        payload = dict(session=turn.session, turn=turn.turn_index, node=attempt.node,
                       attempt=attempt.number, reason=reason, final=final,
                       required=turn.required_context_tokens)
        if final:
            payload['elapsed_ms'] = (self.now - attempt.released_us) / 1000.0
        self.log.append(self.now, ev.FAILURE, **payload)
        logger.debug(f'{turn.session}#{turn.turn_index} failed on {attempt.node}: {reason}')
        if final:
            self._finish(attempt)
        else:
            attempt.retries_left -= 1
            attempt.number += 1
            self._dispatch(attempt)

    def _abort(self, attempt):
        """Nothing left to route to: close out in-flight work and stop"""
        self.aborted = NO_CAPACITY
        turn = attempt.turn
        self.log.append(self.now, ev.FAILURE, session=turn.session, turn=turn.turn_index, node=None,
                        attempt=attempt.number, reason=STATUS_NO_CAPACITY, final=True,
                        required=turn.required_context_tokens,
                        elapsed_ms=(self.now - attempt.released_us) / 1000.0)
        for node_id in sorted(self.nodes):
            node = self.nodes[node_id]
            for pending in sorted(node.inflight, key=lambda a: (a.turn.session, a.turn.turn_index)):
                self.log.append(self.now, ev.FAILURE, session=pending.turn.session,
                                turn=pending.turn.turn_index, node=node_id, attempt=pending.number,
                                reason='aborted', final=True, required=pending.turn.required_context_tokens,
                                elapsed_ms=(self.now - pending.released_us) / 1000.0)
            node.inflight.clear()
        logger.error(f'Run {self.scenario.name} aborted at {self.now / 1e6:.3f}s: {NO_CAPACITY}')

    # Health and faults

    def _probe(self, node_id):
        node = self.nodes[node_id]
        if node.down:
            result = ProbeResult(ok=False, latency_ms=float(self.health_cfg.probe_timeout_ms))
        else:
            # pings bypass the admission queue, as on a live node
            result = ProbeResult(ok=True, latency_ms=PROBE_RTT_MS)
        self.log.append(self.now, ev.PROBE, node=node_id, ok=result.ok, latency_ms=result.latency_ms,
                        backlog_ms=node.backlog_ms(self.now))
        return result

    def _on_probe(self):
        cfg = self.health_cfg
        updated, transitions = probe_cycle(list(self.cluster.values()), self.now / 1000.0, self._probe, cfg)
        changing = {t.node: t for t in transitions}
        for health in updated:
            transition = changing.get(health.node)
            if transition is None:
                self.cluster[health.node] = health
            else:
                self._push(_us(transition.at_ms), ev.TRANSITION, health.node, transition, health)
        if self._open_turns > 0 or self._pending_faults > 0:
            self._push(self.now + cfg.probe_interval_ms * 1000, ev.PROBE, '')

    def _on_transition(self, transition, health):
        self.cluster[health.node] = health
        self.log.append(self.now, ev.TRANSITION, node=health.node, from_state=transition.from_state,
                        to_state=transition.to_state)
        self.ring = effective_ring(self.full_ring, self.cluster.values())
        if transition.to_state == REMOVED:
            node = self.nodes[health.node]
            hanging = [a for a in node.inflight if a.state == 'hanging']
            for attempt in sorted(hanging, key=lambda a: (a.turn.session, a.turn.turn_index)):
                self._fail(attempt, 'node_removed')

    def _on_fault(self, fault, action):
        node = self.nodes[fault.node]
        self._pending_faults -= 1
        dropped = 0
        if action == 'fail':
            if fault.mode == 'down':
                dropped = node.cache.resident_tokens
                node.cache.reset()
                node.down = True
                serving = [a for a in node.inflight if a.state == 'serving']
                for attempt in sorted(serving, key=lambda a: (a.turn.session, a.turn.turn_index)):
                    attempt.token += 1
                    attempt.state = 'hanging'
                    deadline = max(self.now, attempt.dispatched_us + self.timeout_us)
                    self._push(deadline, TIMEOUT, attempt.turn.session, attempt, attempt.token)
            else:
                node.slowdown = fault.slowdown
        else:
            node.down = False
            node.slowdown = 1.0
            node.next_admit_us = max(node.next_admit_us, self.now)
        logger.warning(f'Fault on {fault.node}: {action} ({fault.mode})')
        self.log.append(self.now, ev.FAULT, node=fault.node, action=action, mode=fault.mode,
                        slowdown=fault.slowdown, dropped_tokens=dropped)


def run(scenario, trace=None, label=None):
    """Simulate ``scenario`` over its embedded workload (or ``trace``); returns (RunReport, EventLog)"""
    log = Simulation(scenario, trace=trace, label=label).run()
    return assemble(log), log


def replay(trace, scenario, label=None):
    """Run over a recorded trace in place of the embedded generator; equals ``run`` on the same turns"""
    report, _ = run(scenario, trace=trace, label=label)
    return report


def run_ablation(scenario, policy_a, policy_b):
    """Paired runs differing only in routing policy, over one shared trace"""
    trace = scenario.generate_trace()
    report_a, _ = run(scenario.with_policy(policy_a), trace=trace, label=policy_a)
    report_b, _ = run(scenario.with_policy(policy_b), trace=trace, label=policy_b)
    return report_a, report_b


def run_health_ablation(scenario):
    """Paired runs with health checks on and off, over one shared trace"""
    trace = scenario.generate_trace()
    on, _ = run(scenario.with_health(True), trace=trace, label='health_on')
    off, _ = run(scenario.with_health(False), trace=trace, label='health_off')
    return on, off

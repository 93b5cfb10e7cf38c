"""Scenario files: a strict YAML schema, positions for every key, and a stable digest.

Unknown keys are rejected at any depth. Errors carry the dotted key path plus
the 1-based line and column of the key in the source document.
"""
import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields, replace

import yaml

from app.errors import CacheRouteError, ScenarioError
from app.models import STICKY
from app.utils.cost_model import CostModel
from app.utils.health import HealthConfig
from app.utils.ring import DEFAULT_VNODES_PER_WEIGHT, HashRing
from app.utils.validators import Validators
from app.utils.workload import WorkloadProfile, builtin_profile, generate_mixed_trace

logger = logging.getLogger(__name__)

DEFAULT_CAPACITY_TOKENS = 2_000_000

# Allowed keys per section; None marks a leaf validated by its consumer
_COST = {name: None for name in ('preset', 'tpot_sigma', 'prefill_base_ms', 'prefill_ms_per_token',
                                 'ttft_floor', 'tpot', 'endpoint_asr', 'tts', 'playout',
                                 'service_rate_reqs')}
_PROFILE = {f.name: None for f in fields(WorkloadProfile)}
_COMPONENT = {'builtin': None, 'profile': _PROFILE, 'overrides': _PROFILE}

SCHEMA = {
    'name': None,
    'description': None,
    'seed': None,
    'duration_s': None,
    'routing_policy': None,
    'ring': {'vnodes_per_weight': None, 'hash_seed': None},
    'health': {f.name: None for f in fields(HealthConfig)},
    'cost': _COST,
    'nodes': [{'id': None, 'weight': None, 'capacity_tokens': None, 'bytes_per_token': None,
               'address': None, 'cost': _COST}],
    'workload': {**_COMPONENT, 'mix': [{**_COMPONENT, 'weight': None}]},
    'faults': [{'node': None, 'fail_at_ms': None, 'recover_at_ms': None, 'mode': None,
                'slowdown': None}],
    'gateway': {'request_timeout_ms': None, 'retries': None, 'address': None,
                'admin_address': None},
}


@dataclass(frozen=True)
class NodeSpec:
    id: str
    weight: int = 1
    capacity_tokens: int = DEFAULT_CAPACITY_TOKENS
    bytes_per_token: int = 1
    address: str = None
    cost: CostModel = field(default_factory=CostModel)

    def to_config(self):
        return {'id': self.id, 'weight': self.weight, 'capacity_tokens': self.capacity_tokens,
                'bytes_per_token': self.bytes_per_token, 'address': self.address,
                'cost': self.cost.to_config()}


@dataclass(frozen=True)
class FaultSpec:
    """``down`` loses the node and its cache; ``slow`` multiplies its service times"""
    node: str
    fail_at_ms: int
    recover_at_ms: int = None
    mode: str = 'down'
    slowdown: float = 1.0


@dataclass(frozen=True)
class GatewaySpec:
    request_timeout_ms: int = 3000
    retries: int = 1
    address: str = None
    admin_address: str = None


@dataclass(frozen=True)
class WorkloadSpec:
    """Weighted workload components; an empty spec generates no turns"""
    components: tuple = ()

    def to_config(self):
        return [{'profile': p.to_config(), 'weight': w} for p, w in self.components]


@dataclass(frozen=True)
class Scenario:
    name: str
    seed: int
    duration_s: float
    nodes: tuple
    workload: WorkloadSpec = field(default_factory=WorkloadSpec)
    routing_policy: str = STICKY
    vnodes_per_weight: int = DEFAULT_VNODES_PER_WEIGHT
    hash_seed: int = 0
    health: HealthConfig = field(default_factory=HealthConfig)
    faults: tuple = ()
    gateway: GatewaySpec = field(default_factory=GatewaySpec)
    description: str = ''

    def __post_init__(self):
        ok, message = Validators.validate_seed(self.seed)
        if not ok:
            raise ScenarioError(message, key='seed')
        ok, message = Validators.validate_routing_policy(self.routing_policy)
        if not ok:
            raise ScenarioError(message, key='routing_policy')
        if not self.nodes:
            raise ScenarioError('at least one node is required (empty ring)', key='nodes')
        ids = [n.id for n in self.nodes]
        if len(set(ids)) != len(ids):
            raise ScenarioError('duplicate node ids', key='nodes')
        for fault in self.faults:
            if fault.node not in ids:
                raise ScenarioError(f'fault references unknown node {fault.node!r}', key='faults')

    @property
    def node_ids(self):
        return [n.id for n in self.nodes]

    def node(self, node_id):
        for spec in self.nodes:
            if spec.id == node_id:
                return spec
        raise ScenarioError(f'unknown node {node_id!r}', key='nodes')

    def build_ring(self):
        return HashRing.build([(n.id, n.weight) for n in self.nodes],
                              vnodes_per_weight=self.vnodes_per_weight, hash_seed=self.hash_seed)

    def generate_trace(self):
        """The embedded workload over ``duration_s``, one ``workload`` stream per component"""
        if not self.workload.components:
            return []
        return generate_mixed_trace(list(self.workload.components), self.duration_s, self.seed)

    def with_seed(self, seed):
        return replace(self, seed=int(seed))

    def with_policy(self, policy):
        return replace(self, routing_policy=policy)

    def with_health(self, enabled):
        return replace(self, health=replace(self.health, enabled=bool(enabled)))

    def with_cost_preset(self, preset):
        """Every node recalibrated to a named preset"""
        model, _ = CostModel.preset(preset)
        return replace(self, nodes=tuple(replace(n, cost=model) for n in self.nodes))

    def to_config(self):
        """Canonical, fully resolved form; the digest is computed over it"""
        return {
            'name': self.name,
            'seed': self.seed,
            'duration_s': self.duration_s,
            'routing_policy': self.routing_policy,
            'ring': {'vnodes_per_weight': self.vnodes_per_weight, 'hash_seed': self.hash_seed},
            'health': asdict(self.health),
            'nodes': [n.to_config() for n in self.nodes],
            'workload': self.workload.to_config(),
            'faults': [asdict(f) for f in self.faults],
            'gateway': asdict(self.gateway),
        }

    def digest(self):
        canonical = json.dumps(self.to_config(), sort_keys=True, separators=(',', ':'))
        return hashlib.sha256(canonical.encode('utf-8')).hexdigest()[:16]

    def __repr__(self):
        return f'<Scenario {self.name} {len(self.nodes)} nodes seed={self.seed}>'


def _dotted(path):
    out = ''
    for part in path:
        if isinstance(part, int):
            out += f'[{part}]'
        else:
            out += f'.{part}' if out else str(part)
    return out


class _Loader:
    """Turns a parsed document into a Scenario, failing with key positions"""

    def __init__(self, data, marks):
        self.data = data
        self.marks = marks

    def fail(self, message, path):
        mark = None
        probe = tuple(path)
        while probe and mark is None:
            mark = self.marks.get(probe)
            probe = probe[:-1]
        key = _dotted(path) or None
        text = f'{key}: {message}' if key else message
        if mark is None:
            raise ScenarioError(text, key=key)
        raise ScenarioError(text, key=key, line=mark.line + 1, column=mark.column + 1)

    def check_keys(self, data, schema, path=()):
        if schema is None:
            return
        if isinstance(schema, list):
            if not isinstance(data, list):
                self.fail('expected a list', path)
            for i, item in enumerate(data):
                self.check_keys(item, schema[0], path + (i,))
            return
        if not isinstance(data, dict):
            self.fail('expected a mapping', path)
        for key, value in data.items():
            if key not in schema:
                self.fail(f'unknown key {key!r}', path + (key,))
            self.check_keys(value, schema[key], path + (key,))

    def require(self, result, path):
        ok, message = result
        if not ok:
            self.fail(message, path)

    def cost(self, block, path, base=None):
        try:
            return CostModel.from_config(block or {}, base=base)
        except (CacheRouteError, TypeError, ValueError) as e:
            self.fail(str(e), path)

    def component(self, block, path):
        kinds = [k for k in ('builtin', 'profile') if k in block]
        if len(kinds) != 1:
            self.fail('exactly one of "builtin" or "profile" is required', path)
        try:
            if 'builtin' in block:
                profile = builtin_profile(block['builtin'])
                if 'overrides' in block:
                    profile = WorkloadProfile.from_config(block['overrides'], base=profile)
            else:
                if 'overrides' in block:
                    self.fail('"overrides" only applies to a builtin profile', path + ('overrides',))
                profile = WorkloadProfile.from_config(block['profile'])
        except (CacheRouteError, TypeError, ValueError) as e:
            self.fail(str(e), path + (kinds[0],))
        weight = block.get('weight', 1.0)
        self.require(Validators.validate_non_negative(weight, 'weight'), path + ('weight',))
        return profile, float(weight)

    def workload(self, block):
        path = ('workload',)
        if not block:
            return WorkloadSpec()
        if 'mix' in block:
            if set(block) != {'mix'}:
                self.fail('"mix" cannot be combined with other workload keys', path)
            components = tuple(self.component(c, path + ('mix', i)) for i, c in enumerate(block['mix']))
            names = [p.name for p, _ in components]
            if len(set(names)) != len(names):
                self.fail('mixed workload components need distinct profile names', path + ('mix',))
            return WorkloadSpec(components)
        if 'weight' in block:
            self.fail('"weight" only applies inside "mix"', path + ('weight',))
        return WorkloadSpec((self.component(block, path),))

    def nodes(self, block, base_cost):
        if not isinstance(block, list) or not block:
            self.fail('at least one node is required (empty ring)', ('nodes',))
        out = []
        seen = set()
        for i, item in enumerate(block):
            path = ('nodes', i)
            node_id = item.get('id')
            self.require(Validators.validate_node_id(node_id), path + ('id',))
            if node_id in seen:
                self.fail(f'duplicate node id {node_id!r}', path + ('id',))
            seen.add(node_id)
            weight = item.get('weight', 1)
            self.require(Validators.validate_positive_int(weight, 'weight'), path + ('weight',))
            capacity = item.get('capacity_tokens', DEFAULT_CAPACITY_TOKENS)
            self.require(Validators.validate_positive_int(capacity, 'capacity_tokens'),
                         path + ('capacity_tokens',))
            bpt = item.get('bytes_per_token', 1)
            self.require(Validators.validate_positive_int(bpt, 'bytes_per_token'), path + ('bytes_per_token',))
            address = item.get('address')
            self.require(Validators.validate_address(address), path + ('address',))
            cost = base_cost
            if 'cost' in item:
                cost = self.cost(item['cost'], path + ('cost',), base=base_cost)
            out.append(NodeSpec(node_id, weight, capacity, bpt, address, cost))
        return tuple(out)

    def faults(self, block, node_ids):
        out = []
        for i, item in enumerate(block or []):
            path = ('faults', i)
            if item.get('node') not in node_ids:
                self.fail(f'unknown node {item.get("node")!r}', path + ('node',))
            if 'fail_at_ms' not in item:
                self.fail('fail_at_ms is required', path)
            fail_at = item['fail_at_ms']
            self.require(Validators.validate_positive_int(fail_at, 'fail_at_ms', minimum=0), path + ('fail_at_ms',))
            recover_at = item.get('recover_at_ms')
            if recover_at is not None:
                self.require(Validators.validate_positive_int(recover_at, 'recover_at_ms', minimum=fail_at + 1),
                             path + ('recover_at_ms',))
            mode = item.get('mode', 'down')
            self.require(Validators.validate_fault_mode(mode), path + ('mode',))
            slowdown = item.get('slowdown', 1.0 if mode == 'down' else 4.0)
            if isinstance(slowdown, bool) or not isinstance(slowdown, (int, float)) or slowdown < 1:
                self.fail('slowdown must be a number >= 1', path + ('slowdown',))
            out.append(FaultSpec(item['node'], fail_at, recover_at, mode, float(slowdown)))

        # One outage at a time per node
        by_node = {}
        for fault in out:
            by_node.setdefault(fault.node, []).append(fault)
        for node_id, faults in by_node.items():
            faults.sort(key=lambda f: f.fail_at_ms)
            for prev, nxt in zip(faults, faults[1:]):
                if prev.recover_at_ms is None or prev.recover_at_ms > nxt.fail_at_ms:
                    self.fail(f'overlapping faults on node {node_id!r}', ('faults',))
        return tuple(sorted(out, key=lambda f: (f.fail_at_ms, f.node)))

    def health(self, block):
        block = dict(block or {})
        for key in ('probe_interval_ms', 'probe_timeout_ms', 'fail_threshold', 'recover_threshold'):
            if key in block:
                self.require(Validators.validate_positive_int(block[key], key), ('health', key))
        if 'degraded_latency_ms' in block:
            self.require(Validators.validate_non_negative(block['degraded_latency_ms'], 'degraded_latency_ms'),
                         ('health', 'degraded_latency_ms'))
        if 'enabled' in block and not isinstance(block['enabled'], bool):
            self.fail('enabled must be true or false', ('health', 'enabled'))
        try:
            return HealthConfig(**block)
        except ValueError as e:
            self.fail(str(e), ('health',))

    def gateway(self, block):
        block = dict(block or {})
        if 'request_timeout_ms' in block:
            self.require(Validators.validate_positive_int(block['request_timeout_ms'], 'request_timeout_ms'),
                         ('gateway', 'request_timeout_ms'))
        if 'retries' in block:
            self.require(Validators.validate_positive_int(block['retries'], 'retries', minimum=0),
                         ('gateway', 'retries'))
        for key in ('address', 'admin_address'):
            self.require(Validators.validate_address(block.get(key)), ('gateway', key))
        return GatewaySpec(**block)

    def scenario(self, name):
        data = self.data
        self.check_keys(data, SCHEMA)

        seed = data.get('seed', 0)
        self.require(Validators.validate_seed(seed), ('seed',))
        duration = data.get('duration_s', 60)
        if isinstance(duration, bool) or not isinstance(duration, (int, float)) or duration <= 0:
            self.fail('duration_s must be a number > 0', ('duration_s',))
        policy = data.get('routing_policy', STICKY)
        self.require(Validators.validate_routing_policy(policy), ('routing_policy',))

        ring = data.get('ring') or {}
        vnodes = ring.get('vnodes_per_weight', DEFAULT_VNODES_PER_WEIGHT)
        self.require(Validators.validate_positive_int(vnodes, 'vnodes_per_weight'), ('ring', 'vnodes_per_weight'))
        hash_seed = ring.get('hash_seed', 0)
        self.require(Validators.validate_seed(hash_seed), ('ring', 'hash_seed'))

        base_cost = self.cost(data.get('cost'), ('cost',))
        nodes = self.nodes(data.get('nodes'), base_cost)

        return Scenario(
            name=str(data.get('name', name)),
            description=str(data.get('description', '')),
            seed=seed,
            duration_s=float(duration),
            nodes=nodes,
            workload=self.workload(data.get('workload')),
            routing_policy=policy,
            vnodes_per_weight=vnodes,
            hash_seed=hash_seed,
            health=self.health(data.get('health')),
            faults=self.faults(data.get('faults'), [n.id for n in nodes]),
            gateway=self.gateway(data.get('gateway')),
        )


def _collect_marks(node, path, marks):
    if isinstance(node, yaml.MappingNode):
        for key_node, value_node in node.value:
            p = path + (key_node.value,)
            if p in marks:
                mark = key_node.start_mark
                raise ScenarioError(f'{_dotted(p)}: duplicate key', key=_dotted(p),
                                    line=mark.line + 1, column=mark.column + 1)
            marks[p] = key_node.start_mark
            _collect_marks(value_node, p, marks)
    elif isinstance(node, yaml.SequenceNode):
        for i, item in enumerate(node.value):
            p = path + (i,)
            marks[p] = item.start_mark
            _collect_marks(item, p, marks)


def parse_scenario(text, name='scenario'):
    """Parse scenario YAML text; raises ScenarioError with line and column"""
    try:
        root = yaml.compose(text, Loader=yaml.SafeLoader)
        data = yaml.safe_load(text)
    except yaml.MarkedYAMLError as e:
        mark = e.problem_mark or e.context_mark
        raise ScenarioError(f'invalid YAML: {e.problem}', line=mark.line + 1 if mark else None,
                            column=mark.column + 1 if mark else None)
    except yaml.YAMLError as e:
        raise ScenarioError(f'invalid YAML: {e}')

    if root is None or not isinstance(data, dict):
        raise ScenarioError('scenario must be a mapping', line=1, column=1)

    marks = {}
    _collect_marks(root, (), marks)
    scenario = _Loader(data, marks).scenario(name)
    logger.debug(f'Loaded {scenario} digest={scenario.digest()}')
    return scenario


def load_scenario(path):
    """Read and validate a scenario file; its name defaults to the file stem"""
    try:
        with open(path) as f:
            text = f.read()
    except OSError as e:
        raise ScenarioError(f'cannot read {path}: {e.strerror}')
    name = os.path.splitext(os.path.basename(path))[0]
    return parse_scenario(text, name=name)

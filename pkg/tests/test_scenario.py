import glob
import os

import pytest

from app.errors import ScenarioError
from app.models import ROUND_ROBIN, STICKY
from app.sim.scenario import load_scenario, parse_scenario
from tests.conftest import SCENARIOS, scenario_from

NODES = 'nodes:\n  - {id: a}\n  - {id: b}\n'


@pytest.mark.parametrize('path', sorted(glob.glob(os.path.join(SCENARIOS, '*.scenario'))))
def test_bundled_scenarios_validate(path):
    scenario = load_scenario(path)
    assert scenario.nodes
    assert scenario.workload.components


def test_name_defaults_to_file_stem(tmp_path):
    path = tmp_path / 'drill.scenario'
    path.write_text(NODES)
    assert load_scenario(str(path)).name == 'drill'


def test_defaults():
    scenario = parse_scenario(NODES)
    assert scenario.routing_policy == STICKY
    assert scenario.seed == 0
    assert scenario.vnodes_per_weight == 128
    assert scenario.health.enabled
    assert scenario.gateway.retries == 1
    assert scenario.generate_trace() == []


def test_unknown_key_names_key_and_position():
    with pytest.raises(ScenarioError) as e:
        parse_scenario('seed: 1\nnodes:\n  - {id: a, wieght: 2}\n')
    assert e.value.key == 'nodes[0].wieght'
    assert e.value.line == 3
    assert e.value.column == 13
    assert 'wieght' in str(e.value)


def test_unknown_top_level_key():
    with pytest.raises(ScenarioError) as e:
        parse_scenario(NODES + 'routing: sticky\n')
    assert e.value.key == 'routing'
    assert e.value.line == 4


def test_duplicate_key_rejected():
    with pytest.raises(ScenarioError) as e:
        parse_scenario('seed: 1\nseed: 2\n' + NODES)
    assert e.value.line == 2


def test_invalid_yaml_reports_position():
    with pytest.raises(ScenarioError) as e:
        parse_scenario('nodes: [a, b\nseed: 1\n')
    assert e.value.line is not None


def test_empty_ring_rejected():
    with pytest.raises(ScenarioError):
        parse_scenario('seed: 1\nnodes: []\n')
    with pytest.raises(ScenarioError):
        parse_scenario('seed: 1\n')


def test_duplicate_node_ids_rejected():
    with pytest.raises(ScenarioError) as e:
        parse_scenario('nodes:\n  - {id: a}\n  - {id: a}\n')
    assert e.value.key == 'nodes[1].id'


def test_bad_values_rejected():
    for text in (NODES + 'seed: -1\n',
                 NODES + 'routing_policy: random\n',
                 NODES + 'duration_s: 0\n',
                 'nodes:\n  - {id: "bad id"}\n',
                 'nodes:\n  - {id: a, weight: 0}\n',
                 'nodes:\n  - {id: a, address: "nohost"}\n',
                 NODES + 'health: {probe_interval_ms: 1000, probe_timeout_ms: 1000}\n',
                 NODES + 'cost: {preset: huge}\n',
                 NODES + 'workload: {builtin: radiology}\n',
                 NODES + 'workload: {builtin: care_gap, profile: {name: x}}\n'):
        with pytest.raises(ScenarioError):
            parse_scenario(text)


def test_faults():
    scenario = parse_scenario(NODES + 'faults:\n'
                              '  - {node: b, fail_at_ms: 5000, mode: slow}\n'
                              '  - {node: a, fail_at_ms: 1000, recover_at_ms: 2000}\n')
    assert [f.node for f in scenario.faults] == ['a', 'b']
    assert scenario.faults[0].mode == 'down'
    assert scenario.faults[0].slowdown == 1.0
    assert scenario.faults[1].slowdown == 4.0


def test_fault_validation():
    with pytest.raises(ScenarioError) as e:
        parse_scenario(NODES + 'faults:\n  - {node: z, fail_at_ms: 1}\n')
    assert e.value.key == 'faults[0].node'
    with pytest.raises(ScenarioError):
        parse_scenario(NODES + 'faults:\n  - {node: a, fail_at_ms: 10, recover_at_ms: 5}\n')
    with pytest.raises(ScenarioError):
        parse_scenario(NODES + 'faults:\n  - {node: a, fail_at_ms: 10}\n  - {node: a, fail_at_ms: 20}\n')
    with pytest.raises(ScenarioError):
        parse_scenario(NODES + 'faults:\n  - {node: a, fail_at_ms: 10, mode: melt}\n')


def test_per_node_cost_overrides_shared_cost():
    scenario = parse_scenario('cost: {preset: student_300b}\n'
                              'nodes:\n  - {id: a}\n  - {id: b, cost: {preset: teacher_405b}}\n'
                              '  - {id: c, cost: {ttft_floor: 20}}\n')
    assert scenario.node('a').cost.preset_name == 'student_300b'
    assert scenario.node('b').cost.preset_name == 'teacher_405b'
    c = scenario.node('c').cost
    assert c.preset_name == 'student_300b'
    assert c.ttft_floor.value == 20


def test_mixed_workload():
    scenario = parse_scenario(NODES + 'duration_s: 60\n'
                              'workload:\n  mix:\n'
                              '    - {builtin: care_gap, weight: 2}\n'
                              '    - {builtin: insurance_benefits}\n')
    assert [(p.name, w) for p, w in scenario.workload.components] == [('care_gap', 2.0),
                                                                      ('insurance_benefits', 1.0)]
    with pytest.raises(ScenarioError):
        parse_scenario(NODES + 'workload:\n  mix:\n    - {builtin: care_gap}\n    - {builtin: care_gap}\n')


def test_digest_tracks_configuration(small_scenario):
    again = scenario_from("""
        seed: 9
        duration_s: 30
        nodes:
          - {id: a}
          - {id: b}
          - {id: c}
        workload:
          profile:
            name: small
            initial_context_tokens: {kind: lognormal, median: 1000, sigma: 0.1}
            new_tokens_per_turn: {kind: lognormal, median: 100, sigma: 0.1}
            output_tokens_per_turn: 10
            turns_per_session: 5
            inter_turn_gap_ms: 2000
            arrival_rate: 1.0
    """, name='small')
    assert again.digest() == small_scenario.digest()
    assert small_scenario.with_seed(10).digest() != small_scenario.digest()
    assert small_scenario.with_policy(ROUND_ROBIN).digest() != small_scenario.digest()


def test_overrides(small_scenario):
    assert not small_scenario.with_health(False).health.enabled
    preset = small_scenario.with_cost_preset('teacher_405b')
    assert {n.cost.preset_name for n in preset.nodes} == {'teacher_405b'}
    assert small_scenario.generate_trace() == small_scenario.generate_trace()
    assert small_scenario.build_ring().node_ids == ['a', 'b', 'c']

import os
import textwrap

import pytest

from app.sim.scenario import load_scenario, parse_scenario
from app.utils.distributions import stream

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
SCENARIOS = os.path.join(ROOT, 'scenarios')


def bundled(name):
    return os.path.join(SCENARIOS, f'{name}.scenario')


def scenario_from(text, name='test'):
    return parse_scenario(textwrap.dedent(text), name=name)


SMALL = """
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
"""


@pytest.fixture
def small_scenario():
    return scenario_from(SMALL, name='small')


@pytest.fixture
def load_bundled():
    return lambda name: load_scenario(bundled(name))


@pytest.fixture
def rng():
    return stream(1234, 'tests')


@pytest.fixture
def session_ids():
    gen = stream(42, 'tests', 'session-ids')
    return [f'sess-{gen.integers(0, 2 ** 63)}' for _ in range(10000)]

"""Command-line entry point.

Exit codes: 0 ok, 2 parse or validation error, 3 runtime or conservation
violation, 4 port in use, 5 assertion failure.
"""
import asyncio
import logging
import sys

import click

from config import get_config
from app.errors import CacheRouteError, PortInUseError, ReportError, TraceError
from app.log import setup_logging
from app.metrics.report import (
    check_assertions, compare, load_report, parse_assertion, render_compare_json, render_compare_text,
    render_json, render_text,
)
from app.models import ROUND_ROBIN, ROUTING_POLICIES, STICKY
from app.sim import engine
from app.sim.scenario import load_scenario
from app.utils.cost_model import PRESETS
from app.utils.workload import read_trace, write_trace

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_INVALID = 2
EXIT_RUNTIME = 3
EXIT_PORT_IN_USE = 4
EXIT_ASSERTION = 5

STRUCTURED = 'structured'

ENV_HELP = """\b
Environment (prefix CACHEROUTE_, also read from .env):
  CACHEROUTE_ENV               config class: development, production, testing
  CACHEROUTE_HOST              live-mode listen host (127.0.0.1)
  CACHEROUTE_GATEWAY_PORT      gateway port (7100)
  CACHEROUTE_ADMIN_PORT        admin HTTP port (7180)
  CACHEROUTE_NODE_PORT_BASE    node i listens on base + i (7101); 0 = ephemeral
  CACHEROUTE_REQUEST_TIMEOUT_MS  driver request timeout (3000)
  CACHEROUTE_CLIENT_RETRIES    driver retries on node_error (1)
  CACHEROUTE_MAX_FRAME_BYTES   largest accepted wire frame (1048576)
  CACHEROUTE_JITTER_BUDGET_MS  loopback latency tolerance (15)
  CACHEROUTE_LOG_LEVEL, CACHEROUTE_LOG_DIR
Addresses pinned in a scenario file take precedence over these.

\b
Exit codes: 0 ok, 2 parse/validation, 3 runtime or conservation
violation, 4 port in use, 5 assertion failure.
"""


def _fail(code, message):
    click.echo(f'Error: {message}', err=True)
    sys.exit(code)


def _load(path):
    try:
        return load_scenario(path)
    except CacheRouteError as e:
        _fail(EXIT_INVALID, f'{path}: {e}')


def _emit(text, out):
    if out:
        with open(out, 'w') as f:
            f.write(text)
        click.echo(f'Wrote {out}', err=True)
    else:
        click.echo(text, nl=False)


def _render(report, fmt):
    return render_json(report) if fmt == STRUCTURED else render_text(report)


def _render_rows(rows, fmt, label_a, label_b):
    return render_compare_json(rows) if fmt == STRUCTURED else render_compare_text(rows, label_a, label_b)


def _parse_assertions(assertions):
    try:
        for a in assertions:
            parse_assertion(a)
    except ReportError as e:
        _fail(EXIT_INVALID, str(e))


def _gate(rows, assertions):
    if not assertions:
        return
    failures = check_assertions(rows, assertions)
    for failure in failures:
        click.echo(f'ASSERTION FAILED: {failure}', err=True)
    if failures:
        sys.exit(EXIT_ASSERTION)


def _overrides(scenario, seed=None, health_checks=None, cost_preset=None, policy=None):
    try:
        if seed is not None:
            scenario = scenario.with_seed(seed)
        if health_checks is not None:
            scenario = scenario.with_health(health_checks == 'on')
        if cost_preset is not None:
            scenario = scenario.with_cost_preset(cost_preset)
        if policy is not None:
            scenario = scenario.with_policy(policy)
    except CacheRouteError as e:
        _fail(EXIT_INVALID, str(e))
    return scenario


format_option = click.option('--format', 'fmt', type=click.Choice(['text', STRUCTURED]), default='text',
                             show_default=True, help='Report format')
out_option = click.option('--out', type=click.Path(dir_okay=False, writable=True), help='Write the report here')
seed_option = click.option('--seed', type=click.IntRange(0, 2 ** 64 - 1), help='Override the scenario seed')
assert_option = click.option('--assert', 'assertions', multiple=True, metavar='"KEY ratio OP X"',
                             help='Gate on a metric ratio a/b, e.g. "req_throughput ratio >= 1.25" (repeatable)')


@click.group(epilog=ENV_HELP)
@click.option('--env', 'env_name', type=click.Choice(['development', 'production', 'testing', 'default']),
              help='Config class (defaults to CACHEROUTE_ENV)')
@click.option('-v', '--verbose', is_flag=True, help='Debug logging')
@click.pass_context
def cli(ctx, env_name, verbose):
    """Session-sticky, cache-aware inference gateway: simulator and live mode"""
    cfg = get_config(env_name)
    if verbose:
        cfg = type(cfg.__name__, (cfg,), {'LOG_LEVEL': 'DEBUG'})
    setup_logging(cfg)
    ctx.obj = cfg


@cli.command()
@click.argument('scenario_path', type=click.Path())
def validate(scenario_path):
    """Parse and validate a scenario file"""
    scenario = _load(scenario_path)
    click.echo(f'{scenario.name}: ok (digest {scenario.digest()}, {len(scenario.nodes)} nodes, '
               f'{scenario.routing_policy}, {len(scenario.faults)} faults)')


@cli.command()
@click.argument('scenario_path', type=click.Path())
@seed_option
@format_option
@out_option
@click.option('--health-checks', type=click.Choice(['on', 'off']), help='Override health checking')
@click.option('--cost-preset', type=click.Choice(sorted(PRESETS)), help='Recalibrate every node to a preset')
@click.option('--policy', type=click.Choice(ROUTING_POLICIES), help='Override the routing policy')
@click.option('--label', help='Report label (defaults to the routing policy)')
@click.option('--events', type=click.Path(dir_okay=False, writable=True), help='Also write the event log (JSON lines)')
def simulate(scenario_path, seed, fmt, out, health_checks, cost_preset, policy, label, events):
    """Run a scenario in the discrete-event simulator"""
    scenario = _overrides(_load(scenario_path), seed, health_checks, cost_preset, policy)
    try:
        report, log = engine.run(scenario, label=label or cost_preset)
    except ReportError as e:
        _fail(EXIT_RUNTIME, f'conservation check failed ({e.law}): {e}')
    except CacheRouteError as e:
        _fail(EXIT_RUNTIME, str(e))
    if events:
        log.write_jsonl(events)
    _emit(_render(report, fmt), out)
    if report.aborted:
        sys.exit(EXIT_RUNTIME)


@cli.command()
@click.argument('scenario_path', type=click.Path())
@click.option('--kind', type=click.Choice(['policy', 'health']), default='policy', show_default=True,
              help='What the paired runs differ in')
@click.option('--policy-a', type=click.Choice(ROUTING_POLICIES), default=STICKY, show_default=True)
@click.option('--policy-b', type=click.Choice(ROUTING_POLICIES), default=ROUND_ROBIN, show_default=True)
@seed_option
@format_option
@out_option
@assert_option
def ablate(scenario_path, kind, policy_a, policy_b, seed, fmt, out, assertions):
    """Paired runs over one shared trace, compared side by side"""
    scenario = _overrides(_load(scenario_path), seed)
    _parse_assertions(assertions)
    try:
        if kind == 'health':
            a, b = engine.run_health_ablation(scenario)
        else:
            a, b = engine.run_ablation(scenario, policy_a, policy_b)
    except CacheRouteError as e:
        _fail(EXIT_RUNTIME, str(e))
    rows = compare(a, b)
    _emit(_render_rows(rows, fmt, a.label, b.label), out)
    _gate(rows, assertions)


@cli.command()
@click.argument('trace_path', type=click.Path())
@click.argument('scenario_path', type=click.Path())
@format_option
@out_option
def replay(trace_path, scenario_path, fmt, out):
    """Simulate a scenario over a recorded trace instead of its workload"""
    scenario = _load(scenario_path)
    try:
        trace = read_trace(trace_path)
    except (OSError, TraceError) as e:
        _fail(EXIT_INVALID, f'{trace_path}: {e}')
    try:
        report = engine.replay(trace, scenario)
    except CacheRouteError as e:
        _fail(EXIT_RUNTIME, str(e))
    _emit(_render(report, fmt), out)


@cli.command()
@click.argument('report_a', type=click.Path())
@click.argument('report_b', type=click.Path())
@format_option
@out_option
@assert_option
def diff(report_a, report_b, fmt, out, assertions):
    """Compare two JSON reports; ratios are a/b"""
    _parse_assertions(assertions)
    try:
        a = load_report(report_a)
        b = load_report(report_b)
        rows = compare(a, b)
    except ReportError as e:
        _fail(EXIT_INVALID, str(e))
    _emit(_render_rows(rows, fmt, a.label, b.label), out)
    _gate(rows, assertions)


@cli.group()
def trace():
    """Workload traces"""


@trace.command('export')
@click.argument('scenario_path', type=click.Path())
@click.option('--out', required=True, type=click.Path(dir_okay=False, writable=True))
@seed_option
def trace_export(scenario_path, out, seed):
    """Write the scenario's generated workload as a trace file"""
    scenario = _overrides(_load(scenario_path), seed)
    turns = scenario.generate_trace()
    write_trace(turns, out)
    sessions = len({t.session for t in turns})
    click.echo(f'Wrote {len(turns)} turns ({sessions} sessions) to {out}')


@cli.group()
def ring():
    """Consistent-hash ring"""


@ring.command('inspect')
@click.argument('scenario_path', type=click.Path())
@click.option('--sample', type=click.IntRange(1, 1_000_000), default=10000, show_default=True,
              help='Sessions routed to estimate shares')
@click.option('--remove', 'remove', help='Also report the remap when this node leaves')
def ring_inspect(scenario_path, sample, remove):
    """Members, virtual point counts and sampled key shares"""
    scenario = _load(scenario_path)
    full = scenario.build_ring()
    sessions = [f'session-{i}' for i in range(sample)]
    shares = full.shares(sessions)
    points = full.point_counts()
    click.echo(f'{len(full)} members, {len(full.points)} points, hash seed {scenario.hash_seed}')
    for node_id in full.node_ids:
        click.echo(f'  {node_id:<20} weight {full.weight(node_id):>3}  points {points.get(node_id, 0):>6}  '
                   f'share {shares[node_id]:.2%}')
    if remove:
        try:
            _, report = full.remove_node(remove, sample=sessions)
        except CacheRouteError as e:
            _fail(EXIT_INVALID, str(e))
        click.echo(f'Removing {remove} remaps {report.remapped}/{report.sampled_sessions} '
                   f'sessions ({report.fraction:.2%})')


@cli.command()
@click.argument('scenario_path', type=click.Path())
@click.option('--role', type=click.Choice(['node', 'gateway', 'cluster']), default='cluster', show_default=True)
@click.option('--node', 'node_ids', multiple=True, help='With --role node: run only these nodes (repeatable)')
@click.option('--no-admin', is_flag=True, help='Do not start the admin HTTP server')
@click.pass_obj
def serve(cfg, scenario_path, role, node_ids, no_admin):
    """Run live-mode nodes and/or the gateway until SIGINT or SIGTERM"""
    from app.gateway.service import LiveCluster

    scenario = _load(scenario_path)
    unknown = sorted(set(node_ids) - set(scenario.node_ids))
    if unknown:
        _fail(EXIT_INVALID, f'unknown node(s): {", ".join(unknown)}')
    cluster = LiveCluster(scenario, cfg, role=role, node_ids=node_ids or None, admin=not no_admin)
    try:
        asyncio.run(cluster.serve_forever())
    except PortInUseError as e:
        _fail(EXIT_PORT_IN_USE, str(e))
    except CacheRouteError as e:
        _fail(EXIT_RUNTIME, str(e))
    except KeyboardInterrupt:
        pass
    click.echo('Stopped', err=True)


@cli.command()
@click.argument('scenario_path', type=click.Path())
@click.option('--host', help='Gateway host (defaults to the scenario or config)')
@click.option('--port', type=click.IntRange(1, 65535), help='Gateway port')
@click.option('--trace', 'trace_path', type=click.Path(), help='Replay this trace instead of the workload')
@click.option('--time-scale', type=click.FloatRange(min=0.0, min_open=True), default=1.0, show_default=True,
              help='Multiply trace arrival offsets')
@format_option
@out_option
@click.pass_obj
def drive(cfg, scenario_path, host, port, trace_path, time_scale, fmt, out):
    """Replay a trace against a running gateway and report like the simulator"""
    from app.gateway.client import GatewayClient, TraceDriver
    from app.gateway.service import LiveCluster
    from app.metrics.report import assemble

    scenario = _load(scenario_path)
    try:
        turns = read_trace(trace_path) if trace_path else scenario.generate_trace()
    except (OSError, TraceError) as e:
        _fail(EXIT_INVALID, f'{trace_path}: {e}')
    default_host, default_port = LiveCluster(scenario, cfg, role='gateway').gateway_address()
    client = GatewayClient(host or default_host, port or default_port, timeout_ms=cfg.REQUEST_TIMEOUT_MS,
                           retries=cfg.CLIENT_RETRIES, max_frame_bytes=cfg.MAX_FRAME_BYTES)
    try:
        log = asyncio.run(TraceDriver(scenario, client, time_scale).run(turns))
        report = assemble(log)
    except ReportError as e:
        _fail(EXIT_RUNTIME, f'conservation check failed ({e.law}): {e}')
    except (OSError, CacheRouteError) as e:
        _fail(EXIT_RUNTIME, str(e))
    _emit(_render(report, fmt), out)

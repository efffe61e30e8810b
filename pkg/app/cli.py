import click
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Dict, List, Tuple
import logging
import sys

import numpy as np

from .models.errors import AdapnetError, ConfigError, ResourceLimitError, UnknownNodeError
from .models.schemas import RunSummary, SimulationConfig
from .services.csv_io import CSVIOService
from .services.experiments import PRESETS, ExperimentService
from .services.mesh_service import MeshService
from .services.simulation_engine import SimulationEngine
from .services.spiral_walk import BfsDistanceOracle, SpiralWalkService
from .services.topology_builder import build_geode
from config import Config

# Setup logging
logging.basicConfig(
    level=getattr(logging, Config.LOG_LEVEL.upper(), logging.INFO),
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
    stream=sys.stderr,
)
logger = logging.getLogger(__name__)


def _run_preset(args: Tuple[str, int, str, bool]) -> Dict:
    preset, seed, out, large = args
    return ExperimentService(out, large=large).run(preset, seed).model_dump()


def _run_config(config: SimulationConfig, out: Path) -> RunSummary:
    engine = SimulationEngine(config)
    engine.run()
    target = out / f"seed-{config.seed}"
    files = engine.write_outputs(target)
    state = engine.state
    summary = RunSummary(
        preset=config.preset, seed=config.seed, ticks=state.clock, nodes=len(state.topology),
        edges=state.topology.edge_count(), replicas=state.registry.total(),
        super_peers=len(state.super_layer.supers) if state.super_layer else 0,
        rounds=len(state.metrics["rounds"]), errors=len(state.metrics["errors"]),
        files=sorted(p.name for p in files),
    )
    (target / "summary.json").write_text(summary.model_dump_json(indent=2) + "\n")
    return summary


@click.group()
def cli():
    """Adapnet overlay simulator CLI"""
    try:
        Config.validate()
    except ValueError as e:
        raise click.UsageError(f"Configuration Error: {e}")


@cli.command()
@click.option('--preset', '-p', type=click.Choice(sorted(PRESETS)), help='Experiment preset')
@click.option('--config', '-c', 'config_file', type=click.Path(exists=True, dir_okay=False),
              help='Flat key=value run configuration')
@click.option('--seed', '-s', type=int, multiple=True, help='Seed (repeat for several runs)')
@click.option('--out', '-o', type=click.Path(file_okay=False), default=str(Config.RESULTS_FOLDER),
              help='Output directory')
@click.option('--large', is_flag=True, help='Full-size preset parameters (slow)')
@click.option('--workers', '-w', type=click.IntRange(min=1), default=1, help='Worker processes for several seeds')
def run(preset, config_file, seed, out, large, workers):
    """Run an experiment preset or a configuration file"""
    seeds: List[int] = list(seed) or [Config.DEFAULT_SEED]
    out = Path(out)

    if config_file:
        base = Path(config_file).stem
        try:
            for s in seeds:
                config = SimulationConfig.from_file(config_file, seed=s)
                summary = _run_config(config, out / base)
                click.echo(f"✅ {base} seed {s}: {summary.nodes} nodes, {summary.replicas} replicas, "
                           f"{summary.errors} errors")
        except ConfigError as e:
            raise click.UsageError(str(e))
        except AdapnetError as e:
            click.echo(f"❌ Run failed: {e}", err=True)
            sys.exit(1)
        return

    if not preset:
        raise click.UsageError("Either --preset or --config is required")

    jobs = [(preset, s, str(out), large) for s in seeds]
    try:
        if workers > 1 and len(jobs) > 1:
            with ProcessPoolExecutor(max_workers=workers) as executor:
                results = list(executor.map(_run_preset, jobs))
        else:
            results = [_run_preset(job) for job in jobs]
    except ConfigError as e:
        raise click.UsageError(str(e))
    except AdapnetError as e:
        click.echo(f"❌ Preset {preset} failed: {e}", err=True)
        sys.exit(1)

    failed = False
    for result in results:
        summary = RunSummary(**result)
        click.echo(f"✅ {preset} seed {summary.seed}: {', '.join(summary.files)}")
        for key, value in summary.notes.items():
            click.echo(f"   {key} = {value:g}")
        if summary.notes.get("violations"):
            failed = True
    if failed:
        click.echo("❌ Mesh invariant violations detected", err=True)
        sys.exit(1)


@cli.command('check-invariant')
@click.option('--topology', '-t', required=True, type=click.Path(exists=True, dir_okay=False),
              help='Edge list file ("idA idB" per line)')
def check_invariant(topology):
    """Check that every edge has exactly two common neighbors and the mesh is connected"""
    try:
        graph = CSVIOService().read_edge_list(topology)
    except ValueError as e:
        raise click.BadParameter(f"Invalid topology file: {e}", param_hint="'--topology'")

    report = MeshService(graph, np.random.default_rng(Config.DEFAULT_SEED)).check_invariant()
    if report.is_valid:
        click.echo(f"✅ {len(graph)} nodes, {graph.edge_count()} edges: invariant holds")
        return
    click.echo(f"❌ {report}", err=True)
    for a, b in report.violating_edges[:20]:
        click.echo(f"   edge {a}-{b}: {len(graph.common_neighbors(a, b))} common neighbors", err=True)
    sys.exit(1)


@cli.command('oracle-compare')
@click.option('--geode', '-g', 'level', required=True, type=click.IntRange(min=0), help='Geode subdivision level')
@click.option('--radius', '-r', required=True, type=click.IntRange(min=0), help='Walk radius')
@click.option('--trials', '-n', default=50, type=click.IntRange(min=1), help='Random sources to compare')
@click.option('--seed', '-s', default=Config.DEFAULT_SEED, type=int, help='Seed for source selection')
def oracle_compare(level, radius, trials, seed):
    """Compare spiral-walk balls with breadth-first search balls"""
    try:
        topology = build_geode(level)
    except ResourceLimitError as e:
        raise click.BadParameter(str(e), param_hint="'--geode'")

    rng = np.random.default_rng(seed)
    walker = SpiralWalkService(topology)
    oracle = BfsDistanceOracle(topology)
    nodes = topology.alive_nodes()
    matches = 0
    for _ in range(trials):
        source = nodes[int(rng.integers(len(nodes)))]
        report = walker.spiral_walk(source, radius)
        expected = oracle.ball(source, radius)
        if report.distance != expected or len(report.visit_order) != len(expected):
            missing = sorted(set(expected) - set(report.distance))
            extra = sorted(set(report.distance) - set(expected))
            wrong = sorted(n for n in set(expected) & set(report.distance) if expected[n] != report.distance[n])
            click.echo(f"❌ Mismatch from source {source}: missing {missing}, extra {extra}, "
                       f"wrong distance {wrong}", err=True)
            click.echo(f"{matches}/{trials} exact matches")
            sys.exit(1)
        if report.messages > 3 * len(report.visit_order):
            click.echo(f"❌ Walk from {source} used {report.messages} messages for "
                       f"{len(report.visit_order)} nodes", err=True)
            sys.exit(1)
        matches += 1
    click.echo(f"{matches}/{trials} exact matches")


@cli.command()
@click.option('--level', '-l', required=True, type=click.IntRange(min=0), help='Subdivision level')
@click.option('--out', '-o', required=True, type=click.Path(dir_okay=False), help='Edge list file to write')
def geode(level, out):
    """Write the edge list of a geode"""
    try:
        topology = build_geode(level)
    except ResourceLimitError as e:
        raise click.BadParameter(str(e), param_hint="'--level'")
    CSVIOService().write_edge_list(topology, out)
    click.echo(f"✅ Geode level {level}: {len(topology)} nodes, {topology.edge_count()} edges -> {out}")


@cli.command()
@click.option('--geode', '-g', 'level', default=Config.GEODE_LEVEL, type=click.IntRange(min=0),
              help='Geode subdivision level')
@click.option('--source', default=0, type=int, help='Walk source')
@click.option('--radius', '-r', required=True, type=click.IntRange(min=0), help='Walk radius')
@click.option('--out', '-o', type=click.Path(file_okay=False), default=str(Config.RESULTS_FOLDER),
              help='Output directory for walk_trace.csv')
def walk(level, source, radius, out):
    """Export the trace of one spiral walk as step,node,ring,messages"""
    try:
        topology = build_geode(level)
    except ResourceLimitError as e:
        raise click.BadParameter(str(e), param_hint="'--geode'")
    try:
        report = SpiralWalkService(topology).spiral_walk(source, radius)
    except UnknownNodeError as e:
        raise click.BadParameter(str(e), param_hint="'--source'")
    except AdapnetError as e:
        click.echo(f"❌ {e}", err=True)
        sys.exit(1)
    rows = [{"step": s, "node": n, "ring": r, "messages": m} for s, n, r, m in report.trace]
    path = CSVIOService().write_metrics("walk_trace", rows, out)
    click.echo(f"✅ {len(report.visit_order)} nodes, {report.messages} messages, {report.eyes} spawns -> {path}")


if __name__ == '__main__':
    cli()

from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union
import logging

import numpy as np

from ..models.errors import ConfigError, InvalidArgumentError, RepairExhaustedError
from ..models.schemas import ChurnSegment, DataId, NodeId, Query, RunSummary, SimulationConfig
from .csv_io import CSVIOService
from .replication import ReplicaRegistry, ReplicationService
from .simulation_engine import MIN_POPULATION, SimulationEngine
from .super_peer import SuperPeerService
from config import Config

logger = logging.getLogger(__name__)


@dataclass
class ExperimentPreset:
    """A named experiment: configuration overrides plus preset parameters, desk and large scale"""
    name: str
    description: str
    overrides: Dict[str, Any] = field(default_factory=dict)
    params: Dict[str, Any] = field(default_factory=dict)
    large_overrides: Dict[str, Any] = field(default_factory=dict)
    large_params: Dict[str, Any] = field(default_factory=dict)

    def config(self, seed: int, large: bool = False) -> SimulationConfig:
        values = dict(self.overrides)
        if large:
            values.update(self.large_overrides)
        return SimulationConfig(seed=seed, preset=self.name, **values)

    def parameters(self, large: bool = False) -> Dict[str, Any]:
        values = dict(self.params)
        if large:
            values.update(self.large_params)
        return values


_REPLICATION_ONLY = {"capacity_mode": "unbounded", "super_peers": False}

PRESETS: Dict[str, ExperimentPreset] = {
    preset.name: preset for preset in [
        ExperimentPreset(
            "convergence", "Replica count of one item on a static geode until no replica acts",
            overrides={"geode_level": 4, "r": 8, "t": 4, "items": 1, **_REPLICATION_ONLY},
            params={"max_rounds": 300, "stable_rounds": 100},
            large_overrides={"geode_level": 6, "r": 25},
        ),
        ExperimentPreset(
            "spacing", "Nearest same-item replica distance, geode against a grown topology",
            overrides={"geode_level": 4, "r": 8, "t": 4, "items": 1, **_REPLICATION_ONLY},
            params={"max_rounds": 300, "stable_rounds": 20},
            large_overrides={"geode_level": 6, "r": 25},
        ),
        ExperimentPreset(
            "churn-adaptation", "Replica count while the network doubles then halves, maxScore 10r and 20r",
            overrides={"geode_level": 3, "r": 4, "t": 4, "items": 1, **_REPLICATION_ONLY},
            params={"warmup_rounds": 100, "phase_ticks": 300, "factors": (10, 20)},
            large_overrides={"geode_level": 5, "r": 30, "t": 16},
            large_params={"phase_ticks": 1000},
        ),
        ExperimentPreset(
            "rare-data", "Per-item replica counts from a skewed popularity seeding",
            overrides={"geode_level": 3, "r": 16, "t": 4, "items": 0,
                       "capacity_mode": "allocated", "super_peers": False},
            params={"items": 300, "rounds": 150, "tail_max": 60},
            large_overrides={"geode_level": None, "grow_to": 10000, "r": 30},
            large_params={"items": 100000, "tail_max": 500},
        ),
        ExperimentPreset(
            "answer-speed", "Fraction of queries answered within a super-layer hop limit",
            overrides={"geode_level": None, "grow_to": 10000, "r": 8, "t": 4, "items": 0,
                       "capacity_mode": "unbounded", "super_peers": True},
            params={"trials": 200, "regulation_ticks": 10, "max_rounds": 200, "stable_rounds": 10},
            large_overrides={"grow_to": 100000},
        ),
        ExperimentPreset(
            "topology-fuzz", "Random joins and failures from the icosahedron, invariant checked after each",
            params={"joins": 5000, "failures": 2000, "full_check_every": 500, "failure_floor": 100},
            large_params={"joins": 50000, "failures": 20000},
        ),
        ExperimentPreset(
            "radius-sweep", "Converged replica count for a range of repulsive radii",
            overrides={"geode_level": 3, "t": 4, "items": 1, **_REPLICATION_ONLY},
            params={"radii": (2, 3, 4, 5, 6), "max_rounds": 150, "stable_rounds": 20},
            large_overrides={"geode_level": 5},
            large_params={"radii": (4, 6, 8, 10, 12, 16)},
        ),
    ]
}


# ----------------------------------------------------------------------
# Metrics
# ----------------------------------------------------------------------

def spacing_histogram(replication: ReplicationService, item: DataId) -> Dict[int, int]:
    """Histogram of the distance from each replica of item to its nearest same-item replica"""
    if replication.registry.count(item) < 2:
        logger.warning(f"Item {item} has fewer than 2 replicas, spacing histogram is empty")
        return {}
    return dict(sorted(Counter(replication.spacing(item)).items()))


def rarity_profile_init(registry: ReplicaRegistry, nodes: Sequence[NodeId], n_items: int,
                        rng: np.random.Generator, tail_max: int = 100,
                        tail_shape: float = 1.2, first_item: int = 0) -> Dict[DataId, int]:
    """
    Seed items with a skewed popularity: half of them with one copy, a
    sixth with two copies, the rest drawn from a Pareto tail of at least
    three copies capped at tail_max. Seeded copies are pinned originals:
    replication may clone them but never moves or drops them.

    Returns:
        Initial copy count per item

    Raises:
        ConfigError: If the tail cap exceeds the node count or the copies
            exceed the aggregate cache capacity
    """
    if n_items <= 0:
        return {}
    if tail_max < 3 or tail_max > len(nodes):
        raise ConfigError(f"Tail cap must lie within [3, {len(nodes)}], got {tail_max}")

    singles, doubles = n_items // 2, n_items // 6
    copies = [1] * singles + [2] * doubles + [
        min(tail_max, 3 + int(3 * rng.pareto(tail_shape))) for _ in range(n_items - singles - doubles)
    ]
    capacities = [registry.store(node).capacity for node in nodes]
    if all(c is not None for c in capacities) and sum(copies) > sum(capacities):
        raise ConfigError(f"{sum(copies)} copies exceed the aggregate capacity {sum(capacities)}")

    nodes = sorted(nodes)
    profile = {}
    for offset, count in enumerate(copies):
        item = first_item + offset
        for index in rng.choice(len(nodes), size=count, replace=False):
            registry.pin(nodes[int(index)], item)
        profile[item] = count
    logger.info(f"Seeded {n_items} items with {sum(copies)} copies over {len(nodes)} nodes")
    return profile


def answer_speed_curve(super_layer: SuperPeerService, target: DataId, trials: int, max_ttl: int,
                       rng: np.random.Generator) -> List[Tuple[int, float]]:
    """
    Fraction of queries from random origins answered within each hop limit 1..max_ttl

    Returns:
        (ttl, fraction) pairs, non-decreasing in fraction
    """
    alive = super_layer.topology.alive_nodes()
    hops: List[Optional[int]] = []
    for _ in range(trials):
        origin = alive[int(rng.integers(len(alive)))]
        result = super_layer.route_query(Query(target=target, ttl=max_ttl, origin=origin))
        hops.append(result.super_hops if result.answered else None)
    curve = []
    for ttl in range(1, max_ttl + 1):
        answered = sum(1 for h in hops if h is not None and h <= ttl)
        curve.append((ttl, answered / trials if trials else 0.0))
    return curve


def converge(engine: SimulationEngine, max_rounds: int, stable_rounds: int) -> int:
    """Replication rounds until stable_rounds rounds in a row did nothing; returns rounds run"""
    stable = 0
    for done in range(1, max_rounds + 1):
        report = engine.replication_round()
        stable = stable + 1 if report.activity == 0 else 0
        if stable >= stable_rounds:
            return done
    return max_rounds


# ----------------------------------------------------------------------
# Presets
# ----------------------------------------------------------------------

class ExperimentService:
    """Runs experiment presets and writes their CSV files and summary"""

    def __init__(self, out_dir: Union[str, Path] = Config.RESULTS_FOLDER, large: bool = False):
        self.out_dir = Path(out_dir)
        self.large = large
        self.csv_io = CSVIOService()
        self.runners: Dict[str, Callable[[ExperimentPreset, int, Path], RunSummary]] = {
            "convergence": self._run_convergence,
            "spacing": self._run_spacing,
            "churn-adaptation": self._run_churn_adaptation,
            "rare-data": self._run_rare_data,
            "answer-speed": self._run_answer_speed,
            "topology-fuzz": self._run_topology_fuzz,
            "radius-sweep": self._run_radius_sweep,
        }

    def run(self, preset_name: str, seed: int) -> RunSummary:
        """
        Run one preset for one seed

        Returns:
            RunSummary, also written as summary.json next to the CSV files

        Raises:
            InvalidArgumentError: If the preset is unknown
        """
        if preset_name not in PRESETS:
            raise InvalidArgumentError(f"Unknown preset '{preset_name}'. Available: {sorted(PRESETS)}")
        preset = PRESETS[preset_name]
        out = self.out_dir / preset_name / f"seed-{seed}"
        logger.info(f"Running preset {preset_name} (seed {seed}, large={self.large}) into {out}")
        summary = self.runners[preset_name](preset, seed, out)
        summary.files = sorted(p.name for p in out.glob("*.csv"))
        (out / "summary.json").write_text(summary.model_dump_json(indent=2) + "\n")
        return summary

    def _summary(self, preset: ExperimentPreset, seed: int, engine: SimulationEngine, **notes) -> RunSummary:
        state = engine.state
        return RunSummary(
            preset=preset.name, seed=seed, ticks=state.clock,
            nodes=len(state.topology), edges=state.topology.edge_count(),
            super_peers=len(state.super_layer.supers) if state.super_layer else 0,
            replicas=state.registry.total(), rounds=len(state.metrics["rounds"]),
            errors=len(state.metrics["errors"]), notes=notes,
        )

    def _grown_twin(self, preset: ExperimentPreset, seed: int, size: int, **updates) -> SimulationEngine:
        """Engine on a topology grown by joins to the given size, otherwise configured like the geode run"""
        config = preset.config(seed, self.large).model_copy(
            update={"grow_to": size, "geode_level": None, **updates}
        )
        return SimulationEngine(config)

    def _run_convergence(self, preset: ExperimentPreset, seed: int, out: Path) -> RunSummary:
        params = preset.parameters(self.large)
        engine = SimulationEngine(preset.config(seed, self.large))
        rounds = converge(engine, params["max_rounds"], params["stable_rounds"])
        grown = self._grown_twin(preset, seed, len(engine.state.topology))
        rounds_grown = converge(grown, params["max_rounds"], params["stable_rounds"])
        engine.write_outputs(out)
        self.csv_io.write_metrics("rounds", grown.state.metrics["rounds"], out, name="rounds_grown")
        return self._summary(
            preset, seed, engine,
            rounds_to_fixpoint=float(rounds), rounds_to_fixpoint_grown=float(rounds_grown),
            replicas_grown=float(grown.state.registry.total()),
        )

    def _run_spacing(self, preset: ExperimentPreset, seed: int, out: Path) -> RunSummary:
        params = preset.parameters(self.large)
        geode = SimulationEngine(preset.config(seed, self.large))
        converge(geode, params["max_rounds"], params["stable_rounds"])
        grown = self._grown_twin(preset, seed, len(geode.state.topology))
        converge(grown, params["max_rounds"], params["stable_rounds"])

        means = {}
        for label, engine in (("geode", geode), ("grown", grown)):
            histogram = spacing_histogram(engine.state.replication, engine.state.items[0])
            rows = [{"distance": d, "count": c} for d, c in histogram.items()]
            name = "spacing" if label == "geode" else "spacing_grown"
            self.csv_io.write_metrics("spacing", rows, out, name=name)
            total = sum(histogram.values())
            means[f"mean_spacing_{label}"] = (
                sum(d * c for d, c in histogram.items()) / total if total else 0.0
            )
        self.csv_io.write_metrics("rounds", geode.state.metrics["rounds"], out)
        self.csv_io.write_metrics("rounds", grown.state.metrics["rounds"], out, name="rounds_grown")
        return self._summary(preset, seed, geode, **means)

    def _run_churn_adaptation(self, preset: ExperimentPreset, seed: int, out: Path) -> RunSummary:
        params = preset.parameters(self.large)
        phase = params["phase_ticks"]
        notes: Dict[str, float] = {}
        engine = None
        for factor in params["factors"]:
            base = preset.config(seed, self.large)
            n0 = base.grow_to or 10 * 4 ** base.geode_level + 2
            config = base.model_copy(update={
                "max_score": factor * base.r,
                "horizon": 2 * phase,
                "churn": [
                    ChurnSegment(start=0, end=phase, arrival_rate=n0 / phase, departure_rate=0.0),
                    ChurnSegment(start=phase, end=2 * phase, arrival_rate=0.0, departure_rate=n0 / phase),
                ],
            })
            engine = SimulationEngine(config)
            converge(engine, params["warmup_rounds"], params["warmup_rounds"])
            baseline = engine.state.registry.total() / len(engine.state.topology)
            engine.run()

            ratios = np.array([
                row["replicas"] / row["nodes"] for row in engine.state.metrics["population"] if row["nodes"]
            ])
            deviation = float(np.max(np.abs(ratios / baseline - 1))) if len(ratios) and baseline else 0.0
            notes[f"max_ratio_deviation_{factor}r"] = deviation
            notes[f"ratio_std_{factor}r"] = float(np.std(ratios)) if len(ratios) else 0.0
            engine.write_outputs(out, suffix=f"_{factor}r")
        return self._summary(preset, seed, engine, **notes)

    def _run_rare_data(self, preset: ExperimentPreset, seed: int, out: Path) -> RunSummary:
        params = preset.parameters(self.large)
        engine = SimulationEngine(preset.config(seed, self.large))
        state = engine.state
        profile = rarity_profile_init(
            state.registry, state.topology.alive_nodes(), params["items"], state.rng,
            tail_max=min(params["tail_max"], len(state.topology))
        )
        state.items.extend(sorted(profile))
        engine.allocate_capacities()
        for _ in range(params["rounds"]):
            engine.replication_round()

        rows = sorted(
            ({"item": item, "initialCopies": copies, "finalCopies": state.registry.count(item)}
             for item, copies in profile.items()),
            key=lambda row: (row["initialCopies"], row["item"])
        )
        self.csv_io.write_metrics("rarity", rows, out)
        engine.write_outputs(out)

        singles = [row for row in rows if row["initialCopies"] == 1]
        popular = [row for row in rows if row["initialCopies"] >= 10]
        notes = {
            "singles_replicated": sum(r["finalCopies"] > 1 for r in singles) / len(singles) if singles else 0.0,
            "popular_max_change": max(
                (abs(r["finalCopies"] / r["initialCopies"] - 1) for r in popular), default=0.0
            ),
        }
        return self._summary(preset, seed, engine, **notes)

    def _run_answer_speed(self, preset: ExperimentPreset, seed: int, out: Path) -> RunSummary:
        params = preset.parameters(self.large)
        engine = SimulationEngine(preset.config(seed, self.large))
        state = engine.state
        item = engine.seed_items(1)[0]
        converge(engine, params["max_rounds"], params["stable_rounds"])
        for _ in range(params["regulation_ticks"]):
            state.super_layer.regulation_tick()
        state.super_layer.index_round()

        supers = len(state.super_layer.supers)
        curve = answer_speed_curve(state.super_layer, item, params["trials"], max(supers, 1), state.rng)
        self.csv_io.write_metrics(
            "answer_speed", [{"ttl": ttl, "answeredFraction": fraction} for ttl, fraction in curve], out
        )
        engine.finish()
        engine.write_outputs(out)
        return self._summary(
            preset, seed, engine,
            super_fraction=supers / len(state.topology),
            answered_at_super_count=curve[-1][1] if curve else 0.0,
        )

    def _run_topology_fuzz(self, preset: ExperimentPreset, seed: int, out: Path) -> RunSummary:
        params = preset.parameters(self.large)
        engine = SimulationEngine(
            SimulationConfig(seed=seed, preset=preset.name, geode_level=0, items=0,
                             super_peers=False, capacity_mode="unbounded")
        )
        state = engine.state
        mesh = state.mesh
        operations = ["join"] * params["joins"] + ["fail"] * params["failures"]
        order = [operations[int(index)] for index in state.rng.permutation(len(operations))]
        floor = max(params["failure_floor"], MIN_POPULATION)
        deferred = 0
        violations = 0
        step = 0
        while step < len(order) or deferred:
            state.clock = step
            state.topology.touched.clear()
            if step < len(order) and order[step] == "join":
                alive = state.topology.alive_nodes()
                try:
                    mesh.connect_node(alive[int(state.rng.integers(len(alive)))])
                except InvalidArgumentError as e:
                    engine.record_error("InvalidArgumentError", -1, str(e))
            elif step < len(order):
                deferred += 1
            alive = state.topology.alive_nodes()
            if deferred and len(alive) > floor:
                deferred -= 1
                node = alive[int(state.rng.integers(len(alive)))]
                state.topology.mark_dead(node)
                try:
                    mesh.repair_failure(node)
                except RepairExhaustedError as e:
                    engine.record_error("RepairExhaustedError", node, str(e))
            elif step >= len(order):
                logger.warning(f"{deferred} failures left undone: the mesh has only {len(alive)} nodes")
                break

            report = mesh.check_invariant(around=sorted(state.topology.touched))
            if (step + 1) % params["full_check_every"] == 0:
                report = mesh.check_invariant()
                state.metrics["population"].append(
                    {"tick": step, "nodes": len(state.topology), "replicas": 0, "supers": 0}
                )
            if not report.is_valid:
                violations += len(report.violating_edges) or 1
                engine.record_error("InvariantViolation", -1, str(report))
            step += 1

        final = mesh.check_invariant()
        engine.finish()
        engine.write_outputs(out)
        return self._summary(
            preset, seed, engine,
            violations=float(violations + len(final.violating_edges)),
            components=float(len(final.components)),
            mean_degree=state.topology.mean_degree(),
        )

    def _run_radius_sweep(self, preset: ExperimentPreset, seed: int, out: Path) -> RunSummary:
        params = preset.parameters(self.large)
        rows: Dict[str, List[Dict[str, Any]]] = {"radius_sweep": [], "radius_sweep_grown": []}
        engine = None
        for r in params["radii"]:
            updates = {"r": r, "max_score": 10.0 * r}
            engine = SimulationEngine(preset.config(seed, self.large).model_copy(update=updates))
            size = len(engine.state.topology)
            for name, run in (("radius_sweep", engine),
                              ("radius_sweep_grown", self._grown_twin(preset, seed, size, **updates))):
                rounds = converge(run, params["max_rounds"], params["stable_rounds"])
                rows[name].append({
                    "r": r, "maxScore": run.config.max_score,
                    "replicas": run.state.registry.total(), "rounds": rounds,
                })
        for name, series in rows.items():
            self.csv_io.write_metrics("radius_sweep", series, out, name=name)
        return self._summary(preset, seed, engine, radii=float(len(rows["radius_sweep"])))

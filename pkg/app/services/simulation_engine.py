"""
Deterministic discrete-event core: one seeded generator, an event queue
ordered by (tick, insertion sequence) and the handlers driving pings,
repairs, replication rounds, regulation and queries.
"""
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union
import heapq
import logging

import numpy as np

from ..models.errors import AdapnetError, InvalidArgumentError, RepairExhaustedError
from ..models.schemas import (
    ChurnSegment, DataId, Event, EventKind, NodeId, Query, RoundReport, SimulationConfig
)
from ..models.topology import Topology
from .csv_io import CSVIOService
from .mesh_service import MeshService
from .replication import ReplicaRegistry, ReplicationService
from .spiral_walk import BfsDistanceOracle, SpiralDistanceOracle
from .super_peer import SuperPeerService
from .topology_builder import build_geode
from config import Config

logger = logging.getLogger(__name__)

JOIN_ATTEMPTS = 5
MIN_POPULATION = 12


def sample_capability(rng: np.random.Generator, distribution: Dict[int, float]) -> int:
    """Draw a capability from a discrete distribution {value: probability}"""
    values = sorted(distribution)
    weights = np.array([distribution[v] for v in values], dtype=float)
    if len(values) == 0 or weights.sum() <= 0:
        raise InvalidArgumentError("Capability distribution is empty")
    return int(values[int(rng.choice(len(values), p=weights / weights.sum()))])


def churn_schedule(arrival_rate: float, departure_rate: float, horizon: int,
                   rng: np.random.Generator, start: int = 0) -> List[Event]:
    """
    Memoryless arrivals and departures: per tick, Poisson-distributed counts
    of Join and Fail events. Departed nodes are drawn when the event fires.
    """
    if arrival_rate < 0 or departure_rate < 0:
        raise InvalidArgumentError("Churn rates must be non-negative")
    events: List[Event] = []
    for tick in range(start, horizon):
        for _ in range(int(rng.poisson(arrival_rate))):
            events.append(Event(time=tick, seq=len(events), kind=EventKind.JOIN))
        for _ in range(int(rng.poisson(departure_rate))):
            events.append(Event(time=tick, seq=len(events), kind=EventKind.FAIL))
    return events


def segments_schedule(segments: Sequence[ChurnSegment], rng: np.random.Generator) -> List[Event]:
    events: List[Event] = []
    for segment in segments:
        events.extend(churn_schedule(
            segment.arrival_rate, segment.departure_rate, segment.end, rng, start=segment.start
        ))
    events.sort(key=lambda e: e.time)
    return events


def grow_topology(n: int, rng: np.random.Generator, flatten: bool = True) -> Topology:
    """Grow a mesh from the icosahedron by joins through random contacts"""
    if n < 12:
        raise InvalidArgumentError(f"A grown topology has at least 12 nodes, got {n}")
    mesh = MeshService(MeshService.seed_icosahedron(), rng)
    while len(mesh.topology) < n:
        alive = mesh.topology.alive_nodes()
        mesh.connect_node(alive[int(rng.integers(len(alive)))], flatten=flatten)
    logger.info(f"Grew topology to {n} nodes (mean degree {mesh.topology.mean_degree():.3f})")
    return mesh.topology


class EventQueue:
    """Events ordered by (time, insertion sequence)"""

    def __init__(self):
        self._heap: List[Event] = []
        self._seq = 0

    def push(self, time: int, kind: EventKind, payload: Optional[Dict] = None) -> Event:
        event = Event(time=time, seq=self._seq, kind=kind, payload=payload or {})
        self._seq += 1
        heapq.heappush(self._heap, event)
        return event

    def pop(self) -> Event:
        return heapq.heappop(self._heap)

    def __len__(self) -> int:
        return len(self._heap)


@dataclass
class SimState:
    """Single authoritative copy of the simulated network"""
    topology: Topology
    rng: np.random.Generator
    mesh: MeshService
    registry: ReplicaRegistry
    replication: ReplicationService
    super_layer: Optional[SuperPeerService]
    capabilities: Dict[NodeId, int] = field(default_factory=dict)
    items: List[DataId] = field(default_factory=list)
    clock: int = 0
    metrics: Dict[str, List[Dict]] = field(default_factory=dict)


class SimulationEngine:
    """Builds the simulated network from a configuration and runs the tick loop"""

    FAMILIES = ("rounds", "population", "queries", "super_layer", "errors", "degree_histogram")

    def __init__(self, config: SimulationConfig, topology: Optional[Topology] = None):
        """
        Initialize the engine

        Args:
            config: Run configuration
            topology: Starting topology (built from the configuration when omitted)
        """
        self.config = config
        rng = np.random.default_rng(config.seed)
        if topology is None:
            if config.grow_to:
                topology = grow_topology(config.grow_to, rng)
            else:
                topology = build_geode(config.geode_level)

        mesh = MeshService(topology, rng, ping_timeout=config.ping_timeout)
        registry = ReplicaRegistry()
        if config.distance_oracle == "bfs":
            oracle = BfsDistanceOracle(topology)
        else:
            oracle = SpiralDistanceOracle(topology)
        replication = ReplicationService(topology, registry, config.replication, rng, oracle)

        self.state = SimState(
            topology=topology, rng=rng, mesh=mesh, registry=registry,
            replication=replication, super_layer=None,
            metrics={family: [] for family in self.FAMILIES},
        )
        for node in topology.alive_nodes():
            self._register(node)
        if config.super_peers:
            self.state.super_layer = SuperPeerService(
                topology, registry, rng, self.state.capabilities, load_unit=config.regulation_load_unit
            )
            self.state.super_layer.bootstrap()
        self.queue = EventQueue()
        self._scheduled = False
        self.csv_io = CSVIOService()
        if config.items:
            self.seed_items(config.items)
        logger.info(
            f"SimulationEngine initialized (seed {config.seed}, {len(topology)} nodes, "
            f"oracle {config.distance_oracle}, capacity {config.capacity_mode})"
        )

    # ------------------------------------------------------------------
    # Setup helpers
    # ------------------------------------------------------------------

    def _register(self, node: NodeId):
        capability = sample_capability(self.state.rng, self.config.capabilities)
        self.state.capabilities[node] = capability
        capacity = capability if self.config.capacity_mode == "capability" else None
        self.state.registry.store(node, capacity)

    def seed_items(self, count: int) -> List[DataId]:
        """Place `count` new items, one copy each, on random alive nodes"""
        alive = self.state.topology.alive_nodes()
        first = len(self.state.items)
        for item in range(first, first + count):
            node = alive[int(self.state.rng.integers(len(alive)))]
            self.state.registry.add(node, item)
            self.state.items.append(item)
        if self.state.super_layer:
            self.state.super_layer.index_round()
        return self.state.items[first:]

    def allocate_capacities(self):
        """Size every cache in proportion to its current allocation"""
        for store in self.state.registry.stores.values():
            store.capacity = max(1, Config.ALLOCATED_CACHE_FACTOR * len(store.items))

    def schedule(self):
        """Push the whole event plan for the configured horizon"""
        self._scheduled = True
        config = self.config
        churn = segments_schedule(config.churn, self.state.rng) if config.churn else []
        by_tick: Dict[int, List[Event]] = {}
        for event in churn:
            by_tick.setdefault(event.time, []).append(event)
        for tick in range(config.horizon):
            for event in by_tick.get(tick, []):
                self.queue.push(tick, event.kind, event.payload)
            self.queue.push(tick, EventKind.PING_ROUND)
            if tick % config.replication_period == 0:
                self.queue.push(tick, EventKind.REPLICATION_ROUND)
            if config.super_peers and tick % config.regulation_period == 0:
                self.queue.push(tick, EventKind.REGULATION_TICK)
            if config.query_rate > 0:
                for _ in range(int(self.state.rng.poisson(config.query_rate))):
                    self.queue.push(tick, EventKind.QUERY_INJECT)

    # ------------------------------------------------------------------
    # Event loop
    # ------------------------------------------------------------------

    def run(self) -> Dict[str, List[Dict]]:
        """
        Process every queued event in order

        Returns:
            Metric rows per family

        Raises:
            AdapnetError: Module errors, only when haltOnError is set
        """
        if not self._scheduled:
            self.schedule()
        handlers = {
            EventKind.JOIN: self._on_join,
            EventKind.FAIL: self._on_fail,
            EventKind.PING_ROUND: self._on_ping,
            EventKind.REPLICATION_ROUND: self._on_replication,
            EventKind.REGULATION_TICK: self._on_regulation,
            EventKind.QUERY_INJECT: self._on_query,
        }
        while len(self.queue):
            event = self.queue.pop()
            self.state.clock = event.time
            try:
                handlers[event.kind](event)
            except AdapnetError as e:
                self.record_error(type(e).__name__, event.payload.get("node", -1), str(e))
                if self.config.halt_on_error:
                    raise
        self.finish()
        return self.state.metrics

    def record_error(self, kind: str, node: int, message: str):
        logger.error(f"Tick {self.state.clock}: {kind} at node {node}: {message}")
        self.state.metrics["errors"].append({
            "tick": self.state.clock, "kind": kind, "node": node, "message": message.replace(",", ";"),
        })

    def _on_join(self, event: Event):
        state = self.state
        node = state.topology.new_node_id()
        for _ in range(JOIN_ATTEMPTS):
            alive = state.topology.alive_nodes()
            entry = alive[int(state.rng.integers(len(alive)))]
            try:
                state.mesh.connect_node(entry, new=node)
                break
            except InvalidArgumentError:
                continue
        else:
            logger.warning(f"Tick {state.clock}: join of {node} failed after {JOIN_ATTEMPTS} contacts")
            return
        self._register(node)
        if state.super_layer:
            state.super_layer.admit(node)

    def _on_fail(self, event: Event):
        state = self.state
        alive = state.topology.alive_nodes()
        if len(alive) <= MIN_POPULATION:
            return
        node = event.payload.get("node")
        if node is None:
            node = alive[int(state.rng.integers(len(alive)))]
        state.topology.mark_dead(node)
        state.registry.drop_node(node)
        logger.debug(f"Tick {state.clock}: node {node} left")

    def _on_ping(self, event: Event):
        state = self.state
        failures = state.mesh.ping_round(state.clock)
        for failed in sorted(failures):
            if failed not in state.topology:
                continue
            try:
                state.mesh.repair_failure(failed)
            except RepairExhaustedError as e:
                self.record_error("RepairExhaustedError", failed, str(e))
                if self.config.halt_on_error:
                    raise
            finally:
                if state.super_layer:
                    state.super_layer.node_failed(failed)
        state.metrics["population"].append({
            "tick": state.clock,
            "nodes": len(state.topology),
            "replicas": state.registry.total(),
            "supers": len(state.super_layer.supers) if state.super_layer else 0,
        })

    def _on_replication(self, event: Event):
        self.replication_round()

    def replication_round(self) -> RoundReport:
        """Run one replication round and record its row"""
        report = self.state.replication.run_replication_round()
        self.state.metrics["rounds"].append({
            "round": report.round, "creates": report.creates, "moves": report.moves,
            "removes": report.removes, "totalReplicas": report.total_replicas,
        })
        return report

    def _on_regulation(self, event: Event):
        if self.state.super_layer:
            self.state.super_layer.regulation_tick()

    def _on_query(self, event: Event):
        state = self.state
        if not state.items or not state.super_layer:
            return
        alive = state.topology.alive_nodes()
        origin = alive[int(state.rng.integers(len(alive)))]
        target = state.items[int(state.rng.integers(len(state.items)))]
        result = state.super_layer.route_query(Query(target=target, ttl=self.config.ttl, origin=origin))
        state.metrics["queries"].append({
            "queryId": result.query_id, "target": result.target, "answered": int(result.answered),
            "superHops": result.super_hops, "meshHops": result.mesh_hops,
        })

    def finish(self):
        state = self.state
        state.metrics["degree_histogram"] = [
            {"degree": degree, "count": count}
            for degree, count in state.topology.degree_histogram().items()
        ]
        if state.super_layer:
            state.metrics["super_layer"] = state.super_layer.snapshot()

    def write_outputs(self, out_dir: Union[str, Path], suffix: str = "") -> List[Path]:
        """Write every metric family as CSV, header included when empty"""
        return [
            self.csv_io.write_metrics(family, self.state.metrics.get(family, []), out_dir, name=f"{family}{suffix}")
            for family in self.FAMILIES
        ]

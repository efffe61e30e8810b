from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from typing import Callable, Dict, Hashable, Iterable, List, Optional, Set, Tuple, Union
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
import math

from dotenv import dotenv_values

from .errors import ConfigError
from config import Config

NodeId = int
DataId = Hashable
Predicate = Callable[[NodeId], Iterable[DataId]]


@dataclass
class NeighborView:
    """What a node knows about its surroundings from ping messages"""
    owner: NodeId
    neighbors: Set[NodeId] = field(default_factory=set)
    second_hop: Dict[NodeId, Set[NodeId]] = field(default_factory=dict)
    last_ping: Dict[NodeId, int] = field(default_factory=dict)


@dataclass
class InvariantReport:
    """Result of a mesh invariant check"""
    violating_edges: List[Tuple[NodeId, NodeId]] = field(default_factory=list)
    components: List[List[NodeId]] = field(default_factory=list)
    degree_histogram: Dict[int, int] = field(default_factory=dict)
    low_degree_nodes: List[NodeId] = field(default_factory=list)

    @property
    def is_valid(self) -> bool:
        return not self.violating_edges and len(self.components) <= 1

    def __str__(self):
        return (
            f"{len(self.violating_edges)} violating edges, "
            f"{len(self.components)} components, degrees {self.degree_histogram}"
        )


@dataclass
class RepairOutcome:
    """How a hole left by a failed node was closed"""
    failed: NodeId
    strategy: str  # "triangulate" or "relocate"
    hole: List[NodeId] = field(default_factory=list)
    chords: List[Tuple[NodeId, NodeId]] = field(default_factory=list)
    replacement: Optional[NodeId] = None
    nested: List["RepairOutcome"] = field(default_factory=list)
    agent: Optional[NodeId] = None


class WalkMode(str, Enum):
    OUTWARD = "outward"
    INWARD = "inward"


@dataclass
class WalkerState:
    """One spiral walker. Spawned walkers share the family's distance map."""
    source: NodeId
    mode: WalkMode = WalkMode.OUTWARD
    radius: int = 0
    ttl: float = math.inf
    ring_prev: List[NodeId] = field(default_factory=list)
    ring_cur: List[NodeId] = field(default_factory=list)
    ring_next: List[NodeId] = field(default_factory=list)
    distance: Dict[NodeId, int] = field(default_factory=dict)
    visited: Set[NodeId] = field(default_factory=set)
    messages: int = 0
    spawned: List["WalkerState"] = field(default_factory=list)
    position: Optional[NodeId] = None
    discovered_by: Dict[NodeId, NodeId] = field(default_factory=dict)
    done: bool = False
    return_messages: int = 0

    @property
    def remaining_ttl(self) -> float:
        return self.ttl - self.messages - self.return_messages


@dataclass
class WalkReport:
    """Outcome of a spiral walk over a walker family"""
    source: NodeId
    visit_order: List[NodeId] = field(default_factory=list)
    hits: List[Tuple[NodeId, DataId]] = field(default_factory=list)
    messages: int = 0
    return_messages: int = 0
    eyes: int = 0
    return_path: List[NodeId] = field(default_factory=list)
    distance: Dict[NodeId, int] = field(default_factory=dict)
    complete: bool = True
    stop_reason: str = "radius"
    trace: List[Tuple[int, NodeId, int, int]] = field(default_factory=list)

    @property
    def visited(self) -> Set[NodeId]:
        return set(self.visit_order)


@dataclass
class ReplicaStore:
    """Bounded cache of data identifiers hosted by one node"""
    owner: NodeId
    items: Set[DataId] = field(default_factory=set)
    capacity: Optional[int] = None

    @property
    def overflow(self) -> int:
        if self.capacity is None:
            return 0
        return max(0, len(self.items) - self.capacity)


class ReplicationParams(BaseModel):
    """Parameters of the replication agent"""
    r: int = Field(ge=1, description="Repulsive radius in hops")
    max_score: float = Field(gt=0, description="Score threshold above which a replica is removed")
    t: int = Field(ge=1, description="Exploration sample size")

    @classmethod
    def scaled(cls, r: int, factor: float = 10.0, t: int = 4) -> "ReplicationParams":
        return cls(r=r, max_score=factor * r, t=t)


class DecisionKind(str, Enum):
    REMOVE = "remove"
    CLONE = "clone"
    MOVE = "move"
    STAY = "stay"


@dataclass
class Decision:
    kind: DecisionKind
    target: Optional[NodeId] = None
    score: float = 0.0


@dataclass
class RoundReport:
    round: int
    creates: int = 0
    moves: int = 0
    removes: int = 0
    total_replicas: int = 0

    @property
    def activity(self) -> int:
        return self.creates + self.moves + self.removes


@dataclass
class SubPeer:
    super_peer: Optional[NodeId]


@dataclass
class SuperPeer:
    """A super-peer: its sub-peers (itself included), super-layer links and index"""
    node: NodeId
    capability: int
    sub_peers: Set[NodeId] = field(default_factory=set)
    super_neighbors: Set[NodeId] = field(default_factory=set)
    index: Dict[DataId, Set[NodeId]] = field(default_factory=dict)
    sub_items: Dict[NodeId, Set[DataId]] = field(default_factory=dict)

    @property
    def quota(self) -> int:
        return self.capability // Config.QUOTA_DIVISOR

    @property
    def is_overloaded(self) -> bool:
        return len(self.sub_peers) > self.quota


PeerRole = Union[SubPeer, SuperPeer]


@dataclass
class Query:
    target: DataId
    ttl: int
    origin: NodeId
    query_id: int = 0
    super_hops_used: int = 0
    mesh_hops: int = 0


@dataclass
class QueryResult:
    query_id: int
    target: DataId
    answered: bool
    hosts: List[NodeId] = field(default_factory=list)
    super_hops: int = 0
    mesh_hops: int = 0


class EventKind(str, Enum):
    JOIN = "join"
    FAIL = "fail"
    PING_ROUND = "ping_round"
    REPLICATION_ROUND = "replication_round"
    REGULATION_TICK = "regulation_tick"
    QUERY_INJECT = "query_inject"


@dataclass(order=True)
class Event:
    time: int
    seq: int
    kind: EventKind = field(compare=False)
    payload: Dict = field(default_factory=dict, compare=False)


class ChurnSegment(BaseModel):
    """Piecewise-constant churn rates over ticks [start, end)"""
    start: int = Field(ge=0)
    end: int = Field(ge=0)
    arrival_rate: float = Field(ge=0)
    departure_rate: float = Field(ge=0)


def parse_capabilities(text: str) -> Dict[int, float]:
    """Parse "v:p,v:p,..." into a normalised discrete distribution"""
    distribution: Dict[int, float] = {}
    try:
        for part in text.split(","):
            value, probability = part.split(":")
            distribution[int(value)] = float(probability)
    except ValueError:
        raise ConfigError(f"Invalid capability distribution: '{text}'")
    total = sum(distribution.values())
    if total <= 0 or any(v < 1 or p < 0 for v, p in distribution.items()):
        raise ConfigError(f"Invalid capability distribution: '{text}'")
    return {value: probability / total for value, probability in sorted(distribution.items())}


def parse_churn(text: str) -> List[ChurnSegment]:
    """Parse "t0-t1:arr:dep;..." into churn segments"""
    segments = []
    for part in filter(None, (p.strip() for p in text.split(";"))):
        try:
            window, arrivals, departures = part.split(":")
            start, end = window.split("-")
            segments.append(ChurnSegment(
                start=int(start), end=int(end),
                arrival_rate=float(arrivals), departure_rate=float(departures)
            ))
        except ValueError:
            raise ConfigError(f"Invalid churn segment: '{part}'")
    return segments


class SimulationConfig(BaseModel):
    """Configuration of one simulation run (flat key=value file)"""
    model_config = ConfigDict(populate_by_name=True, extra="forbid")

    seed: int = Config.DEFAULT_SEED
    preset: Optional[str] = None
    geode_level: Optional[int] = Field(default=Config.GEODE_LEVEL, alias="geodeLevel", ge=0)
    grow_to: Optional[int] = Field(default=None, alias="growTo", ge=12)
    r: int = Field(default=Config.REPULSIVE_RADIUS, ge=1)
    max_score: Optional[float] = Field(default=None, alias="maxScore", gt=0)
    t: int = Field(default=Config.EXPLORATION_SAMPLE, ge=1)
    ttl: int = Field(default=Config.QUERY_TTL, ge=0)
    capabilities: Dict[int, float] = Field(default_factory=lambda: parse_capabilities(Config.CAPABILITY_DISTRIBUTION))
    churn: List[ChurnSegment] = Field(default_factory=list)
    horizon: int = Field(default=100, ge=0)
    ping_timeout: int = Field(default=Config.PING_TIMEOUT, alias="pingTimeout", ge=1)
    replication_period: int = Field(default=Config.REPLICATION_PERIOD, alias="replicationPeriod", ge=1)
    regulation_period: int = Field(default=Config.REGULATION_PERIOD, alias="regulationPeriod", ge=1)
    items: int = Field(default=1, ge=0)
    capacity_mode: str = Field(default="capability", alias="capacityMode")
    query_rate: float = Field(default=0.0, alias="queryRate", ge=0)
    super_peers: bool = Field(default=True, alias="superPeers")
    distance_oracle: str = Field(default="spiral", alias="distanceOracle")
    regulation_load_unit: str = Field(default="capability", alias="regulationLoadUnit")
    halt_on_error: bool = Field(default=False, alias="haltOnError")

    @field_validator("capabilities", mode="before")
    @classmethod
    def _parse_capabilities(cls, value):
        if isinstance(value, str):
            return parse_capabilities(value)
        return value

    @field_validator("churn", mode="before")
    @classmethod
    def _parse_churn(cls, value):
        if isinstance(value, str):
            return parse_churn(value)
        return value

    @field_validator("capacity_mode")
    @classmethod
    def _check_capacity_mode(cls, value):
        if value not in ("capability", "unbounded", "allocated"):
            raise ValueError(f"capacityMode must be capability, unbounded or allocated, got '{value}'")
        return value

    @field_validator("distance_oracle")
    @classmethod
    def _check_distance_oracle(cls, value):
        if value not in ("spiral", "bfs"):
            raise ValueError(f"distanceOracle must be spiral or bfs, got '{value}'")
        return value

    @field_validator("regulation_load_unit")
    @classmethod
    def _check_load_unit(cls, value):
        if value not in ("capability", "quota"):
            raise ValueError(f"regulationLoadUnit must be capability or quota, got '{value}'")
        return value

    @model_validator(mode="after")
    def _default_max_score(self):
        if self.max_score is None:
            self.max_score = Config.MAX_SCORE_FACTOR * self.r
        return self

    @property
    def replication(self) -> ReplicationParams:
        return ReplicationParams(r=self.r, max_score=self.max_score, t=self.t)

    @classmethod
    def from_file(cls, path: Union[str, Path], **overrides) -> "SimulationConfig":
        """Load a flat key=value configuration file"""
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"Config file not found: {path}")
        values = {key: value for key, value in dotenv_values(path).items() if value is not None}
        values.update(overrides)
        try:
            return cls(**values)
        except ValueError as e:
            raise ConfigError(f"Invalid config file {path}: {e}")


class RunSummary(BaseModel):
    """Summary of a preset or simulation run"""
    preset: Optional[str] = None
    seed: int
    ticks: int = 0
    nodes: int = 0
    edges: int = 0
    super_peers: int = 0
    replicas: int = 0
    rounds: int = 0
    errors: int = 0
    files: List[str] = []
    notes: Dict[str, float] = {}

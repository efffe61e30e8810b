from collections import deque
from typing import Dict, List, Optional, Set, Tuple
import logging
import math

import networkx as nx

from ..models.errors import InvalidArgumentError, ReturnStrandedError, RingBrokenError, UnknownNodeError
from ..models.schemas import NodeId, Predicate, WalkerState, WalkMode, WalkReport
from ..models.topology import Topology

logger = logging.getLogger(__name__)


class _Family:
    """State shared by a walker and every walker it spawned"""

    def __init__(self, report: WalkReport, max_radius: int, predicate: Optional[Predicate]):
        self.report = report
        self.max_radius = max_radius
        self.predicate = predicate
        self.distance: Dict[NodeId, int] = {}
        self.discovered_by: Dict[NodeId, NodeId] = {}
        self.walkers: List[WalkerState] = []

    @property
    def messages(self) -> int:
        return sum(w.messages for w in self.walkers)


class SpiralWalkService:
    """Exhaustive ring-by-ring exploration of a node's neighborhood"""

    def __init__(self, topology: Topology):
        self.topology = topology

    def spiral_walk(self, source: NodeId, max_radius: int, ttl: float = math.inf,
                    predicate: Optional[Predicate] = None) -> WalkReport:
        """
        Visit every node within max_radius hops of source, ring after ring

        Args:
            source: Alive node starting the walk
            max_radius: Radius of the explored ball
            ttl: Message budget (exploration and streamed-back hits)
            predicate: Maps a visited node to the data it holds that the walk looks for

        Returns:
            WalkReport; complete is False when the walk stopped on ttl or a broken ring
        """
        if not self.topology.is_alive(source):
            raise UnknownNodeError(f"Walk source {source} is not alive")
        if max_radius < 0 or ttl < 0:
            raise InvalidArgumentError("max_radius and ttl must be non-negative")

        report = WalkReport(source=source)
        family = _Family(report, max_radius, predicate)
        family.distance[source] = 0
        root = WalkerState(
            source=source, ttl=ttl, ring_cur=[source], position=source,
            distance=family.distance, discovered_by=family.discovered_by
        )
        family.walkers.append(root)

        active = [root]
        try:
            while active:
                spawned: List[WalkerState] = []
                for walker in active:
                    before = len(walker.spawned)
                    self._advance(walker, family)
                    spawned.extend(walker.spawned[before:])
                active = [w for w in active + spawned if not w.done]
        except RingBrokenError as e:
            logger.warning(f"Spiral walk from {source} stopped: {e}")
            report.complete = False
            report.stop_reason = "ring-broken"

        report.messages = family.messages
        report.return_messages = sum(w.return_messages for w in family.walkers)
        report.eyes = len(family.walkers) - 1
        report.distance = {n: family.distance[n] for n in report.visit_order}
        if report.stop_reason != "ring-broken" and root.position is not None:
            try:
                report.return_path = self.return_path(root, root.position)
            except ReturnStrandedError:
                logger.warning(f"Walker of {source} stranded on its way back")
        return report

    def _advance(self, walker: WalkerState, family: _Family):
        self.next_ring(walker, family)
        if walker.done:
            return
        if walker.radius > family.max_radius or not walker.ring_cur:
            walker.done = True

    def next_ring(self, w: WalkerState, family: _Family) -> WalkerState:
        """
        Visit the current ring in order, collect the next ring and shift

        Every node of ring_cur is visited once; each visit records the
        unclaimed neighbors of that node at distance radius+1. The collected
        ring is then split into chains: the walker keeps the chain starting
        next to its position, the others are handed to spawned walkers.
        """
        t = self.topology
        expand = w.radius < family.max_radius
        w.ring_next = []
        for q in w.ring_cur:
            if not self._visit(w, q, family):
                w.done = True
                family.report.complete = False
                family.report.stop_reason = "ttl"
                return w
            if expand:
                for n in sorted(t.neighbors(q)):
                    if n not in w.distance:
                        w.distance[n] = w.radius + 1
                        w.discovered_by[n] = q
                        w.ring_next.append(n)

        chains = self._chains(w.ring_next, w.position, set(w.ring_cur))
        w.ring_prev, w.radius = w.ring_cur, w.radius + 1
        w.ring_cur = chains[0] if chains else []
        if len(chains) > 1:
            self.detect_and_spawn(w, chains[1:], family)
        return w

    def _visit(self, w: WalkerState, q: NodeId, family: _Family) -> bool:
        t = self.topology
        if not t.is_alive(q) or any(not t.is_alive(n) for n in t.neighbors(q)):
            raise RingBrokenError(q, w.radius)
        cost = self._hops(w.position, q, w.distance)
        if cost > w.remaining_ttl:
            return False
        w.messages += cost
        w.position = q
        w.visited.add(q)

        report = family.report
        report.visit_order.append(q)
        report.trace.append((len(report.visit_order) - 1, q, w.radius, family.messages))
        if family.predicate is not None:
            for item in family.predicate(q):
                depth = w.distance[q]
                if depth > w.remaining_ttl:
                    break
                w.return_messages += depth
                report.hits.append((q, item))
        return True

    def _hops(self, a: NodeId, b: NodeId, claimed: Dict[NodeId, int]) -> int:
        """Hop count between two claimed nodes, travelling over claimed alive nodes"""
        if a == b:
            return 0
        t = self.topology
        if t.has_edge(a, b):
            return 1
        depth = {a: 0}
        queue = deque([a])
        while queue:
            node = queue.popleft()
            for other in t.neighbors(node):
                if other in depth or other not in claimed or not t.is_alive(other):
                    continue
                if other == b:
                    return depth[node] + 1
                depth[other] = depth[node] + 1
                queue.append(other)
        raise RingBrokenError(b, claimed.get(b, 0))

    def _chains(self, ring: List[NodeId], position: Optional[NodeId], previous: Set[NodeId]) -> List[List[NodeId]]:
        """
        Order a ring as chains of adjacent nodes. A ring around a flat region
        is a single cycle and yields one chain; a ring split by an eye yields
        one chain per side.
        """
        t = self.topology
        remaining = set(ring)
        chains: List[List[NodeId]] = []
        anchor = position
        while remaining:
            def start_key(n: NodeId) -> Tuple[bool, bool, NodeId]:
                near = anchor is not None and (n == anchor or t.has_edge(anchor, n))
                endpoint = len(t.neighbors(n) & remaining) <= 1
                return (not near, not endpoint, n)

            current = min(remaining, key=start_key)
            chain = [current]
            remaining.discard(current)
            pointer = anchor
            while True:
                options = sorted(t.neighbors(current) & remaining)
                if not options:
                    break
                if pointer is not None:
                    options.sort(key=lambda n: (not t.has_edge(pointer, n), n))
                current = options[0]
                chain.append(current)
                remaining.discard(current)
                if pointer is None or not t.has_edge(pointer, current):
                    inner = sorted(previous & t.neighbors(current))
                    pointer = inner[0] if inner else pointer
            chains.append(chain)
            anchor = chain[-1]
        return chains

    def detect_and_spawn(self, w: WalkerState, chains: List[List[NodeId]], family: _Family) -> WalkerState:
        """
        Hand every chain beyond the first to a new inward walker placed on the
        node that discovered the chain. The remaining ttl is split in
        proportion to chain lengths.
        """
        remaining = w.remaining_ttl
        total = len(w.ring_cur) + sum(len(chain) for chain in chains)
        for chain in chains:
            start = w.discovered_by[chain[0]]
            if math.isinf(remaining):
                share = math.inf
            else:
                share = math.floor(remaining * len(chain) / total)
                w.ttl -= share
            child = WalkerState(
                source=w.source, mode=WalkMode.INWARD, radius=w.radius, ttl=share,
                ring_prev=list(w.ring_prev), ring_cur=chain, position=start,
                distance=w.distance, discovered_by=w.discovered_by
            )
            spawn_cost = self._hops(w.position, start, w.distance)
            child.messages = min(spawn_cost, share) if not math.isinf(share) else spawn_cost
            if child.messages >= child.ttl:
                child.done = True
            w.spawned.append(child)
            family.walkers.append(child)
            logger.debug(f"Walker of {w.source} spawned across an eye at ring {w.radius} ({len(chain)} nodes)")
        return w

    def return_path(self, w: WalkerState, start: NodeId) -> List[NodeId]:
        """
        Path from a visited node back to the source, following strictly
        decreasing distances; the source is the last element
        """
        t = self.topology
        if start not in w.distance:
            raise InvalidArgumentError(f"Node {start} was not reached by the walk")
        path: List[NodeId] = []
        current = start
        while w.distance[current] > 0:
            below = [
                n for n in sorted(t.neighbors(current))
                if t.is_alive(n) and w.distance.get(n) == w.distance[current] - 1
            ]
            if not below:
                raise ReturnStrandedError(
                    f"No alive neighbor of {current} closer to {w.source} (distance {w.distance[current]})"
                )
            current = below[0]
            path.append(current)
        return path


class BfsDistanceOracle:
    """Hop distances computed by networkx breadth-first search"""

    def __init__(self, topology: Topology):
        self.topology = topology
        self._version = None
        self._graph: Optional[nx.Graph] = None
        self._balls: Dict[Tuple[NodeId, int], Dict[NodeId, int]] = {}

    def _refresh(self):
        if self._version != self.topology.version:
            self._version = self.topology.version
            self._graph = None
            self._balls.clear()

    def ball(self, node: NodeId, radius: int) -> Dict[NodeId, int]:
        self._refresh()
        key = (node, radius)
        if key not in self._balls:
            self._balls[key] = self._compute(node, radius)
        return self._balls[key]

    def _compute(self, node: NodeId, radius: int) -> Dict[NodeId, int]:
        if self._graph is None:
            self._graph = self.topology.to_networkx()
        return dict(nx.single_source_shortest_path_length(self._graph, node, cutoff=radius))


class SpiralDistanceOracle(BfsDistanceOracle):
    """Hop distances measured by spiral walks, as the nodes themselves would"""

    def __init__(self, topology: Topology):
        super().__init__(topology)
        self.walker = SpiralWalkService(topology)

    def _compute(self, node: NodeId, radius: int) -> Dict[NodeId, int]:
        return self.walker.spiral_walk(node, radius).distance

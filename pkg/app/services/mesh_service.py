import logging
import math
from typing import Dict, Iterable, List, Optional, Set, Tuple

import networkx as nx
import numpy as np

from ..models.errors import InvalidArgumentError, RepairExhaustedError, UnknownNodeError
from ..models.schemas import InvariantReport, NeighborView, RepairOutcome
from ..models.topology import Topology
from .topology_builder import icosahedron_faces, topology_from_faces
from config import Config

logger = logging.getLogger(__name__)


class MeshService:
    """
    Maintains the closed triangular mesh: every pair of adjacent nodes
    shares exactly two neighbors.
    """

    def __init__(self, topology: Topology, rng: np.random.Generator,
                 ping_timeout: int = Config.PING_TIMEOUT,
                 flatten_max_passes: int = Config.FLATTEN_MAX_PASSES):
        """
        Initialize the service

        Args:
            topology: Topology to maintain (mutated in place)
            rng: Seeded generator shared with the simulation
            ping_timeout: Ping rounds without answer before a neighbor is declared failed
            flatten_max_passes: Upper bound on flattening passes per call
        """
        self.topology = topology
        self.rng = rng
        self.ping_timeout = ping_timeout
        self.flatten_max_passes = flatten_max_passes
        self.views: Dict[int, NeighborView] = {}

    @staticmethod
    def seed_icosahedron() -> Topology:
        """Seed network: 12 nodes of degree five, 30 edges, 20 faces"""
        return topology_from_faces(icosahedron_faces())

    def common_neighbors(self, a: int, b: int) -> Set[int]:
        if a == b:
            raise InvalidArgumentError(f"Common neighbors need two distinct nodes, got {a} twice")
        for node in (a, b):
            if not self.topology.is_alive(node):
                raise UnknownNodeError(f"Unknown or dead node: {node}")
        return set(self.topology.common_neighbors(a, b))

    # ------------------------------------------------------------------
    # Node connection
    # ------------------------------------------------------------------

    def connect_node(self, entry: int, new: Optional[int] = None, flatten: bool = True) -> int:
        """
        Connect a new node through the contacted node `entry`

        A random neighbor n2 of entry is picked, the link entry-n2 is
        replaced by links from the new node to entry, n2 and their two
        common neighbors.

        Args:
            entry: Alive node contacted by the joining node
            new: Id for the joining node (allocated when omitted)
            flatten: Run the local flattening afterwards

        Returns:
            Id of the new node

        Raises:
            UnknownNodeError: If entry is not alive
            InvalidArgumentError: If new already exists or entry borders a pending hole
        """
        t = self.topology
        if not t.is_alive(entry):
            raise UnknownNodeError(f"Entry node {entry} is not alive")
        if new is not None and new in t:
            raise InvalidArgumentError(f"Node {new} already exists")

        candidates = [n for n in t.alive_neighbors(entry) if self._is_sound_edge(entry, n)]
        if not candidates:
            raise InvalidArgumentError(f"Entry node {entry} borders a pending hole")
        n2 = candidates[int(self.rng.integers(len(candidates)))]
        c1, c2 = sorted(t.common_neighbors(entry, n2))

        if new is None:
            new = t.new_node_id()
        t.remove_edge(entry, n2)
        t.add_node(new)
        for other in (entry, n2, c1, c2):
            t.add_edge(new, other)
        logger.debug(f"Node {new} joined through {entry}: replaced link {entry}-{n2}, linked {c1} and {c2}")

        if flatten:
            self.flatten_around(new)
        return new

    def _is_sound_edge(self, a: int, b: int) -> bool:
        common = self.topology.common_neighbors(a, b)
        return len(common) == 2 and all(self.topology.is_alive(c) for c in common)

    # ------------------------------------------------------------------
    # Flattening
    # ------------------------------------------------------------------

    def flip_preserves_invariant(self, x: int, m: int) -> bool:
        """Whether swapping edge x-m for the edge between their common neighbors keeps the invariant"""
        t = self.topology
        common = t.common_neighbors(x, m)
        if len(common) != 2:
            return False
        c1, c2 = sorted(common)
        if not all(t.is_alive(n) for n in (x, m, c1, c2)):
            return False
        if t.has_edge(c1, c2):
            return False
        return t.common_neighbors(c1, c2) == {x, m}

    def flatten_around(self, node: int) -> int:
        """
        Flatten the 2-hop neighborhood of a node

        For every node x of degree above six, its highest-degree neighbor m
        is selected; when deg(x)+deg(m) exceeds the degrees of their two
        common neighbors, the edge x-m is replaced by the edge between them.

        Returns:
            Number of flips performed
        """
        t = self.topology
        flips = 0
        for _ in range(self.flatten_max_passes):
            if not t.is_alive(node):
                break
            changed = False
            for x in self._two_hop(node):
                if t.is_alive(x) and t.degree(x) > 6 and self.try_flip(x):
                    flips += 1
                    changed = True
            if not changed:
                break
        if flips:
            logger.debug(f"Flattening around {node}: {flips} flips")
        return flips

    def try_flip(self, x: int) -> bool:
        """Flip the edge between x and its highest-degree neighbor when that flattens the mesh"""
        t = self.topology
        neighbors = t.alive_neighbors(x)
        if not neighbors:
            return False
        m = max(neighbors, key=lambda n: (t.degree(n), -n))
        common = t.common_neighbors(x, m)
        if len(common) != 2 or t.degree(m) <= 4:
            return False
        c1, c2 = sorted(common)
        if t.degree(x) + t.degree(m) <= t.degree(c1) + t.degree(c2):
            return False
        if not self.flip_preserves_invariant(x, m):
            return False
        t.remove_edge(x, m)
        t.add_edge(c1, c2)
        return True

    def _two_hop(self, node: int) -> List[int]:
        t = self.topology
        region = {node}
        for n in t.neighbors(node):
            region.add(n)
            region.update(t.neighbors(n))
        return sorted(region)

    # ------------------------------------------------------------------
    # Failure detection and repair
    # ------------------------------------------------------------------

    def ping_round(self, now: int) -> Dict[int, Set[int]]:
        """
        Exchange pings: every alive node refreshes the neighbor sets of its
        neighbors and reports neighbors silent for longer than the timeout

        Args:
            now: Current tick

        Returns:
            Mapping from failed node to the neighbors reporting it
        """
        t = self.topology
        failures: Dict[int, Set[int]] = {}
        for owner in t.alive_nodes():
            view = self.views.setdefault(owner, NeighborView(owner=owner))
            current = t.neighbors(owner)
            view.neighbors = set(current)
            for gone in set(view.last_ping) - current:
                del view.last_ping[gone]
                view.second_hop.pop(gone, None)
            for neighbor in current:
                if t.is_alive(neighbor):
                    view.last_ping[neighbor] = now
                    view.second_hop[neighbor] = set(t.neighbors(neighbor))
                else:
                    last = view.last_ping.setdefault(neighbor, now)
                    if now - last > self.ping_timeout:
                        failures.setdefault(neighbor, set()).add(owner)
        for owner in [o for o in self.views if not t.is_alive(o)]:
            del self.views[owner]
        if failures:
            logger.info(f"Ping round {now}: failures detected {sorted(failures)}")
        return failures

    def repair_failure(self, failed: int) -> RepairOutcome:
        """
        Close the hole left by a failed node

        The lowest-id former neighbor triangulates the hole. When the failed
        node had a neighbor of degree four, or no valid triangulation exists,
        a replacement node found by a random walker is moved into the hole.

        Args:
            failed: Node already marked dead

        Returns:
            RepairOutcome describing the repair

        Raises:
            UnknownNodeError: If failed is not part of the topology
            InvalidArgumentError: If failed is still alive
            RepairExhaustedError: If no replacement was found within the walker TTL
        """
        t = self.topology
        if failed not in t:
            raise UnknownNodeError(f"Unknown node: {failed}")
        if t.is_alive(failed):
            raise InvalidArgumentError(f"Node {failed} must be marked dead before repair")

        former = set(t.neighbors(failed))
        degrees_before = {n: t.degree(n) for n in former}
        cycle = self._hole_cycle(former)
        t.remove_node(failed)
        alive_former = [n for n in former if t.is_alive(n)]
        outcome = RepairOutcome(
            failed=failed, strategy="triangulate", hole=cycle or sorted(former),
            agent=min(alive_former) if alive_former else None
        )
        if cycle is None:
            t.open_holes.append(sorted(former))
            raise RepairExhaustedError(failed, f"Neighbors of {failed} do not form a cycle")

        if min(degrees_before.values()) > 4:
            chords = self._triangulate(cycle)
            if chords is not None:
                outcome.chords = chords
                for node in cycle:
                    if t.is_alive(node):
                        self.flatten_around(node)
                logger.info(f"Repaired hole of {failed} ({len(cycle)} nodes) with {len(chords)} chords")
                return outcome
            logger.info(f"No valid triangulation for the hole of {failed}, relocating a node")
        else:
            logger.info(f"Hole of {failed} has a degree-4 neighbor, relocating a node")

        outcome.strategy = "relocate"
        outcome.replacement, nested = self._relocate(failed, cycle)
        outcome.nested.append(nested)
        return outcome

    def _hole_cycle(self, former: Set[int]) -> Optional[List[int]]:
        """Order the neighbors of a removed node along the hole boundary"""
        t = self.topology
        if len(former) < 3:
            return None
        ring = {n: t.neighbors(n) & former for n in former}
        if any(len(adjacent) != 2 for adjacent in ring.values()):
            return None
        start = min(former)
        order = [start]
        previous, current = None, start
        while True:
            a, b = sorted(ring[current])
            following = a if a != previous else b
            if following == start:
                break
            if following in order:
                return None
            order.append(following)
            previous, current = current, following
        return order if len(order) == len(former) else None

    def _triangulate(self, cycle: List[int]) -> Optional[List[Tuple[int, int]]]:
        """
        Ear-style chord insertion, cheapest chord first (combined endpoint
        degree, then lowest id pair). All chords are rolled back when the
        result breaks the invariant.
        """
        t = self.topology
        hole = set(cycle)
        polygon = list(cycle)
        added: List[Tuple[int, int]] = []

        while len(polygon) > 3:
            best = None
            size = len(polygon)
            for i in range(size):
                a, v, b = polygon[i - 1], polygon[i], polygon[(i + 1) % size]
                # v keeps its degree once clipped
                if t.degree(v) < 4 or t.has_edge(a, b):
                    continue
                if not t.common_neighbors(a, b) <= hole:
                    continue
                key = (t.degree(a) + t.degree(b), min(a, b), max(a, b))
                if best is None or key < best[0]:
                    best = (key, i)
            if best is None:
                self._rollback(added)
                return None
            i = best[1]
            a, b = polygon[i - 1], polygon[(i + 1) % size]
            t.add_edge(a, b)
            added.append((min(a, b), max(a, b)))
            polygon.pop(i)

        if not self._hole_is_sound(hole):
            self._rollback(added)
            return None
        return added

    def _hole_is_sound(self, hole: Set[int]) -> bool:
        t = self.topology
        for node in hole:
            if t.degree(node) < 4:
                return False
            for other in t.neighbors(node):
                if len(t.common_neighbors(node, other)) != 2:
                    return False
        return True

    def _rollback(self, chords: Iterable[Tuple[int, int]]):
        for a, b in chords:
            self.topology.remove_edge(a, b)

    def _relocate(self, failed: int, cycle: List[int]) -> Tuple[int, RepairOutcome]:
        """
        Send a TTL-bounded random walker to find a node whose neighbors all
        have degree five or more, detach it (repairing the hole it leaves)
        and splice it into the failed node's former position
        """
        t = self.topology
        ttl = int(4 * 2 * math.sqrt(max(len(t), 1)))
        hole = set(cycle)
        forbidden = set(hole)
        for node in hole:
            forbidden.update(t.neighbors(node))

        current = min(n for n in cycle if t.is_alive(n)) if any(t.is_alive(n) for n in cycle) else None
        tried: Set[int] = set()
        for _ in range(ttl if current is not None else 0):
            neighbors = t.alive_neighbors(current)
            if not neighbors:
                break
            current = neighbors[int(self.rng.integers(len(neighbors)))]
            if current in tried or not self._can_replace(current, forbidden):
                continue
            tried.add(current)
            detached = self._detach(current)
            if detached is None:
                continue
            for node in cycle:
                t.add_edge(current, node)
            self.flatten_around(current)
            logger.info(f"Relocated node {current} into the hole of {failed}")
            return current, detached

        t.open_holes.append(list(cycle))
        logger.error(f"Repair of {failed} exhausted: no replacement within {ttl} walker steps")
        raise RepairExhaustedError(failed, f"No replacement node found for {failed} within TTL {ttl}")

    def _can_replace(self, node: int, forbidden: Set[int]) -> bool:
        t = self.topology
        if node in forbidden or not t.is_alive(node):
            return False
        return all(t.is_alive(n) and n not in forbidden and t.degree(n) >= 5 for n in t.neighbors(node))

    def _detach(self, node: int) -> Optional[RepairOutcome]:
        """Remove a node from its position and triangulate the hole it leaves"""
        t = self.topology
        former = set(t.neighbors(node))
        cycle = self._hole_cycle(former)
        if cycle is None:
            return None
        t.remove_node(node)
        chords = self._triangulate(cycle)
        t.add_node(node)
        if chords is None:
            for other in former:
                t.add_edge(node, other)
            return None
        return RepairOutcome(failed=node, strategy="triangulate", hole=cycle, chords=chords, agent=min(cycle))

    # ------------------------------------------------------------------
    # Invariant checking
    # ------------------------------------------------------------------

    def check_invariant(self, around: Optional[Iterable[int]] = None) -> InvariantReport:
        """
        Check the two-common-neighbors invariant

        Args:
            around: Restrict the edge check to edges incident to these nodes
                (connectivity is then not evaluated)

        Returns:
            InvariantReport with violating edges, components and degree histogram
        """
        t = self.topology
        report = InvariantReport(degree_histogram=t.degree_histogram())
        if around is None:
            edges = [(a, b) for a, b in t.edges() if t.is_alive(a) and t.is_alive(b)]
            report.components = sorted(
                (sorted(component) for component in nx.connected_components(t.to_networkx())),
                key=lambda component: component[0]
            )
        else:
            edges = sorted({
                (min(a, b), max(a, b))
                for a in around if t.is_alive(a)
                for b in t.neighbors(a) if t.is_alive(b)
            })
        report.violating_edges = [(a, b) for a, b in edges if len(t.common_neighbors(a, b)) != 2]
        if len(t) > 12:
            report.low_degree_nodes = [n for n in t.alive_nodes() if t.degree(n) < 4]
        return report

from collections import deque
from typing import Dict, Iterable, List, Optional, Set, Tuple
import networkx as nx

from .errors import UnknownNodeError


class Topology:
    """
    God-view adjacency of the overlay.

    Failed nodes keep their edges (flagged dead) until the repair agent
    removes them, so neighbors can still enumerate the hole around them.
    Node ids come from a monotonic counter and are never reused.
    """

    def __init__(self):
        self._adjacency: Dict[int, Set[int]] = {}
        self._dead: Set[int] = set()
        self._next_id = 0
        self.version = 0
        self.touched: Set[int] = set()
        self.open_holes: List[List[int]] = []

    @classmethod
    def from_edges(cls, edges: Iterable[Tuple[int, int]], nodes: Optional[Iterable[int]] = None) -> "Topology":
        topology = cls()
        for node in nodes or []:
            topology.add_node(int(node))
        for a, b in edges:
            a, b = int(a), int(b)
            if a not in topology:
                topology.add_node(a)
            if b not in topology:
                topology.add_node(b)
            topology.add_edge(a, b)
        topology.touched.clear()
        return topology

    def __contains__(self, node: int) -> bool:
        return node in self._adjacency

    def __len__(self) -> int:
        return len(self._adjacency) - len(self._dead)

    def new_node_id(self) -> int:
        node = self._next_id
        self._next_id += 1
        return node

    def add_node(self, node: int):
        if node in self._adjacency:
            raise ValueError(f"Node {node} already exists")
        self._adjacency[node] = set()
        self._next_id = max(self._next_id, node + 1)
        self._changed(node)

    def remove_node(self, node: int) -> Set[int]:
        """Drop a node and its edges, returning its former neighbors"""
        neighbors = self._adjacency.pop(self._require(node))
        for other in neighbors:
            self._adjacency[other].discard(node)
            self.touched.add(other)
        self._dead.discard(node)
        self._changed(node)
        return neighbors

    def add_edge(self, a: int, b: int):
        if a == b:
            raise ValueError("Self loops are not allowed")
        self._adjacency[self._require(a)].add(b)
        self._adjacency[self._require(b)].add(a)
        self._changed(a, b)

    def remove_edge(self, a: int, b: int):
        self._adjacency[self._require(a)].discard(b)
        self._adjacency[self._require(b)].discard(a)
        self._changed(a, b)

    def has_edge(self, a: int, b: int) -> bool:
        return b in self._adjacency.get(a, ())

    def neighbors(self, node: int) -> Set[int]:
        """Neighbor set of a node (read-only view, do not mutate)"""
        return self._adjacency[self._require(node)]

    def alive_neighbors(self, node: int) -> List[int]:
        return sorted(n for n in self.neighbors(node) if n not in self._dead)

    def degree(self, node: int) -> int:
        return len(self.neighbors(node))

    def common_neighbors(self, a: int, b: int) -> Set[int]:
        return self.neighbors(a) & self.neighbors(b)

    def is_alive(self, node: int) -> bool:
        return node in self._adjacency and node not in self._dead

    def mark_dead(self, node: int):
        self._require(node)
        self._dead.add(node)
        self._changed(node)

    def dead_nodes(self) -> List[int]:
        return sorted(self._dead)

    def nodes(self) -> List[int]:
        """All nodes still present, dead ones included"""
        return sorted(self._adjacency)

    def alive_nodes(self) -> List[int]:
        return sorted(n for n in self._adjacency if n not in self._dead)

    def edges(self) -> List[Tuple[int, int]]:
        return sorted(
            (a, b) for a, neighbors in self._adjacency.items() for b in neighbors if a < b
        )

    def edge_count(self) -> int:
        return sum(len(neighbors) for neighbors in self._adjacency.values()) // 2

    def mean_degree(self) -> float:
        if not self._adjacency:
            return 0.0
        return 2 * self.edge_count() / len(self._adjacency)

    def degree_histogram(self) -> Dict[int, int]:
        histogram: Dict[int, int] = {}
        for node in self.alive_nodes():
            degree = self.degree(node)
            histogram[degree] = histogram.get(degree, 0) + 1
        return dict(sorted(histogram.items()))

    def bfs_distances(self, source: int, max_radius: Optional[int] = None) -> Dict[int, int]:
        """Hop distances from source over alive nodes, up to max_radius"""
        distances = {source: 0}
        queue = deque([source])
        while queue:
            node = queue.popleft()
            depth = distances[node]
            if max_radius is not None and depth >= max_radius:
                continue
            for other in self._adjacency[node]:
                if other not in distances and other not in self._dead:
                    distances[other] = depth + 1
                    queue.append(other)
        return distances

    def to_networkx(self) -> nx.Graph:
        """Graph over alive nodes, for oracle computations"""
        graph = nx.Graph()
        alive = self.alive_nodes()
        graph.add_nodes_from(alive)
        graph.add_edges_from((a, b) for a, b in self.edges() if self.is_alive(a) and self.is_alive(b))
        return graph

    def copy(self) -> "Topology":
        clone = Topology()
        clone._adjacency = {node: set(neighbors) for node, neighbors in self._adjacency.items()}
        clone._dead = set(self._dead)
        clone._next_id = self._next_id
        clone.version = self.version
        clone.open_holes = [list(hole) for hole in self.open_holes]
        return clone

    def _require(self, node: int) -> int:
        if node not in self._adjacency:
            raise UnknownNodeError(f"Unknown node: {node}")
        return node

    def _changed(self, *nodes: int):
        self.version += 1
        self.touched.update(nodes)

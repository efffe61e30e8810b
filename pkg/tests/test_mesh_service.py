import pytest
import numpy as np
from app.models.errors import InvalidArgumentError, RepairExhaustedError, UnknownNodeError
from app.models.topology import Topology
from app.services.mesh_service import MeshService
from app.services.topology_builder import build_geode


def octahedron() -> Topology:
    # poles 0 and 5, equator 1-2-3-4
    edges = [(0, n) for n in range(1, 5)] + [(5, n) for n in range(1, 5)]
    edges += [(1, 2), (2, 3), (3, 4), (4, 1)]
    return Topology.from_edges(edges)


def split_edge(topology: Topology, a: int, b: int) -> int:
    """Replace edge a-b by a new node linked to a, b and both opposite nodes"""
    o1, o2 = sorted(topology.common_neighbors(a, b))
    new = topology.new_node_id()
    topology.add_node(new)
    topology.remove_edge(a, b)
    for other in (a, b, o1, o2):
        topology.add_edge(new, other)
    return new


def raise_degree(topology: Topology, v: int, avoid: set):
    # split an edge facing v whose endpoints and far opposite stay clear of avoid
    ring = sorted(topology.neighbors(v))
    for a in ring:
        for b in ring:
            if a < b and topology.has_edge(a, b) and not {a, b} & avoid:
                (other,) = set(topology.common_neighbors(a, b)) - {v}
                if other not in avoid:
                    split_edge(topology, a, b)
                    return
    raise AssertionError(f"no edge to split around {v}")


class TestMeshService:
    def setup_method(self):
        self.rng = np.random.default_rng(7)
        self.topology = MeshService.seed_icosahedron()
        self.service = MeshService(self.topology, self.rng)

    def test_seed_icosahedron(self):
        assert len(self.topology) == 12
        assert self.topology.edge_count() == 30
        assert all(self.topology.degree(n) == 5 for n in self.topology.nodes())
        report = self.service.check_invariant()
        assert report.is_valid
        assert report.violating_edges == []

    def test_common_neighbors(self):
        assert len(self.service.common_neighbors(0, 1)) == 2
        service = MeshService(octahedron(), self.rng)
        assert service.common_neighbors(0, 5) == {1, 2, 3, 4}

    def test_common_neighbors_errors(self):
        with pytest.raises(InvalidArgumentError):
            self.service.common_neighbors(3, 3)
        self.topology.mark_dead(4)
        with pytest.raises(UnknownNodeError):
            self.service.common_neighbors(4, 0)
        with pytest.raises(UnknownNodeError):
            self.service.common_neighbors(0, 99)

    def test_connect_node(self):
        entry = 0
        former = set(self.topology.neighbors(entry))
        new = self.service.connect_node(entry, flatten=False)

        assert new == 12
        assert len(self.topology) == 13
        assert self.topology.edge_count() == 33
        assert self.topology.degree(new) == 4
        assert self.topology.degree(entry) == 5
        (n2,) = former - self.topology.neighbors(entry)
        assert not self.topology.has_edge(entry, n2)
        assert self.topology.neighbors(new) >= {entry, n2}
        for c in self.topology.neighbors(new) - {entry, n2}:
            assert self.topology.degree(c) == 6
        assert self.service.check_invariant().is_valid

    def test_connect_node_dead_entry(self):
        self.topology.mark_dead(0)
        with pytest.raises(UnknownNodeError):
            self.service.connect_node(0)

    def test_many_joins_keep_invariant(self):
        for _ in range(1000):
            alive = self.topology.alive_nodes()
            self.service.connect_node(alive[int(self.rng.integers(len(alive)))])
        assert len(self.topology) == 1012
        assert self.topology.edge_count() == 30 + 3 * 1000
        report = self.service.check_invariant()
        assert report.is_valid
        assert report.low_degree_nodes == []
        assert abs(self.topology.mean_degree() - 6) < 0.1

    def test_flip_guard(self):
        # icosahedron edge: the opposite pair shares exactly the flipped edge's endpoints
        assert self.service.flip_preserves_invariant(0, 1)
        # octahedron equator edge: poles share four neighbors
        assert not MeshService(octahedron(), self.rng).flip_preserves_invariant(1, 2)

    def test_flatten_flat_region(self):
        topology = build_geode(2)
        service = MeshService(topology, self.rng)
        edges = topology.edges()
        assert service.flatten_around(100) == 0
        assert topology.edges() == edges

    def test_flatten_preserves_counts(self):
        for _ in range(50):
            self.service.connect_node(0, flatten=False)
        nodes, edges = len(self.topology), self.topology.edge_count()
        flips = self.service.flatten_around(0)
        assert flips > 0
        assert len(self.topology) == nodes
        assert self.topology.edge_count() == edges
        assert self.service.check_invariant().is_valid

    def test_flip_flattens_degrees(self):
        x = 0
        m = min(self.topology.neighbors(x))
        c1, c2 = sorted(self.topology.common_neighbors(x, m))
        for _ in range(3):
            raise_degree(self.topology, x, {m, c1, c2})
        for _ in range(2):
            raise_degree(self.topology, m, {x, c1, c2})
        nodes = (x, m, c1, c2)
        assert [self.topology.degree(n) for n in nodes] == [8, 7, 5, 5]

        assert self.service.try_flip(x)

        assert [self.topology.degree(n) for n in nodes] == [7, 6, 6, 6]
        assert not self.topology.has_edge(x, m)
        assert self.topology.has_edge(c1, c2)
        assert self.service.check_invariant().is_valid

    def test_ping_round_refreshes_views(self):
        self.service.ping_round(0)
        view = self.service.views[0]
        assert view.neighbors == self.topology.neighbors(0)
        for neighbor in view.neighbors:
            assert view.second_hop[neighbor] == self.topology.neighbors(neighbor)

    def test_failure_reported_after_timeout(self):
        for tick in range(3):
            assert self.service.ping_round(tick) == {}
        self.topology.mark_dead(5)
        for tick in range(3, 6):
            assert self.service.ping_round(tick) == {}
        failures = self.service.ping_round(6)
        assert failures == {5: {0, 1, 4, 6, 10}}

    def test_adjacent_failures_repaired_in_order(self):
        topology = build_geode(2)
        service = MeshService(topology, self.rng)
        a = 0
        b = min(topology.neighbors(a))
        for tick in range(3):
            service.ping_round(tick)
        topology.mark_dead(a)
        topology.mark_dead(b)
        for tick in range(3, 6):
            assert service.ping_round(tick) == {}

        failures = service.ping_round(6)

        assert set(failures) == {a, b}
        for failed in sorted(failures):
            service.repair_failure(failed)
        assert len(topology) == 160
        assert service.check_invariant().is_valid

    def test_repair_icosahedron_node(self):
        self.topology.mark_dead(0)
        outcome = self.service.repair_failure(0)

        assert outcome.strategy == "triangulate"
        assert outcome.agent == 1
        assert outcome.chords == [(1, 3), (1, 4)]
        assert len(self.topology) == 11
        assert self.topology.edge_count() == 27
        assert self.service.check_invariant().is_valid

    def test_repair_requires_dead_node(self):
        with pytest.raises(InvalidArgumentError):
            self.service.repair_failure(0)
        with pytest.raises(UnknownNodeError):
            self.service.repair_failure(99)

    def test_degree_four_neighbor_relocates(self):
        topology = build_geode(2)
        service = MeshService(topology, self.rng)
        entry = 100
        new = service.connect_node(entry, flatten=False)
        assert topology.degree(new) == 4

        topology.mark_dead(entry)
        outcome = service.repair_failure(entry)

        assert outcome.strategy == "relocate"
        assert outcome.chords == []
        assert outcome.replacement is not None
        assert len(topology) == 162
        assert topology.edge_count() == 480
        assert service.check_invariant().is_valid

    def test_random_failures_on_geode(self):
        topology = build_geode(3)
        service = MeshService(topology, self.rng)
        for _ in range(40):
            alive = topology.alive_nodes()
            node = alive[int(self.rng.integers(len(alive)))]
            topology.mark_dead(node)
            try:
                service.repair_failure(node)
            except RepairExhaustedError:
                pytest.fail(f"repair of {node} exhausted")
            assert service.check_invariant(around=topology.touched).is_valid
            topology.touched.clear()
        assert service.check_invariant().is_valid

    def test_check_invariant_detects_extra_chord(self):
        self.topology.add_edge(0, 11)
        report = self.service.check_invariant()
        assert not report.is_valid
        assert report.violating_edges

    def test_check_invariant_empty(self):
        report = MeshService(Topology(), self.rng).check_invariant()
        assert report.violating_edges == []
        assert report.components == []
        assert report.is_valid

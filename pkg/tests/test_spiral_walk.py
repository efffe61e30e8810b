import pytest
import numpy as np
from collections import Counter
from app.models.errors import InvalidArgumentError, ReturnStrandedError, UnknownNodeError
from app.models.schemas import WalkerState
from app.services.mesh_service import MeshService
from app.services.spiral_walk import BfsDistanceOracle, SpiralDistanceOracle, SpiralWalkService
from app.services.topology_builder import build_capsule, build_geode


def ring_sizes(distance):
    counts = Counter(distance.values())
    return [counts[i] for i in range(max(counts) + 1)]


class TestSpiralWalkService:
    def setup_method(self):
        self.icosahedron = MeshService.seed_icosahedron()
        self.service = SpiralWalkService(self.icosahedron)

    def test_icosahedron_two_rings(self):
        report = self.service.spiral_walk(0, 2)
        assert report.complete
        assert len(report.visit_order) == 11
        assert report.visit_order[0] == 0
        assert set(report.visit_order[1:6]) == {1, 2, 3, 4, 5}
        assert set(report.visit_order[6:]) == {6, 7, 8, 9, 10}
        assert 11 not in report.distance

    def test_radius_zero(self):
        report = self.service.spiral_walk(3, 0)
        assert report.visit_order == [3]
        assert report.messages == 0
        assert report.eyes == 0

    def test_invalid_arguments(self):
        with pytest.raises(InvalidArgumentError):
            self.service.spiral_walk(0, -1)
        with pytest.raises(UnknownNodeError):
            self.service.spiral_walk(42, 2)

    def test_exhaustive_against_bfs(self):
        topology = build_geode(3)
        service = SpiralWalkService(topology)
        oracle = BfsDistanceOracle(topology)
        rng = np.random.default_rng(3)
        nodes = topology.alive_nodes()
        for _ in range(20):
            source = nodes[int(rng.integers(len(nodes)))]
            radius = int(rng.integers(1, 7))
            report = service.spiral_walk(source, radius)

            assert report.complete
            assert report.distance == oracle.ball(source, radius)
            assert len(report.visit_order) == len(set(report.visit_order))
            assert report.messages <= 3 * len(report.visit_order)
            depths = [report.distance[n] for n in report.visit_order]
            assert depths == sorted(depths)

    def test_pentagonal_rings(self):
        topology = build_geode(4)
        report = SpiralWalkService(topology).spiral_walk(0, 7)
        assert ring_sizes(report.distance) == [1] + [5 * i for i in range(1, 8)]
        assert report.eyes == 0

    def test_hexagonal_rings(self):
        topology = build_geode(4)
        from_pentagons = [topology.bfs_distances(p) for p in range(12)]
        source = max(topology.nodes(), key=lambda n: (min(d[n] for d in from_pentagons), -n))
        assert min(d[source] for d in from_pentagons) >= 8

        report = SpiralWalkService(topology).spiral_walk(source, 7)
        assert ring_sizes(report.distance) == [1] + [6 * i for i in range(1, 8)]
        assert report.eyes == 0
        # an unsplit ring is visited as one chain of adjacent nodes
        for i in range(1, 8):
            ring = [n for n in report.visit_order if report.distance[n] == i]
            assert all(topology.has_edge(a, b) for a, b in zip(ring, ring[1:]))

    def test_capsule_spawns_walkers(self):
        topology = build_capsule(6, 12)
        source = 1 + 6 * 6
        report = SpiralWalkService(topology).spiral_walk(source, 20)

        assert report.complete
        assert report.eyes >= 1
        assert report.visited == set(topology.nodes())
        assert report.distance == topology.bfs_distances(source)
        assert len(report.visit_order) == len(topology)

    def test_return_path(self):
        topology = build_geode(3)
        service = SpiralWalkService(topology)
        report = service.spiral_walk(0, 5)
        walker = WalkerState(source=0, distance=report.distance)
        for node in [n for n, d in report.distance.items() if d == 5][:10]:
            path = service.return_path(walker, node)
            assert len(path) == 5
            assert path[-1] == 0
            assert [report.distance[n] for n in path] == [4, 3, 2, 1, 0]
        assert service.return_path(walker, 0) == []

    def test_return_path_errors(self):
        walker = WalkerState(source=0, distance={0: 0, 11: 2})
        with pytest.raises(ReturnStrandedError):
            self.service.return_path(walker, 11)
        with pytest.raises(InvalidArgumentError):
            self.service.return_path(walker, 7)

    def test_ttl_stops_walk(self):
        topology = build_geode(2)
        report = SpiralWalkService(topology).spiral_walk(0, 4, ttl=5)
        assert not report.complete
        assert report.stop_reason == "ttl"
        assert report.messages <= 5
        assert len(report.visit_order) == 6

    def test_departed_neighbor_breaks_ring(self):
        self.icosahedron.mark_dead(3)
        report = self.service.spiral_walk(0, 2)
        assert not report.complete
        assert report.stop_reason == "ring-broken"

    def test_hits_stream_back(self):
        topology = build_geode(2)
        holders = {0: "a", 40: "b"}
        report = SpiralWalkService(topology).spiral_walk(
            0, 3, predicate=lambda n: [holders[n]] if n in holders else []
        )
        expected = [(n, item) for n, item in holders.items() if n in report.distance]
        assert sorted(report.hits) == sorted(expected)
        assert report.return_messages == sum(report.distance[n] for n, _ in expected)

    def test_trace_rows(self):
        report = self.service.spiral_walk(0, 1)
        assert [row[0] for row in report.trace] == list(range(6))
        assert [row[2] for row in report.trace] == [0, 1, 1, 1, 1, 1]
        assert report.trace[-1][3] == report.messages


class TestDistanceOracles:
    def setup_method(self):
        self.topology = build_geode(2)

    def test_spiral_matches_bfs(self):
        bfs = BfsDistanceOracle(self.topology)
        spiral = SpiralDistanceOracle(self.topology)
        for node in (0, 15, 77, 161):
            assert spiral.ball(node, 3) == bfs.ball(node, 3)

    def test_cache_follows_topology_version(self):
        oracle = BfsDistanceOracle(self.topology)
        neighbor = min(self.topology.neighbors(0))
        assert oracle.ball(0, 1)[neighbor] == 1
        self.topology.remove_edge(0, neighbor)
        assert oracle.ball(0, 1).get(neighbor) is None

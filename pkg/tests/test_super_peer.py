import math
import pytest
import numpy as np
from app.models.errors import InvalidArgumentError, PromotionImpossibleError
from app.models.schemas import Query, SubPeer, SuperPeer, parse_capabilities
from app.models.topology import Topology
from app.services.mesh_service import MeshService
from app.services.replication import ReplicaRegistry
from app.services.spiral_walk import SpiralWalkService
from app.services.super_peer import SuperPeerService
from app.services.topology_builder import build_geode
from config import Config


class TestSuperPeerService:
    def setup_method(self):
        self.topology = build_geode(2)
        self.registry = ReplicaRegistry()
        self.rng = np.random.default_rng(5)
        self.capabilities = {}

    def make_service(self, topology=None, **kwargs) -> SuperPeerService:
        return SuperPeerService(
            topology or self.topology, self.registry, self.rng, self.capabilities, **kwargs
        )

    def serve(self, service: SuperPeerService, super_id: int, subs):
        service.make_super(super_id)
        for sub in subs:
            service.assign(sub, super_id)

    def test_roles(self):
        service = self.make_service()
        self.serve(service, 0, [1, 2])
        assert isinstance(service.role(0), SuperPeer)
        assert service.role(1) == SubPeer(super_peer=0)
        assert service.supers[0].sub_peers == {0, 1, 2}

    def test_quota_from_capability(self):
        self.capabilities.update({1: 1, 2: 10, 3: 100, 4: 1000})
        service = self.make_service()
        assert [service.quota(n) for n in (1, 2, 3, 4)] == [0, 1, 10, 100]

    def test_bootstrap_covers_every_node(self):
        self.capabilities.update({n: 1000 if n % 40 == 0 else 10 for n in self.topology.nodes()})
        service = self.make_service()
        service.bootstrap()
        assert service.role_violations() == []
        assert len(service.supers) >= 2
        assert all(not sp.is_overloaded for sp in service.supers.values())

    def test_admit_joins_neighbor_super(self):
        service = self.make_service()
        self.serve(service, 0, [n for n in self.topology.nodes() if n != 0])
        new = self.topology.new_node_id()
        self.topology.add_node(new)
        self.topology.add_edge(new, 0)
        service.admit(new)
        assert service.super_of[new] == 0

    def test_index_update(self):
        service = self.make_service()
        self.serve(service, 0, [1])
        index = service.index_update(0, 1, {"d1", "d2"})
        assert index == {"d1": {1}, "d2": {1}}
        index = service.index_update(0, 1, {"d2"})
        assert index == {"d2": {1}}

    def test_index_round_matches_stores(self):
        service = self.make_service()
        self.serve(service, 0, [1, 2, 3])
        self.registry.add(1, "a")
        self.registry.add(3, "a")
        self.registry.add(3, "b")
        service.index_round()
        assert service.supers[0].index == {"a": {1, 3}, "b": {3}}

    def test_promotion(self):
        walk = SpiralWalkService(self.topology).spiral_walk(0, 2)
        subs = walk.visit_order[:11]
        candidate = subs[5]
        self.capabilities.update({0: 100, candidate: 100})
        service = self.make_service()
        self.serve(service, 0, subs[1:])
        assert service.supers[0].is_overloaded

        promoted = service.promote(0)

        assert promoted.node == candidate
        assert set(service.supers) == {0, candidate}
        assert len(service.supers[candidate].sub_peers) <= 10
        assert len(service.supers[0].sub_peers) <= 10
        assert candidate in service.supers[0].super_neighbors
        radius = math.ceil(math.sqrt(9 / 3)) + 1
        distances = self.topology.bfs_distances(candidate)
        assert all(distances[n] <= radius for n in service.supers[candidate].sub_peers)

    def test_promotion_impossible(self):
        self.capabilities[0] = 20
        service = self.make_service()
        self.serve(service, 0, [1, 2])
        with pytest.raises(PromotionImpossibleError):
            service.promote(0)

    def test_query_answered_locally(self):
        service = self.make_service()
        self.serve(service, 0, [1, 2])
        self.registry.add(2, "d")
        service.index_round()
        result = service.route_query(Query(target="d", ttl=5, origin=1))
        assert result.answered
        assert result.hosts == [2]
        assert result.super_hops == 0

    def test_query_forwarded_over_super_layer(self):
        service = self.make_service()
        self.serve(service, 0, [1, 2])
        self.serve(service, 50, [51])
        service.link(0, 50)
        self.registry.add(2, "d")
        service.index_round()

        assert not service.route_query(Query(target="d", ttl=0, origin=51)).answered
        result = service.route_query(Query(target="d", ttl=1, origin=51))
        assert result.answered
        assert result.super_hops == 1

    def test_query_ignores_stale_index(self):
        service = self.make_service()
        self.serve(service, 0, [1, 2])
        self.registry.add(2, "d")
        service.index_round()
        self.registry.remove(2, "d")
        assert not service.route_query(Query(target="d", ttl=3, origin=1)).answered

    def test_super_failure_rehomes_orphans(self):
        self.capabilities.update({0: 1000, 11: 1000})
        service = self.make_service()
        near = set(self.topology.bfs_distances(0, max_radius=3))
        self.serve(service, 0, sorted(near - {0}))
        self.serve(service, 11, sorted(set(self.topology.nodes()) - near - {11}))
        service.link(0, 11)

        self.topology.mark_dead(0)
        iterations = service.node_failed(0)

        assert 0 not in service.supers
        assert 1 <= iterations <= 4
        assert service.role_violations() == []
        assert len(service.supers[11].sub_peers) == len(self.topology)

    def test_last_super_failure_promotes_leader(self):
        self.capabilities.update({0: 1000, 7: 500})
        service = self.make_service()
        self.serve(service, 0, [n for n in self.topology.nodes() if n != 0])
        self.topology.mark_dead(0)
        service.node_failed(0)
        assert list(service.supers) == [7]
        assert service.role_violations() == []

    def test_handle_super_failure_requires_super(self):
        service = self.make_service()
        self.serve(service, 0, [1])
        with pytest.raises(InvalidArgumentError):
            service.handle_super_failure(1)

    def test_sub_failure_leaves_index(self):
        service = self.make_service()
        self.serve(service, 0, [1, 2])
        self.registry.add(2, "d")
        service.index_round()
        self.topology.mark_dead(2)
        assert service.node_failed(2) == 0
        assert 2 not in service.supers[0].sub_peers
        assert service.supers[0].index == {}

    def test_top_down_merge(self):
        self.capabilities.update({0: 100, 50: 100})
        service = self.make_service()
        self.serve(service, 0, [1, 2])
        self.serve(service, 50, [51, 52, 53])
        service.link(0, 50)

        assert service.regulate_top_down(0)
        assert 50 not in service.supers
        assert service.super_of[50] == 0
        assert len(service.supers[0].sub_peers) == 7

    def test_top_down_keeps_loaded_super(self):
        self.capabilities.update({0: 5, 50: 5})
        service = self.make_service()
        self.serve(service, 0, [1, 2])
        self.serve(service, 50, [51, 52, 53])
        service.link(0, 50)
        assert not service.regulate_top_down(0)
        assert 50 in service.supers

    def test_bottom_up_rebalance(self):
        n, m = 1, 2
        others = list(range(101, 109))
        topology = Topology.from_edges([(n, m)], nodes=[100, 200] + others)
        self.capabilities.update({node: 10 for node in topology.nodes()})
        service = self.make_service(topology)
        self.serve(service, 100, [n] + others)
        self.serve(service, 200, [m])

        assert service.rebalance_bottom_up(n)
        assert service.super_of[n] == 200

    def test_bottom_up_equal_loads(self):
        n = 1
        topology = Topology.from_edges([(n, 200)], nodes=[100, 101])
        self.capabilities.update({node: 10 for node in topology.nodes()})
        service = self.make_service(topology)
        self.serve(service, 100, [n, 101])
        service.make_super(200)

        assert not service.rebalance_bottom_up(n)
        assert service.super_of[n] == 100

    def test_regulation_tick_keeps_roles(self):
        self.capabilities.update({n: 1000 if n % 30 == 0 else 10 for n in self.topology.nodes()})
        service = self.make_service()
        service.bootstrap()
        counts = service.regulation_tick()
        assert set(counts) == {"merges", "moves", "promotions"}
        assert service.role_violations() == []

    def test_top_down_merge_respects_quota(self):
        self.capabilities.update({0: 100, 50: 100})
        service = self.make_service()
        self.serve(service, 0, [1, 2, 3, 4, 5])
        self.serve(service, 50, [51, 52, 53, 54])
        service.link(0, 50)
        assert not service.regulate_top_down(0)
        assert service.quota_violations() == []

    def test_bottom_up_reaches_fixpoint(self):
        topology = MeshService.seed_icosahedron()
        distances = topology.bfs_distances(0)
        ranked = sorted(topology.nodes(), key=lambda n: (distances[n], n))
        far = ranked[-1]
        self.capabilities.update({0: 100, far: 100})
        service = self.make_service(topology)
        self.serve(service, 0, ranked[1:9])
        self.serve(service, far, ranked[9:11])

        spread = service.load_spread()
        for _ in range(100):
            for n in ranked:
                service.rebalance_bottom_up(n)
                assert service.load_spread() <= spread + 1e-12
                spread = service.load_spread()

        sizes = [len(service.supers[s].sub_peers) for s in (0, far)]
        assert sum(sizes) == 12
        assert abs(sizes[0] - sizes[1]) <= 2

    def test_regulation_keeps_quota_and_super_fraction(self):
        topology = build_geode(4)
        nodes = list(topology.nodes())
        self.rng.shuffle(nodes)
        distribution = parse_capabilities(Config.CAPABILITY_DISTRIBUTION)
        start = 0
        for value, share in sorted(distribution.items(), reverse=True):
            count = round(share * len(nodes))
            self.capabilities.update({n: value for n in nodes[start:start + count]})
            start += count
        self.capabilities.update({n: 1 for n in nodes[start:]})
        service = self.make_service(topology)

        service.bootstrap()
        assert service.quota_violations() == []
        for _ in range(10):
            service.regulation_tick()
            assert service.quota_violations() == []
            assert service.role_violations() == []

        fraction = len(service.supers) / len(topology)
        assert 0.009 <= fraction <= 0.015

    def test_acquisition_links_low_degree_supers_only(self):
        service = self.make_service()
        for node in range(9):
            service.make_super(node)
        for a in range(1, 6):
            for b in range(a + 1, 6):
                service.link(a, b)
        service.link(0, 1)

        service._acquire_super_neighbors(0, 7)

        assert 7 in service.supers[0].super_neighbors
        assert service.supers[0].super_neighbors.isdisjoint({2, 3, 4, 5})

    def test_orphan_query_walks_the_mesh(self):
        origin = 100
        service = self.make_service()
        self.serve(service, 0, [n for n in self.topology.nodes() if n not in (0, origin)])
        self.registry.add(5, "d")
        service.index_round()
        assert service.role(origin) == SubPeer(super_peer=None)

        result = service.route_query(Query(target="d", ttl=0, origin=origin))

        assert result.answered
        assert result.hosts == [5]
        assert result.mesh_hops == 1

    def test_query_success_meets_random_walk_bound(self):
        supers = [0, 30, 60, 90, 120]
        service = self.make_service()
        for s in supers:
            service.make_super(s)
        for i, a in enumerate(supers):
            for b in supers[i + 1:]:
                service.link(a, b)
        self.registry.add(120, "d")
        service.index_round()

        ttl, trials = 5, 400
        answered = sum(
            service.route_query(Query(target="d", ttl=ttl, origin=supers[i % 4])).answered
            for i in range(trials)
        )
        bound = 1 - (1 - 1 / len(supers)) ** ttl
        assert answered / trials >= bound - 0.05

    def test_unknown_load_unit(self):
        with pytest.raises(InvalidArgumentError):
            self.make_service(load_unit="bytes")

    def test_snapshot(self):
        self.capabilities[0] = 100
        service = self.make_service()
        self.serve(service, 0, [1, 2])
        assert service.snapshot() == [{"superId": 0, "capability": 100, "numSubs": 3, "superDegree": 0}]

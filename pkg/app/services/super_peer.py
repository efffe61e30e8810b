from collections import deque
from typing import Dict, Iterable, List, Optional, Sequence, Set, Tuple
import logging
import math

import numpy as np

from ..models.errors import InvalidArgumentError, PromotionImpossibleError, UnknownNodeError
from ..models.schemas import DataId, NodeId, PeerRole, Query, QueryResult, SubPeer, SuperPeer
from ..models.topology import Topology
from .replication import ReplicaRegistry
from .spiral_walk import SpiralWalkService
from config import Config

logger = logging.getLogger(__name__)


class SuperPeerService:
    """
    Super-peer layer above the mesh: sub-peer indexes, query routing over
    super-peer links, promotion, failure recovery and load regulation
    """

    def __init__(self, topology: Topology, registry: ReplicaRegistry, rng: np.random.Generator,
                 capabilities: Optional[Dict[NodeId, int]] = None, load_unit: str = "capability",
                 degree_target: int = Config.SUPER_DEGREE_TARGET,
                 super_walk_ttl: int = Config.SUPER_WALK_TTL,
                 mesh_walk_ttl: int = Config.MESH_WALK_TTL):
        """
        Initialize the service

        Args:
            topology: Mesh the layer sits on
            registry: Replica stores the indexes are built from
            rng: Seeded generator shared with the simulation
            capabilities: Capability of every node (defaults to 1)
            load_unit: Denominator of the top-down merge test, "capability" or "quota"
            degree_target: Super-layer degree below which a super-peer looks for more links
            super_walk_ttl: Steps of the random walk acquiring super-neighbors
            mesh_walk_ttl: Steps an orphan query may wander the mesh before giving up
        """
        if load_unit not in ("capability", "quota"):
            raise InvalidArgumentError(f"Unknown load unit: {load_unit}")
        self.topology = topology
        self.registry = registry
        self.rng = rng
        self.capabilities: Dict[NodeId, int] = capabilities if capabilities is not None else {}
        self.load_unit = load_unit
        self.degree_target = degree_target
        self.super_walk_ttl = super_walk_ttl
        self.mesh_walk_ttl = mesh_walk_ttl
        self.walker = SpiralWalkService(topology)
        self.supers: Dict[NodeId, SuperPeer] = {}
        self.super_of: Dict[NodeId, Optional[NodeId]] = {}
        self._next_query = 0

    # ------------------------------------------------------------------
    # Roles
    # ------------------------------------------------------------------

    def capability(self, node: NodeId) -> int:
        return self.capabilities.get(node, 1)

    def quota(self, node: NodeId) -> int:
        return self.capability(node) // Config.QUOTA_DIVISOR

    def role(self, node: NodeId) -> PeerRole:
        if node in self.supers:
            return self.supers[node]
        return SubPeer(super_peer=self.super_of.get(node))

    def _live_super(self, node: NodeId) -> Optional[NodeId]:
        sup = self.super_of.get(node)
        if sup is not None and sup in self.supers and self.topology.is_alive(sup):
            return sup
        return None

    def _pick(self, candidates: Sequence[NodeId]) -> NodeId:
        return candidates[int(self.rng.integers(len(candidates)))]

    def make_super(self, node: NodeId) -> SuperPeer:
        if not self.topology.is_alive(node):
            raise UnknownNodeError(f"Cannot promote dead node {node}")
        previous = self._live_super(node)
        if previous is not None and previous != node:
            self._detach_sub(previous, node)
        sp = SuperPeer(node=node, capability=self.capability(node), sub_peers={node})
        self.supers[node] = sp
        self.super_of[node] = node
        self.index_update(node, node, self.registry.items_of(node))
        return sp

    def assign(self, node: NodeId, super_id: NodeId):
        """Make node a sub-peer of super_id, leaving its previous super-peer"""
        previous = self.super_of.get(node)
        if previous == super_id:
            return
        if previous is not None and previous in self.supers:
            self._detach_sub(previous, node)
        self.supers[super_id].sub_peers.add(node)
        self.super_of[node] = super_id
        self.index_update(super_id, node, self.registry.items_of(node))

    def _detach_sub(self, super_id: NodeId, node: NodeId):
        sp = self.supers[super_id]
        sp.sub_peers.discard(node)
        self.index_update(super_id, node, set())
        sp.sub_items.pop(node, None)

    def link(self, a: NodeId, b: NodeId):
        if a == b:
            return
        self.supers[a].super_neighbors.add(b)
        self.supers[b].super_neighbors.add(a)

    def super_degree(self, node: NodeId) -> int:
        return len(self.supers[node].super_neighbors)

    # ------------------------------------------------------------------
    # Indexes
    # ------------------------------------------------------------------

    def index_update(self, super_id: NodeId, sub: NodeId, items: Iterable[DataId]) -> Dict[DataId, Set[NodeId]]:
        """Replace the index entries of one sub-peer by its current items"""
        sp = self.supers[super_id]
        items = set(items)
        for item in sp.sub_items.get(sub, set()) - items:
            hosts = sp.index.get(item)
            if hosts is not None:
                hosts.discard(sub)
                if not hosts:
                    del sp.index[item]
        for item in items:
            sp.index.setdefault(item, set()).add(sub)
        sp.sub_items[sub] = items
        return sp.index

    def index_round(self):
        """Every sub-peer sends its current items to its super-peer"""
        for super_id in sorted(self.supers):
            sp = self.supers[super_id]
            for sub in sorted(sp.sub_peers):
                if self.topology.is_alive(sub):
                    self.index_update(super_id, sub, self.registry.items_of(sub))

    # ------------------------------------------------------------------
    # Bootstrap and arrivals
    # ------------------------------------------------------------------

    def bootstrap(self):
        """
        Build the layer on a fresh topology

        Nodes are promoted by decreasing capability until the quotas cover the
        population; each claims its nearest unclaimed nodes. Nodes left over
        join the super-peer of a mesh neighbor, then surplus sub-peers are
        handed to super-peers with room.
        """
        alive = self.topology.alive_nodes()
        if not alive:
            return
        ranked = sorted(alive, key=lambda n: (-self.capability(n), n))
        covered = 0
        for node in ranked:
            if self.supers and (covered >= len(alive) or self.quota(node) < 2):
                break
            self.make_super(node)
            covered += self.quota(node)
            self._claim(node, self.quota(node) - 1, steal=False)
            self._acquire_super_neighbors(node)

        unclaimed = {n for n in alive if self.super_of.get(n) is None}
        for node in unclaimed:
            self.super_of[node] = None
        self._rehome_orphans(unclaimed)
        self._promote_overloaded()
        logger.info(f"Super layer bootstrapped: {len(self.supers)} super-peers over {len(alive)} nodes")

    def admit(self, node: NodeId):
        """Attach a newly joined node to the super-peer of one of its mesh neighbors"""
        if not self.supers:
            self.make_super(node)
            return
        hosts = [s for s in (self._live_super(n) for n in self.topology.alive_neighbors(node)) if s is not None]
        target = hosts[0] if hosts else self._pick(sorted(self.supers))
        self.assign(node, target)
        if self.supers[target].is_overloaded:
            try:
                self.promote(target)
            except PromotionImpossibleError as e:
                logger.debug(f"Overload tolerated at {target}: {e}")

    # ------------------------------------------------------------------
    # Promotion
    # ------------------------------------------------------------------

    def promote(self, overloaded: NodeId) -> SuperPeer:
        """
        Promote the most capable sub-peer of an overloaded super-peer

        The new super-peer takes its nearest mesh nodes as sub-peers (found
        by a spiral walk) up to its quota, links to the promoting super-peer
        and acquires more super-neighbors by a random walk through it.

        Raises:
            PromotionImpossibleError: If no sub-peer can serve others
        """
        sp = self.supers[overloaded]
        candidates = [
            s for s in sp.sub_peers
            if s != overloaded and self.topology.is_alive(s) and self.quota(s) >= 2
        ]
        if not candidates:
            raise PromotionImpossibleError(
                f"Super-peer {overloaded} has {len(sp.sub_peers)} sub-peers (quota {sp.quota}) "
                f"and no sub-peer able to serve others"
            )
        n2 = max(candidates, key=lambda n: (self.capability(n), -n))
        new = self.make_super(n2)
        self._claim(n2, new.quota - 1, steal=True)

        self.link(n2, overloaded)
        self._acquire_super_neighbors(n2, overloaded)
        logger.info(
            f"Promoted {n2} (capability {new.capability}) from {overloaded}: "
            f"{len(new.sub_peers)} sub-peers, super degree {self.super_degree(n2)}"
        )
        return new

    def _claim(self, node: NodeId, budget: int, steal: bool) -> int:
        """Take up to budget of the nearest mesh nodes found by a spiral walk"""
        if budget <= 0:
            return 0
        radius = math.ceil(math.sqrt(budget / 3)) + 1
        report = self.walker.spiral_walk(node, radius)
        claimed = 0
        for other in report.visit_order[1:]:
            if claimed >= budget:
                break
            if other in self.supers or not self.topology.is_alive(other):
                continue
            if not steal and self.super_of.get(other) is not None:
                continue
            self.assign(other, node)
            claimed += 1
        return claimed

    def _acquire_super_neighbors(self, node: NodeId, start: Optional[NodeId] = None):
        """Random walk over the super layer; visited low-degree super-peers link to node"""
        others = sorted(s for s in self.supers if s != node)
        if not others:
            return
        current = start if start in self.supers and start != node else self._pick(others)
        for _ in range(self.super_walk_ttl):
            if self.super_degree(node) >= self.degree_target:
                break
            if current != node and current not in self.supers[node].super_neighbors \
                    and self.super_degree(current) < self.degree_target:
                self.link(node, current)
            neighbors = sorted(self.supers[current].super_neighbors)
            if not neighbors:
                current = self._pick(others)
                continue
            current = self._pick(neighbors)

    def _promote_overloaded(self) -> int:
        """Relieve every overloaded super-peer, promoting only when no super-peer has room"""
        promotions = 0
        for super_id in sorted(self.supers):
            attempts = 0
            while super_id in self.supers and self.supers[super_id].is_overloaded \
                    and attempts < len(self.supers[super_id].sub_peers):
                attempts += 1
                self.relieve_overload(super_id)
                if not self.supers[super_id].is_overloaded:
                    break
                try:
                    self.promote(super_id)
                    promotions += 1
                except PromotionImpossibleError as e:
                    logger.debug(f"Overload tolerated: {e}")
                    break
        return promotions

    def relieve_overload(self, super_id: NodeId) -> int:
        """
        Hand surplus sub-peers of super_id to super-peers with room

        Each hand-off follows a chain of super-peers adjacent in the mesh;
        along the chain every super-peer passes one border sub-peer to the
        next, so only the two ends change size.

        Returns:
            Number of sub-peers handed off
        """
        handed = 0
        while super_id in self.supers and self.supers[super_id].is_overloaded:
            chain = self._chain_to_room(super_id)
            if not chain:
                logger.warning(
                    f"Super-peer {super_id} stays over quota: "
                    f"{len(self.supers[super_id].sub_peers)} sub-peers, quota {self.supers[super_id].quota}"
                )
                break
            for sub, target in chain:
                self.assign(sub, target)
            handed += 1
        return handed

    def _chain_to_room(self, source: NodeId) -> List[Tuple[NodeId, NodeId]]:
        parent: Dict[NodeId, Optional[Tuple[NodeId, NodeId]]] = {source: None}
        frontier = deque([source])
        while frontier:
            current = frontier.popleft()
            for sub in sorted(self.supers[current].sub_peers):
                if sub in self.supers or not self.topology.is_alive(sub):
                    continue
                for neighbor in self.topology.alive_neighbors(sub):
                    target = self._live_super(neighbor)
                    if target is None or target in parent:
                        continue
                    parent[target] = (current, sub)
                    sp = self.supers[target]
                    if len(sp.sub_peers) < sp.quota:
                        chain = []
                        node = target
                        while parent[node] is not None:
                            previous, moving = parent[node]
                            chain.append((moving, node))
                            node = previous
                        return chain
                    frontier.append(target)
        return []

    # ------------------------------------------------------------------
    # Queries
    # ------------------------------------------------------------------

    def route_query(self, q: Query) -> QueryResult:
        """
        Route a query over the super layer

        The origin asks its super-peer; each super-peer checks its index and
        otherwise forwards to a random super-neighbor, decrementing the ttl.
        Orphans first random-walk the mesh until a node with a super-peer.
        """
        if not self.topology.is_alive(q.origin):
            raise UnknownNodeError(f"Query origin {q.origin} is not alive")
        if not q.query_id:
            self._next_query += 1
            q.query_id = self._next_query
        result = QueryResult(query_id=q.query_id, target=q.target, answered=False)

        node = q.origin
        current = self._live_super(node)
        while current is None and q.mesh_hops < self.mesh_walk_ttl:
            neighbors = self.topology.alive_neighbors(node)
            if not neighbors:
                break
            node = self._pick(neighbors)
            q.mesh_hops += 1
            current = self._live_super(node)
        result.mesh_hops = q.mesh_hops
        if current is None:
            return result

        ttl = q.ttl
        while True:
            hosts = sorted(
                h for h in self.supers[current].index.get(q.target, ())
                if self.topology.is_alive(h) and self.registry.hosts(h, q.target)
            )
            if hosts:
                result.answered = True
                result.hosts = hosts
                break
            if ttl <= 0:
                break
            neighbors = sorted(n for n in self.supers[current].super_neighbors if n in self.supers)
            if not neighbors:
                break
            current = self._pick(neighbors)
            ttl -= 1
            q.super_hops_used += 1
        result.super_hops = q.super_hops_used
        return result

    # ------------------------------------------------------------------
    # Departures
    # ------------------------------------------------------------------

    def node_failed(self, node: NodeId) -> int:
        """
        Forget a failed node; a failed super-peer triggers the orphan recovery

        Returns:
            Number of recovery iterations (0 for sub-peers)
        """
        if node in self.supers:
            return self.handle_super_failure(node)
        sup = self.super_of.pop(node, None)
        if sup is not None and sup in self.supers:
            self._detach_sub(sup, node)
        return 0

    def handle_super_failure(self, failed: NodeId) -> int:
        """
        Re-home the sub-peers of a failed super-peer

        Orphans with a mesh neighbor served by a live super-peer join that
        super-peer; the orphan region shrinks wave after wave. Super-peers
        left with a low degree acquire new super-neighbors.

        Returns:
            Number of re-homing iterations
        """
        sp = self.supers.pop(failed, None)
        if sp is None:
            raise InvalidArgumentError(f"Node {failed} is not a super-peer")
        self.super_of.pop(failed, None)
        for other in sp.super_neighbors:
            if other in self.supers:
                self.supers[other].super_neighbors.discard(failed)
        orphans = {n for n in sp.sub_peers if n != failed and self.topology.is_alive(n)}
        for orphan in orphans:
            self.super_of[orphan] = None

        if not self.supers and orphans:
            leader = max(orphans, key=lambda n: (self.capability(n), -n))
            self.make_super(leader)
            orphans.discard(leader)
            logger.info(f"No super-peer left: {leader} promoted itself")

        iterations = self._rehome_orphans(orphans)
        if orphans:
            logger.warning(f"{len(orphans)} sub-peers of {failed} remain orphaned")

        for other in sorted(sp.super_neighbors):
            if other in self.supers and self.super_degree(other) < self.degree_target:
                self._acquire_super_neighbors(other)
        logger.info(f"Super-peer {failed} failed: {len(sp.sub_peers) - 1} sub-peers re-homed in {iterations} iterations")
        return iterations

    def _rehome_orphans(self, orphans: Set[NodeId]) -> int:
        """Orphans bordering a served node join its super-peer, wave after wave; resolved orphans leave the set"""
        iterations = 0
        while orphans:
            moves = {}
            for orphan in sorted(orphans):
                for neighbor in self.topology.alive_neighbors(orphan):
                    sup = self._live_super(neighbor)
                    if sup is not None:
                        moves[orphan] = sup
                        break
            if not moves:
                break
            for orphan, sup in moves.items():
                self.assign(orphan, sup)
                orphans.discard(orphan)
            iterations += 1
        return iterations

    # ------------------------------------------------------------------
    # Regulation
    # ------------------------------------------------------------------

    def regulate_top_down(self, sn1: NodeId) -> bool:
        """
        Merge a random super-neighbor into sn1 when their combined load fits
        both the load unit and the quota of sn1

        Returns:
            True if a super-neighbor was downgraded
        """
        sp1 = self.supers[sn1]
        neighbors = sorted(n for n in sp1.super_neighbors if n in self.supers)
        if not neighbors:
            return False
        sn2 = self._pick(neighbors)
        sp2 = self.supers[sn2]
        combined = len(sp1.sub_peers) + len(sp2.sub_peers)
        unit = sp1.capability if self.load_unit == "capability" else max(sp1.quota, 1)
        if combined / unit >= 1 or combined > sp1.quota:
            return False

        del self.supers[sn2]
        for sub in sorted(sp2.sub_peers):
            self.super_of[sub] = None
            if self.topology.is_alive(sub):
                self.assign(sub, sn1)
        for other in sorted(sp2.super_neighbors):
            if other in self.supers:
                self.supers[other].super_neighbors.discard(sn2)
                self.link(sn1, other)
        if self.super_degree(sn1) < self.degree_target:
            self._acquire_super_neighbors(sn1)
        logger.info(f"Super-peer {sn2} merged into {sn1} ({len(sp1.sub_peers)} sub-peers)")
        return True

    def rebalance_bottom_up(self, n: NodeId) -> bool:
        """
        Move sub-peer n to the super-peer of a random mesh neighbor when that
        lowers the load of its own super-peer below the other's

        A move never pushes the receiving super-peer past its quota unless
        the giving one is over quota itself.

        Returns:
            True if n changed super-peer
        """
        if n in self.supers:
            return False
        sn1 = self._live_super(n)
        neighbors = self.topology.alive_neighbors(n)
        if sn1 is None or not neighbors:
            return False
        sn2 = self._live_super(self._pick(neighbors))
        if sn2 is None or sn2 == sn1:
            return False
        sp1, sp2 = self.supers[sn1], self.supers[sn2]
        load1 = (len(sp1.sub_peers) - 1) / sp1.capability
        load2 = (len(sp2.sub_peers) + 1) / sp2.capability
        if len(sp2.sub_peers) + 1 > sp2.quota and not sp1.is_overloaded:
            return False
        if load1 > load2:
            self.assign(n, sn2)
            return True
        return False

    def regulation_tick(self) -> Dict[str, int]:
        """
        Top-down regulation from every super-peer, bottom-up from every
        sub-peer, then relief of overloaded super-peers (promoting when no
        super-peer has room)
        """
        merges = sum(1 for sn in sorted(self.supers) if sn in self.supers and self.regulate_top_down(sn))
        moves = sum(
            1 for n in self.topology.alive_nodes() if n not in self.supers and self.rebalance_bottom_up(n)
        )
        promotions = self._promote_overloaded()
        self.index_round()
        over = self.quota_violations()
        if over:
            logger.warning(f"Regulation tick left {len(over)} super-peers over quota")
        logger.info(
            f"Regulation tick: {merges} merges, {moves} re-homed sub-peers, "
            f"{promotions} promotions, {len(self.supers)} super-peers"
        )
        return {"merges": merges, "moves": moves, "promotions": promotions}

    # ------------------------------------------------------------------
    # Checks and snapshots
    # ------------------------------------------------------------------

    def role_violations(self) -> List[str]:
        """Alive nodes without a live super-peer, or super-peers not serving themselves"""
        problems = []
        for node in self.topology.alive_nodes():
            if node in self.supers:
                if node not in self.supers[node].sub_peers:
                    problems.append(f"super-peer {node} does not serve itself")
            elif self._live_super(node) is None:
                problems.append(f"node {node} has no live super-peer")
            elif node not in self.supers[self.super_of[node]].sub_peers:
                problems.append(f"node {node} missing from its super-peer")
        return problems

    def quota_violations(self) -> List[NodeId]:
        return [node for node, sp in sorted(self.supers.items()) if sp.is_overloaded]

    def load_spread(self) -> float:
        """Largest minus smallest sub-peers-to-capability ratio over the super-peers"""
        loads = [len(sp.sub_peers) / sp.capability for sp in self.supers.values()]
        return max(loads) - min(loads) if loads else 0.0

    def snapshot(self) -> List[Dict[str, int]]:
        return [
            {
                "superId": sp.node,
                "capability": sp.capability,
                "numSubs": len(sp.sub_peers),
                "superDegree": len(sp.super_neighbors),
            }
            for _, sp in sorted(self.supers.items())
        ]

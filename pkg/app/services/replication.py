from typing import Dict, Iterable, List, Optional, Protocol, Set, Tuple
import logging

import numpy as np

from ..models.errors import InvalidArgumentError
from ..models.schemas import (
    DataId, Decision, DecisionKind, NodeId, ReplicaStore, ReplicationParams, RoundReport
)
from ..models.topology import Topology
from .spiral_walk import SpiralDistanceOracle

logger = logging.getLogger(__name__)


class DistanceOracle(Protocol):
    def ball(self, node: NodeId, radius: int) -> Dict[NodeId, int]:
        ...


class ReplicaRegistry:
    """Replica stores of every node plus a reverse index item -> hosting nodes"""

    def __init__(self):
        self.stores: Dict[NodeId, ReplicaStore] = {}
        self.holders: Dict[DataId, Set[NodeId]] = {}
        # original copies owned by their node: they may be cloned, never moved or dropped
        self.pinned: Set[Tuple[NodeId, DataId]] = set()

    def store(self, node: NodeId, capacity: Optional[int] = None) -> ReplicaStore:
        if node not in self.stores:
            self.stores[node] = ReplicaStore(owner=node, capacity=capacity)
        return self.stores[node]

    def add(self, node: NodeId, item: DataId):
        self.store(node).items.add(item)
        self.holders.setdefault(item, set()).add(node)

    def pin(self, node: NodeId, item: DataId):
        self.add(node, item)
        self.pinned.add((node, item))

    def is_pinned(self, node: NodeId, item: DataId) -> bool:
        return (node, item) in self.pinned

    def remove(self, node: NodeId, item: DataId):
        self.stores[node].items.discard(item)
        self.pinned.discard((node, item))
        hosts = self.holders.get(item)
        if hosts is not None:
            hosts.discard(node)
            if not hosts:
                del self.holders[item]

    def hosts(self, node: NodeId, item: DataId) -> bool:
        return node in self.holders.get(item, ())

    def items_of(self, node: NodeId) -> Set[DataId]:
        store = self.stores.get(node)
        return store.items if store else set()

    def drop_node(self, node: NodeId) -> Set[DataId]:
        """Forget a departed node's store"""
        store = self.stores.pop(node, None)
        if store is None:
            return set()
        for item in store.items:
            self.pinned.discard((node, item))
            hosts = self.holders.get(item)
            if hosts is not None:
                hosts.discard(node)
                if not hosts:
                    del self.holders[item]
        return store.items

    def count(self, item: DataId) -> int:
        return len(self.holders.get(item, ()))

    def total(self) -> int:
        return sum(len(store.items) for store in self.stores.values())

    def pairs(self) -> List[Tuple[NodeId, DataId]]:
        return sorted(
            ((node, item) for node, store in self.stores.items() for item in store.items),
            key=lambda pair: (pair[0], str(pair[1]))
        )


def evict(store: ReplicaStore, scores: Dict[DataId, float], rng: np.random.Generator,
          protected: Iterable[DataId] = ()) -> List[DataId]:
    """
    Remove the highest-scored items until the store fits its capacity;
    equal scores are broken at random

    Args:
        store: Over-full store
        scores: Score of each hosted item (missing items score 0)
        rng: Seeded generator for tie-breaks
        protected: Items that must stay; the store may remain over capacity

    Returns:
        Removed items, in removal order
    """
    if store.capacity is None or len(store.items) <= store.capacity:
        return []
    keep = set(protected)
    items = sorted(store.items, key=str)
    keys = rng.random(len(items))
    ranked = sorted(
        ((item, key) for item, key in zip(items, keys) if item not in keep),
        key=lambda pair: (-scores.get(pair[0], 0.0), pair[1])
    )
    removed = [item for item, _ in ranked[:len(items) - store.capacity]]
    for item in removed:
        store.items.discard(item)
    return removed


class ReplicationService:
    """Repulsion-based replica placement: every replica periodically removes, clones or moves itself"""

    def __init__(self, topology: Topology, registry: ReplicaRegistry, params: ReplicationParams,
                 rng: np.random.Generator, oracle: Optional[DistanceOracle] = None):
        self.topology = topology
        self.registry = registry
        self.params = params
        self.rng = rng
        self.oracle = oracle or SpiralDistanceOracle(topology)
        self.rounds = 0

    def score(self, n: NodeId, d: DataId, r: Optional[int] = None,
              omega: Iterable[NodeId] = ()) -> float:
        """
        Sum of (r - distance + 1)^2 over the holders of d within r hops of n,
        nodes in omega ignored
        """
        r = self.params.r if r is None else r
        ignored = set(omega)
        ball = self.oracle.ball(n, r)
        holders = self.registry.holders.get(d, ())
        return float(sum(
            (r - ball[h] + 1) ** 2 for h in holders if h in ball and h not in ignored
        ))

    def replicate_step(self, n: NodeId, d: DataId, apply: bool = True) -> Decision:
        """
        Decide what the replica of d hosted by n does this round

        Pinned originals only clone or stay.

        Args:
            n: Hosting node
            d: Hosted item
            apply: Apply the decision to the registry

        Returns:
            Decision (remove, clone, move or stay)

        Raises:
            InvalidArgumentError: If n does not host d
        """
        if not self.registry.hosts(n, d):
            raise InvalidArgumentError(f"Node {n} does not host {d}")
        r = self.params.r
        current = self.score(n, d, r, {n})

        if current == 0:
            decision = self._clone_decision(n, d)
        elif self.registry.is_pinned(n, d):
            decision = Decision(DecisionKind.STAY, score=current)
        elif current > self.params.max_score:
            decision = Decision(DecisionKind.REMOVE, score=current)
        else:
            decision = self._move_decision(n, d, current)

        if apply:
            self.apply(n, d, decision)
        return decision

    def _clone_decision(self, n: NodeId, d: DataId) -> Decision:
        ball = self.oracle.ball(n, self.params.r)
        free = {m: depth for m, depth in ball.items() if depth > 0 and not self.registry.hosts(m, d)}
        if not free:
            return Decision(DecisionKind.STAY)
        ring = sorted(m for m, depth in free.items() if depth == self.params.r)
        if not ring:
            farthest = max(free.values())
            ring = sorted(m for m, depth in free.items() if depth == farthest)
        size = min(self.params.t, len(ring))
        sample = sorted(int(m) for m in self.rng.choice(ring, size=size, replace=False))
        target = min(sample, key=lambda m: (self.score(m, d, self.params.r), m))
        return Decision(DecisionKind.CLONE, target=target, score=0.0)

    def _move_decision(self, n: NodeId, d: DataId, current: float) -> Decision:
        best, best_score = n, current
        for m in self.topology.alive_neighbors(n):
            if self.registry.hosts(m, d):
                continue
            candidate = self.score(m, d, self.params.r, {n})
            if candidate < best_score:
                best, best_score = m, candidate
        if best == n:
            return Decision(DecisionKind.STAY, score=current)
        return Decision(DecisionKind.MOVE, target=best, score=best_score)

    def apply(self, n: NodeId, d: DataId, decision: Decision):
        if decision.kind == DecisionKind.REMOVE:
            self.registry.remove(n, d)
        elif decision.kind == DecisionKind.CLONE:
            self.registry.add(decision.target, d)
            self._fit(decision.target)
        elif decision.kind == DecisionKind.MOVE:
            self.registry.remove(n, d)
            self.registry.add(decision.target, d)
            self._fit(decision.target)

    def _fit(self, node: NodeId):
        store = self.registry.stores[node]
        if store.overflow == 0:
            return
        scores = {item: self.score(node, item, self.params.r, {node}) for item in store.items}
        protected = {
            item for item in store.items
            if self.registry.is_pinned(node, item) or self.registry.count(item) <= 1
        }
        removed = evict(store, scores, self.rng, protected)
        for item in removed:
            self.registry.remove(node, item)
        logger.debug(f"Node {node} evicted {len(removed)} replicas to fit capacity {store.capacity}")

    def run_replication_round(self) -> RoundReport:
        """
        Sweep every (node, item) pair in a shuffled order, applying each
        decision immediately

        Returns:
            RoundReport with creation, move and removal counts
        """
        self.rounds += 1
        report = RoundReport(round=self.rounds)
        pairs = self.registry.pairs()
        for index in self.rng.permutation(len(pairs)):
            n, d = pairs[int(index)]
            if not self.topology.is_alive(n) or not self.registry.hosts(n, d):
                continue
            decision = self.replicate_step(n, d)
            if decision.kind == DecisionKind.CLONE:
                report.creates += 1
            elif decision.kind == DecisionKind.MOVE:
                report.moves += 1
            elif decision.kind == DecisionKind.REMOVE:
                report.removes += 1
        report.total_replicas = self.registry.total()
        logger.info(
            f"Replication round {report.round}: {report.creates} creates, {report.moves} moves, "
            f"{report.removes} removes, {report.total_replicas} replicas"
        )
        return report

    def spacing(self, d: DataId, max_distance: Optional[int] = None) -> List[int]:
        """Distance from every replica of d to its nearest other replica"""
        radius = max_distance if max_distance is not None else 4 * self.params.r
        holders = sorted(self.registry.holders.get(d, ()))
        distances = []
        for h in holders:
            ball = self.oracle.ball(h, radius)
            nearest = [ball[o] for o in holders if o != h and o in ball]
            if nearest:
                distances.append(min(nearest))
        return distances

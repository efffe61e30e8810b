"""
Closed triangular meshes used as seeds and comparison topologies:
the icosahedron, subdivided geodes and capped tubes.
"""
import logging
from typing import Dict, List, Tuple

from ..models.errors import InvalidArgumentError, ResourceLimitError
from ..models.topology import Topology
from config import Config

logger = logging.getLogger(__name__)

Face = Tuple[int, int, int]


def icosahedron_faces() -> List[Face]:
    """
    The 20 faces of the icosahedron: node 0 is the north pole, 1-5 the
    upper ring, 6-10 the lower ring and 11 the south pole.
    """
    faces: List[Face] = []
    upper = [1 + i for i in range(5)]
    lower = [6 + i for i in range(5)]
    for i in range(5):
        j = (i + 1) % 5
        faces.append((0, upper[i], upper[j]))
        faces.append((upper[i], lower[i], lower[j]))
        faces.append((upper[i], upper[j], lower[j]))
        faces.append((11, lower[i], lower[j]))
    return faces


def topology_from_faces(faces: List[Face]) -> Topology:
    edges = set()
    for a, b, c in faces:
        for u, v in ((a, b), (b, c), (c, a)):
            edges.add((min(u, v), max(u, v)))
    return Topology.from_edges(sorted(edges))


def subdivide(faces: List[Face], next_id: int) -> Tuple[List[Face], int]:
    """Split every face into four, sharing edge midpoints between faces"""
    midpoints: Dict[Tuple[int, int], int] = {}

    def midpoint(u: int, v: int) -> int:
        nonlocal next_id
        key = (min(u, v), max(u, v))
        if key not in midpoints:
            midpoints[key] = next_id
            next_id += 1
        return midpoints[key]

    refined: List[Face] = []
    for a, b, c in faces:
        ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
        refined.extend([(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)])
    return refined, next_id


def geode_faces(level: int) -> List[Face]:
    faces = icosahedron_faces()
    next_id = 12
    for _ in range(level):
        faces, next_id = subdivide(faces, next_id)
    return faces


def build_geode(level: int) -> Topology:
    """
    Triangular geode obtained by recursively subdividing the icosahedron:
    10 * 4**level + 2 nodes, 12 of degree five and the rest of degree six.
    """
    if level < 0:
        raise InvalidArgumentError(f"Geode level must be non-negative, got {level}")
    if level > Config.MAX_GEODE_LEVEL:
        raise ResourceLimitError(
            f"Geode level {level} exceeds the configured limit {Config.MAX_GEODE_LEVEL} "
            f"({10 * 4 ** level + 2} nodes)"
        )
    topology = topology_from_faces(geode_faces(level))
    logger.info(f"Built geode level {level}: {len(topology)} nodes, {topology.edge_count()} edges")
    return topology


def build_capsule(circumference: int, layers: int) -> Topology:
    """
    A capped tube: `layers` stacked cycles of `circumference` nodes, node j
    of a layer linked to nodes j and j-1 of the next layer, closed by one
    apex at each end. Interior nodes have degree six.
    """
    if circumference < 4 or layers < 1:
        raise InvalidArgumentError("A capsule needs circumference >= 4 and at least one layer")

    def node(layer: int, j: int) -> int:
        return 1 + layer * circumference + j % circumference

    north, south = 0, 1 + layers * circumference
    edges = []
    for layer in range(layers):
        for j in range(circumference):
            edges.append((node(layer, j), node(layer, j + 1)))
            if layer + 1 < layers:
                edges.append((node(layer, j), node(layer + 1, j)))
                edges.append((node(layer, j), node(layer + 1, j - 1)))
    for j in range(circumference):
        edges.append((north, node(0, j)))
        edges.append((south, node(layers - 1, j)))
    return Topology.from_edges(edges)

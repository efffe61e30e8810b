import pandas as pd
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Union
from ..models.topology import Topology
import logging

logger = logging.getLogger(__name__)

METRIC_COLUMNS: Dict[str, List[str]] = {
    "rounds": ["round", "creates", "moves", "removes", "totalReplicas"],
    "population": ["tick", "nodes", "replicas", "supers"],
    "queries": ["queryId", "target", "answered", "superHops", "meshHops"],
    "super_layer": ["superId", "capability", "numSubs", "superDegree"],
    "errors": ["tick", "kind", "node", "message"],
    "degree_histogram": ["degree", "count"],
    "spacing": ["distance", "count"],
    "rarity": ["item", "initialCopies", "finalCopies"],
    "answer_speed": ["ttl", "answeredFraction"],
    "walk_trace": ["step", "node", "ring", "messages"],
    "radius_sweep": ["r", "maxScore", "replicas", "rounds"],
}


class CSVIOService:
    """Service for writing metric CSV files and reading/writing topology edge lists"""

    def __init__(self, columns: Mapping[str, List[str]] = METRIC_COLUMNS):
        self.columns = dict(columns)

    def write_metrics(self, family: str, rows: Iterable[Mapping], out_dir: Union[str, Path],
                      name: Optional[str] = None) -> Path:
        """
        Write one metric family as <out_dir>/<name or family>.csv

        The header is always written, also when there are no rows.

        Raises:
            ValueError: If the family is unknown or a row misses a column
        """
        if family not in self.columns:
            raise ValueError(f"Unknown metric family: {family}")
        columns = self.columns[family]
        rows = list(rows)
        missing = sorted({col for row in rows for col in columns if col not in row})
        if missing:
            raise ValueError(f"Missing columns for {family}: {missing}")

        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        path = out_dir / f"{name or family}.csv"
        df = pd.DataFrame([{col: row[col] for col in columns} for row in rows], columns=columns)
        df.to_csv(path, index=False, lineterminator="\n")
        logger.info(f"Wrote {len(df)} rows to {path}")
        return path

    def write_edge_list(self, topology: Topology, path: Union[str, Path]) -> Path:
        """Write alive edges as "idA idB" lines, idA < idB, sorted"""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        edges = [(a, b) for a, b in topology.edges() if topology.is_alive(a) and topology.is_alive(b)]
        df = pd.DataFrame(edges, columns=["a", "b"])
        df.to_csv(path, sep=" ", header=False, index=False, lineterminator="\n")
        logger.info(f"Wrote {len(df)} edges to {path}")
        return path

    def read_edge_list(self, path: Union[str, Path]) -> Topology:
        """
        Read a topology edge list

        Args:
            path: File with one "idA idB" pair per line

        Returns:
            Topology built from the edges

        Raises:
            ValueError: If the file is empty or malformed
            FileNotFoundError: If file doesn't exist
        """
        try:
            df = pd.read_csv(path, sep=r"\s+", header=None, comment="#", dtype=str)
        except FileNotFoundError:
            logger.error(f"Topology file not found: {path}")
            raise
        except pd.errors.EmptyDataError:
            logger.error(f"Topology file is empty: {path}")
            raise ValueError("Topology file is empty")

        if df.shape[1] != 2:
            raise ValueError(f"Expected 2 columns per line, found {df.shape[1]}")
        try:
            df = df.astype(int)
        except ValueError:
            raise ValueError(f"Node ids must be integers in {path}")
        if (df[0] == df[1]).any():
            raise ValueError(f"Self loop in {path}")

        topology = Topology.from_edges(zip(df[0].tolist(), df[1].tolist()))
        logger.info(f"Read topology from {path}: {len(topology)} nodes, {topology.edge_count()} edges")
        return topology

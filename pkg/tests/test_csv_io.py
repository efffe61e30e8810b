import pytest
import tempfile
import pandas as pd
from pathlib import Path
from app.services.csv_io import CSVIOService
from app.services.topology_builder import build_geode


class TestCSVIOService:
    def setup_method(self):
        self.service = CSVIOService()

    def test_read_valid_edge_list(self):
        content = """0 1
1 2
2 0
"""
        with tempfile.NamedTemporaryFile(mode='w', suffix='.txt', delete=False) as f:
            f.write(content)
            temp_path = f.name

        try:
            topology = self.service.read_edge_list(temp_path)
            assert len(topology) == 3
            assert topology.edges() == [(0, 1), (0, 2), (1, 2)]
        finally:
            Path(temp_path).unlink()

    def test_edge_list_round_trip(self):
        topology = build_geode(1)
        with tempfile.TemporaryDirectory() as out:
            path = self.service.write_edge_list(topology, Path(out) / "geode.txt")
            lines = path.read_text().splitlines()
            assert len(lines) == 120
            assert lines[0] == "0 12"
            assert lines == sorted(lines, key=lambda line: tuple(map(int, line.split())))
            assert self.service.read_edge_list(path).edges() == topology.edges()

    def test_empty_edge_list(self):
        with tempfile.NamedTemporaryFile(mode='w', suffix='.txt', delete=False) as f:
            f.write("")
            temp_path = f.name

        try:
            with pytest.raises(ValueError, match="Topology file is empty"):
                self.service.read_edge_list(temp_path)
        finally:
            Path(temp_path).unlink()

    def test_malformed_edge_lists(self):
        for content in ["0 1 2\n1 2 3\n", "0 a\n", "3 3\n"]:
            with tempfile.NamedTemporaryFile(mode='w', suffix='.txt', delete=False) as f:
                f.write(content)
                temp_path = f.name
            try:
                with pytest.raises(ValueError):
                    self.service.read_edge_list(temp_path)
            finally:
                Path(temp_path).unlink()

    def test_missing_file(self):
        with pytest.raises(FileNotFoundError):
            self.service.read_edge_list("/nonexistent/topology.txt")

    def test_write_metrics(self):
        rows = [{"degree": 5, "count": 12}, {"degree": 6, "count": 30}]
        with tempfile.TemporaryDirectory() as out:
            path = self.service.write_metrics("degree_histogram", rows, out)
            assert path.name == "degree_histogram.csv"
            assert path.read_bytes() == b"degree,count\n5,12\n6,30\n"
            assert list(pd.read_csv(path).columns) == ["degree", "count"]

    def test_write_metrics_empty_keeps_header(self):
        with tempfile.TemporaryDirectory() as out:
            path = self.service.write_metrics("queries", [], out, name="queries_run")
            assert path.read_text() == "queryId,target,answered,superHops,meshHops\n"

    def test_write_metrics_errors(self):
        with tempfile.TemporaryDirectory() as out:
            with pytest.raises(ValueError, match="Unknown metric family"):
                self.service.write_metrics("bogus", [], out)
            with pytest.raises(ValueError, match="Missing columns"):
                self.service.write_metrics("spacing", [{"distance": 1}], out)

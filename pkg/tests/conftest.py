import os
from pathlib import Path

import numpy as np
import pytest

from mfgat.autodiff import RngStream
from mfgat.datasets import Dataset, GraphRecord, encode_node_features, parse_tudataset, write_tudataset

DATA = Path(__file__).parent / "data"

# Lines recorded by test_acceptance.py, echoed in the terminal summary.
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def mutag() -> Dataset:
    return parse_tudataset(DATA / "MUTAG", "MUTAG")


def write_fixture(root: Path, name: str = "TINY") -> Path:
    """2 graphs, 3 nodes: graph 1 = nodes 1-2 joined (listed both ways), graph 2 = node 3."""
    root.mkdir(parents=True, exist_ok=True)
    (root / f"{name}_A.txt").write_text("1, 2\n2, 1\n")
    (root / f"{name}_graph_indicator.txt").write_text("1\n1\n2\n")
    (root / f"{name}_graph_labels.txt").write_text("1\n-1\n")
    (root / f"{name}_node_labels.txt").write_text("0\n2\n1\n")
    return root


@pytest.fixture
def tiny_dir(tmp_path) -> Path:
    return write_fixture(tmp_path / "TINY")


def make_synthetic(n_graphs: int = 60, seed: int = 0, name: str = "SYNTH") -> Dataset:
    """Balanced two-class graphs over node labels {0, 1, 2}.

    Class 1 graphs are rings rich in label 2; class 0 graphs are trees rich in
    label 0, so both structure and features carry signal.
    """
    rng = RngStream(seed).child("synthetic")
    graphs = []
    for g in range(n_graphs):
        label = g % 2
        n = 5 + int(rng.random(()) * 6)
        probs = [0.2, 0.3, 0.5] if label else [0.5, 0.3, 0.2]
        raw = rng.generator.choice(3, size=n, p=probs)
        if label:
            edges = [(i, (i + 1) % n) for i in range(n)]
        else:
            edges = [(int(rng.random(()) * i), i) for i in range(1, n)]
        x, _ = encode_node_features(raw, alphabet=[0, 1, 2])
        graphs.append(GraphRecord(x, np.array(edges), label, g + 1))
    return Dataset(name, tuple(graphs), 2, 3, "one-hot node labels over sorted alphabet 0,1,2",
                   (0, 1, 2), (0, 1))


@pytest.fixture(scope="session")
def synthetic() -> Dataset:
    return make_synthetic()


@pytest.fixture(scope="session")
def synthetic_dir(tmp_path_factory) -> Path:
    root = tmp_path_factory.mktemp("data")
    write_tudataset(make_synthetic(), root / "SYNTH", "SYNTH")
    return root


def benchmark_data_dir() -> Path:
    return Path(os.environ.get("MFGAT_DATA_DIR", Path(__file__).resolve().parents[1] / "data"))

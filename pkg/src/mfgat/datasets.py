"""TUDataset text-format reader/writer, feature encoding, statistics and splits.

File layout for a dataset ``DS`` (one value per line, node ids 1-based and
global across the whole dataset)::

    DS_A.txt                "i, j" adjacency pairs
    DS_graph_indicator.txt  line k: graph id of node k
    DS_graph_labels.txt     line g: class label of graph g
    DS_node_labels.txt      line k: integer label of node k
    DS_node_attributes.txt  line k: comma-separated reals

Other files (edge labels, graph attributes, README) are ignored.
"""
from __future__ import annotations

import csv
import io
import math
import os
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Sequence

import numpy as np

from .autodiff import RngStream

# Feature dimensions of the one-hot encoded benchmark datasets.
KNOWN_FEATURE_DIMS = {"PROTEINS": 3, "NCI1": 37, "Mutagenicity": 14}

STATS_HEADER = ["dataset", "num_graphs", "num_classes", "avg_nodes", "avg_edges", "feature_dim"]


class DatasetError(Exception):
    """Base class for dataset loading failures."""


class MissingInputError(DatasetError, FileNotFoundError):
    def __init__(self, path: os.PathLike | str, what: str = "required file"):
        self.path = Path(path)
        super().__init__(f"{what} not found: {self.path}")


class FormatError(DatasetError):
    def __init__(self, path: os.PathLike | str, line: int | None, message: str):
        self.path = Path(path)
        self.line = line
        where = f"{self.path}:{line}" if line is not None else str(self.path)
        super().__init__(f"{where}: {message}")


class ValidationError(DatasetError):
    pass


@dataclass(frozen=True, eq=False)
class GraphRecord:
    """One graph. ``edges`` holds each undirected edge once as ``(i, j)`` with ``i < j``."""

    x: np.ndarray
    edges: np.ndarray
    label: int
    graph_id: int = 0

    def __post_init__(self):
        x = np.asarray(self.x, dtype=np.float64)
        edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        if x.ndim != 2 or x.shape[0] < 1:
            raise ValueError(f"graph {self.graph_id}: node features must be n x d with n >= 1")
        n = x.shape[0]
        if edges.size and (edges.min() < 0 or edges.max() >= n):
            raise ValueError(f"graph {self.graph_id}: edge endpoint outside [0, {n})")
        if np.any(edges[:, 0] == edges[:, 1]):
            raise ValueError(f"graph {self.graph_id}: self-loops are not stored")
        canon = np.unique(np.sort(edges, axis=1), axis=0)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "edges", canon)
        object.__setattr__(self, "label", int(self.label))

    @property
    def num_nodes(self) -> int:
        return self.x.shape[0]

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    @cached_property
    def adjacency(self) -> np.ndarray:
        """Symmetric 0/1 adjacency without self-loops."""
        a = np.zeros((self.num_nodes, self.num_nodes))
        if self.num_edges:
            a[self.edges[:, 0], self.edges[:, 1]] = 1.0
            a[self.edges[:, 1], self.edges[:, 0]] = 1.0
        return a

    @cached_property
    def attention_mask(self) -> np.ndarray:
        """Neighbours plus self, as a boolean n x n matrix."""
        return (self.adjacency + np.eye(self.num_nodes)) > 0

    @cached_property
    def gcn_propagation(self) -> np.ndarray:
        """``D^-1/2 (A + I) D^-1/2`` with degrees taken from ``A + I``."""
        a_hat = self.adjacency + np.eye(self.num_nodes)
        inv_sqrt = 1.0 / np.sqrt(a_hat.sum(axis=1))
        return a_hat * inv_sqrt[:, None] * inv_sqrt[None, :]

    @cached_property
    def neighbor_mean(self) -> np.ndarray:
        """Row-normalised adjacency; isolated nodes get an all-zero row."""
        deg = self.adjacency.sum(axis=1, keepdims=True)
        return np.divide(self.adjacency, deg, out=np.zeros_like(self.adjacency), where=deg > 0)

    def permuted(self, perm: Sequence[int]) -> "GraphRecord":
        """Relabel nodes so that new node ``k`` is old node ``perm[k]``."""
        perm = np.asarray(perm)
        inv = np.empty_like(perm)
        inv[perm] = np.arange(len(perm))
        return GraphRecord(self.x[perm], inv[self.edges], self.label, self.graph_id)


@dataclass(frozen=True, eq=False)
class Dataset:
    name: str
    graphs: tuple[GraphRecord, ...]
    num_classes: int
    feature_dim: int
    encoding: str
    node_label_alphabet: tuple[int, ...] = ()
    graph_label_alphabet: tuple[int, ...] = ()

    def __len__(self) -> int:
        return len(self.graphs)

    def __getitem__(self, i):
        return self.graphs[i]

    def subset(self, indices: Sequence[int]) -> list[GraphRecord]:
        return [self.graphs[i] for i in indices]


@dataclass(frozen=True)
class DatasetStats:
    dataset: str
    num_graphs: int
    num_classes: int
    avg_nodes: float
    avg_edges: float
    feature_dim: int

    def row(self) -> list:
        return [self.dataset, self.num_graphs, self.num_classes,
                f"{self.avg_nodes:.2f}", f"{self.avg_edges:.2f}", self.feature_dim]


@dataclass(frozen=True)
class SplitSpec:
    train: float = 0.7
    val: float = 0.1
    test: float = 0.2
    seed: int = 0

    def __post_init__(self):
        fr = (self.train, self.val, self.test)
        if min(fr) <= 0 or abs(sum(fr) - 1.0) > 1e-9:
            raise ValueError(f"split fractions must be positive and sum to 1, got {fr}")

    @classmethod
    def parse(cls, text: str, seed: int = 0) -> "SplitSpec":
        parts = [float(p) for p in text.split(",")]
        if len(parts) != 3:
            raise ValueError(f"split needs three comma-separated fractions, got {text!r}")
        return cls(*parts, seed=seed)


# ---------------------------------------------------------------------------
# parsing


def _read_lines(path: Path) -> list[str]:
    if not path.is_file():
        raise MissingInputError(path)
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().rstrip().split("\n")
    if lines == [""]:
        return []
    return lines


def _int_column(path: Path) -> np.ndarray:
    lines = _read_lines(path)
    out = np.empty(len(lines), dtype=np.int64)
    for k, line in enumerate(lines):
        try:
            out[k] = int(line.strip())
        except ValueError:
            raise FormatError(path, k + 1, f"expected an integer, got {line.strip()!r}") from None
    return out


def _pair_column(path: Path) -> np.ndarray:
    lines = _read_lines(path)
    out = np.empty((len(lines), 2), dtype=np.int64)
    for k, line in enumerate(lines):
        parts = line.replace(",", " ").split()
        if len(parts) != 2:
            raise FormatError(path, k + 1, f"expected 'i, j', got {line.strip()!r}")
        try:
            out[k, 0] = int(parts[0])
            out[k, 1] = int(parts[1])
        except ValueError:
            raise FormatError(path, k + 1, f"expected integer node ids, got {line.strip()!r}") from None
    return out


def _float_rows(path: Path) -> np.ndarray:
    lines = _read_lines(path)
    rows = []
    for k, line in enumerate(lines):
        try:
            rows.append([float(v) for v in line.split(",")])
        except ValueError:
            raise FormatError(path, k + 1, f"expected comma-separated reals, got {line.strip()!r}") from None
        if len(rows[-1]) != len(rows[0]):
            raise FormatError(path, k + 1, f"expected {len(rows[0])} values, got {len(rows[-1])}")
    return np.asarray(rows, dtype=np.float64).reshape(len(rows), -1)


def encode_node_features(node_labels: np.ndarray, alphabet: Sequence[int] | None = None
                         ) -> tuple[np.ndarray, tuple[int, ...]]:
    """One-hot encode integer node labels over ``alphabet`` (default: sorted unique labels)."""
    node_labels = np.asarray(node_labels, dtype=np.int64)
    if alphabet is None:
        alphabet = np.unique(node_labels)
    alphabet = np.asarray(alphabet, dtype=np.int64)
    pos = np.searchsorted(alphabet, node_labels)
    if np.any(pos >= len(alphabet)) or np.any(alphabet[np.minimum(pos, len(alphabet) - 1)] != node_labels):
        raise ValueError("node label outside the alphabet")
    onehot = np.zeros((len(node_labels), len(alphabet)))
    onehot[np.arange(len(node_labels)), pos] = 1.0
    return onehot, tuple(int(a) for a in alphabet)


def parse_tudataset(directory: os.PathLike | str, name: str, use_attributes: bool = False,
                    validate: bool = True) -> Dataset:
    """Load ``directory/name_*.txt`` into a :class:`Dataset`.

    Node features are one-hot node labels unless ``use_attributes`` is set.
    For the benchmark datasets the encoded width is checked against the known
    dimension when ``validate`` is true.
    """
    root = Path(directory)
    if not root.is_dir():
        raise MissingInputError(root, "dataset directory")
    p = lambda suffix: root / f"{name}_{suffix}.txt"  # noqa: E731

    indicator = _int_column(p("graph_indicator"))
    graph_labels_raw = _int_column(p("graph_labels"))
    pairs = _pair_column(p("A"))
    num_nodes, num_graphs = len(indicator), len(graph_labels_raw)

    bad = np.flatnonzero((indicator < 1) | (indicator > num_graphs))
    if bad.size:
        k = int(bad[0])
        raise FormatError(p("graph_indicator"), k + 1,
                          f"graph id {indicator[k]} outside 1..{num_graphs}")
    counts = np.bincount(indicator - 1, minlength=num_graphs)
    if np.any(counts == 0):
        g = int(np.flatnonzero(counts == 0)[0]) + 1
        raise FormatError(p("graph_indicator"), None, f"graph {g} has no nodes")

    if use_attributes:
        feats = _float_rows(p("node_attributes"))
        if len(feats) != num_nodes:
            raise FormatError(p("node_attributes"), None,
                              f"{len(feats)} rows for {num_nodes} nodes")
        encoding, alphabet = "node-attributes", ()
    else:
        if not p("node_labels").is_file():
            if p("node_attributes").is_file():
                raise ValidationError(f"{name}: no node labels; pass use_attributes=True")
            raise MissingInputError(p("node_labels"))
        node_labels = _int_column(p("node_labels"))
        if len(node_labels) != num_nodes:
            raise FormatError(p("node_labels"), None,
                              f"{len(node_labels)} labels for {num_nodes} nodes")
        feats, alphabet = encode_node_features(node_labels)
        encoding = "one-hot node labels over sorted alphabet " + ",".join(map(str, alphabet))
        expected = KNOWN_FEATURE_DIMS.get(name)
        if validate and expected is not None and feats.shape[1] != expected:
            raise ValidationError(
                f"{name}: encoded feature dimension {feats.shape[1]} != expected {expected}")

    # edges: global 1-based ids -> graph-local 0-based indices
    if pairs.size:
        bad = np.flatnonzero((pairs < 1).any(axis=1) | (pairs > num_nodes).any(axis=1))
        if bad.size:
            k = int(bad[0])
            raise FormatError(p("A"), k + 1,
                              f"node id outside graph indicator range 1..{num_nodes}")
        gi, gj = indicator[pairs[:, 0] - 1], indicator[pairs[:, 1] - 1]
        bad = np.flatnonzero(gi != gj)
        if bad.size:
            k = int(bad[0])
            raise FormatError(p("A"), k + 1, "edge joins nodes of different graphs")

    order = np.argsort(indicator, kind="stable")  # node ids grouped by graph, ascending id inside
    starts = np.concatenate([[0], np.cumsum(counts)])
    local = np.empty(num_nodes, dtype=np.int64)
    for g in range(num_graphs):
        local[order[starts[g]:starts[g + 1]]] = np.arange(counts[g])

    edges_by_graph: list[np.ndarray] = [np.empty((0, 2), dtype=np.int64)] * num_graphs
    if pairs.size:
        pairs0 = pairs - 1
        keep = pairs0[:, 0] != pairs0[:, 1]
        pairs0 = pairs0[keep]
        owner = indicator[pairs0[:, 0]] - 1
        loc = local[pairs0]
        by = np.argsort(owner, kind="stable")
        owner, loc = owner[by], loc[by]
        cuts = np.searchsorted(owner, np.arange(num_graphs + 1))
        edges_by_graph = [loc[cuts[g]:cuts[g + 1]] for g in range(num_graphs)]

    glabel_alphabet = np.unique(graph_labels_raw)
    glabels = np.searchsorted(glabel_alphabet, graph_labels_raw)
    graphs = tuple(
        GraphRecord(feats[order[starts[g]:starts[g + 1]]], edges_by_graph[g], int(glabels[g]), g + 1)
        for g in range(num_graphs)
    )
    return Dataset(name, graphs, len(glabel_alphabet), feats.shape[1], encoding,
                   alphabet, tuple(int(a) for a in glabel_alphabet))


def write_tudataset(dataset: Dataset, directory: os.PathLike | str, name: str | None = None) -> Path:
    """Write ``dataset`` in TU text format (both directions of every edge)."""
    name = name or dataset.name
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    a_lines, ind_lines, node_lines = [], [], []
    offset = 0
    for g, graph in enumerate(dataset.graphs, start=1):
        ind_lines.extend([str(g)] * graph.num_nodes)
        for i, j in graph.edges:
            a_lines.append(f"{i + 1 + offset}, {j + 1 + offset}")
            a_lines.append(f"{j + 1 + offset}, {i + 1 + offset}")
        if dataset.node_label_alphabet:
            alph = dataset.node_label_alphabet
            node_lines.extend(str(alph[k]) for k in graph.x.argmax(axis=1))
        else:
            node_lines.extend(", ".join(repr(float(v)) for v in row) for row in graph.x)
        offset += graph.num_nodes
    galph = dataset.graph_label_alphabet or tuple(range(dataset.num_classes))
    files = {
        "A": a_lines,
        "graph_indicator": ind_lines,
        "graph_labels": [str(galph[gr.label]) for gr in dataset.graphs],
        "node_labels" if dataset.node_label_alphabet else "node_attributes": node_lines,
    }
    for suffix, lines in files.items():
        (root / f"{name}_{suffix}.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return root


# ---------------------------------------------------------------------------
# statistics and splits


def dataset_stats(dataset: Dataset) -> DatasetStats:
    if not len(dataset):
        raise ValueError("dataset is empty")
    nodes = np.array([g.num_nodes for g in dataset.graphs], dtype=np.float64)
    edges = np.array([g.num_edges for g in dataset.graphs], dtype=np.float64)
    return DatasetStats(dataset.name, len(dataset), dataset.num_classes,
                        float(nodes.mean()), float(edges.mean()), dataset.feature_dim)


def stats_csv(stats: Sequence[DatasetStats]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(STATS_HEADER)
    for s in stats:
        w.writerow(s.row())
    return buf.getvalue()


def split_sizes(n: int, spec: SplitSpec) -> tuple[int, int, int]:
    # 1e-9 guards exact products such as 10 * 0.7 = 7.000000000000001 and 6.9999999...
    n_train = math.floor(n * spec.train + 1e-9)
    n_val = math.floor(n * spec.val + 1e-9)
    return n_train, n_val, n - n_train - n_val


def split_dataset(dataset: Dataset | int, spec: SplitSpec) -> tuple[list[int], list[int], list[int]]:
    """Seeded shuffle of ``range(N)`` cut into train/val/test index lists."""
    n = dataset if isinstance(dataset, int) else len(dataset)
    if n < 3:
        raise ValueError(f"need at least 3 graphs to split, got {n}")
    n_train, n_val, n_test = split_sizes(n, spec)
    if min(n_train, n_val, n_test) < 1:
        raise ValueError(f"split of {n} graphs by {spec} leaves an empty part "
                         f"({n_train}, {n_val}, {n_test})")
    perm = RngStream(spec.seed).child("split").permutation(n).tolist()
    return perm[:n_train], perm[n_train:n_train + n_val], perm[n_train + n_val:]


def kfold(indices: Sequence[int], k: int, seed: int) -> list[tuple[list[int], list[int]]]:
    """Shuffle ``indices`` and return ``k`` (train, validation) pairs; fold sizes differ by <= 1."""
    if k < 2:
        raise ValueError("cross-validation needs at least 2 folds")
    indices = list(indices)
    if len(indices) < k:
        raise ValueError(f"{len(indices)} graphs cannot fill {k} folds")
    perm = RngStream(seed).child("kfold").permutation(len(indices))
    shuffled = [indices[i] for i in perm]
    bounds = np.linspace(0, len(shuffled), k + 1).round().astype(int)
    folds = [shuffled[bounds[i]:bounds[i + 1]] for i in range(k)]
    return [([x for j, f in enumerate(folds) if j != i for x in f], folds[i]) for i in range(k)]

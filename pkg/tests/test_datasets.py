import csv
import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import DATA, make_synthetic, write_fixture
from mfgat.datasets import (
    STATS_HEADER, FormatError, GraphRecord, MissingInputError, SplitSpec, ValidationError,
    dataset_stats, encode_node_features, kfold, parse_tudataset, split_dataset, split_sizes,
    stats_csv, write_tudataset,
)


class TestTinyFixture:
    def test_parsed_structure(self, tiny_dir):
        ds = parse_tudataset(tiny_dir, "TINY")
        assert len(ds) == 2 and ds.num_classes == 2 and ds.feature_dim == 3
        g1, g2 = ds.graphs
        assert g1.num_nodes == 2 and g1.num_edges == 1
        assert g2.num_nodes == 1 and g2.num_edges == 0
        np.testing.assert_array_equal(g1.x, [[1, 0, 0], [0, 0, 1]])
        np.testing.assert_array_equal(g2.x, [[0, 1, 0]])
        # graph labels {-1, 1} map to {0, 1} in sorted order
        assert (g1.label, g2.label) == (1, 0)
        assert ds.graph_label_alphabet == (-1, 1)

    def test_stats(self, tiny_dir):
        s = dataset_stats(parse_tudataset(tiny_dir, "TINY"))
        assert (s.num_graphs, s.num_classes, s.avg_nodes, s.avg_edges, s.feature_dim) == (2, 2, 1.5, 0.5, 3)
        assert s.row() == ["TINY", 2, 2, "1.50", "0.50", 3]

    def test_stats_csv_header(self, tiny_dir):
        rows = list(csv.reader(io.StringIO(stats_csv([dataset_stats(parse_tudataset(tiny_dir, "TINY"))]))))
        assert rows[0] == STATS_HEADER
        assert rows[1] == ["TINY", "2", "2", "1.50", "0.50", "3"]

    def test_self_loops_dropped(self, tmp_path):
        root = write_fixture(tmp_path / "T")
        (root / "TINY_A.txt").write_text("1, 2\n2, 1\n1, 1\n")
        g1 = parse_tudataset(root, "TINY").graphs[0]
        assert g1.num_edges == 1

    def test_rejects_unknown_dims_only_for_benchmark_names(self, tmp_path):
        # PROTEINS must encode to width 3; a 2-label file is rejected
        root = write_fixture(tmp_path / "P", name="PROTEINS")
        (root / "PROTEINS_node_labels.txt").write_text("0\n1\n1\n")
        with pytest.raises(ValidationError):
            parse_tudataset(root, "PROTEINS")
        assert parse_tudataset(root, "PROTEINS", validate=False).feature_dim == 2


class TestErrors:
    def test_missing_directory(self, tmp_path):
        with pytest.raises(MissingInputError) as e:
            parse_tudataset(tmp_path / "nope", "X")
        assert isinstance(e.value, FileNotFoundError)

    @pytest.mark.parametrize("suffix", ["A", "graph_indicator", "graph_labels", "node_labels"])
    def test_missing_file_named(self, tmp_path, suffix):
        root = write_fixture(tmp_path / "T")
        (root / f"TINY_{suffix}.txt").unlink()
        with pytest.raises(MissingInputError) as e:
            parse_tudataset(root, "TINY")
        assert f"TINY_{suffix}.txt" in str(e.value)

    def test_bad_line_reports_file_and_line(self, tmp_path):
        root = write_fixture(tmp_path / "T")
        (root / "TINY_A.txt").write_text("1, 2\n2; 1\n")
        with pytest.raises(FormatError) as e:
            parse_tudataset(root, "TINY")
        assert "TINY_A.txt" in str(e.value) and e.value.line == 2

    def test_edge_across_graphs(self, tmp_path):
        root = write_fixture(tmp_path / "T")
        (root / "TINY_A.txt").write_text("1, 2\n2, 3\n")
        with pytest.raises(FormatError, match="different graphs"):
            parse_tudataset(root, "TINY")

    def test_node_label_count_mismatch(self, tmp_path):
        root = write_fixture(tmp_path / "T")
        (root / "TINY_node_labels.txt").write_text("0\n2\n")
        with pytest.raises(FormatError):
            parse_tudataset(root, "TINY")

    def test_node_id_out_of_range(self, tmp_path):
        root = write_fixture(tmp_path / "T")
        (root / "TINY_A.txt").write_text("1, 9\n")
        with pytest.raises(FormatError):
            parse_tudataset(root, "TINY")

    def test_graph_without_nodes(self, tmp_path):
        root = write_fixture(tmp_path / "T")
        (root / "TINY_graph_labels.txt").write_text("1\n-1\n1\n")
        with pytest.raises(FormatError, match="no nodes"):
            parse_tudataset(root, "TINY")


class TestMutag:
    def test_stats_match_raw_count(self, mutag):
        # independent count straight from the text files
        root = DATA / "MUTAG"
        labels = (root / "MUTAG_graph_labels.txt").read_text().split()
        indicator = (root / "MUTAG_graph_indicator.txt").read_text().split()
        pairs = set()
        for line in (root / "MUTAG_A.txt").read_text().splitlines():
            i, j = (int(t) for t in line.split(","))
            if i != j:
                pairs.add((min(i, j), max(i, j)))
        node_labels = set((root / "MUTAG_node_labels.txt").read_text().split())
        s = dataset_stats(mutag)
        assert s.num_graphs == len(labels) == 188
        assert s.num_classes == len(set(labels)) == 2
        assert s.avg_nodes == pytest.approx(len(indicator) / len(labels))
        assert s.avg_edges == pytest.approx(len(pairs) / len(labels))
        assert s.feature_dim == len(node_labels) == 7
        # widely published figures for this benchmark
        assert s.row()[3:5] == ["17.93", "19.79"]

    def test_one_hot_rows(self, mutag):
        for g in mutag.graphs:
            np.testing.assert_array_equal(g.x.sum(axis=1), 1.0)

    def test_round_trip(self, mutag, tmp_path):
        write_tudataset(mutag, tmp_path / "M", "MUTAG")
        again = parse_tudataset(tmp_path / "M", "MUTAG")
        assert len(again) == len(mutag)
        for a, b in zip(mutag.graphs, again.graphs):
            np.testing.assert_array_equal(a.x, b.x)
            np.testing.assert_array_equal(a.edges, b.edges)
            assert a.label == b.label


class TestEncoding:
    def test_sorted_alphabet(self):
        x, alph = encode_node_features(np.array([5, 2, 9, 2]))
        assert alph == (2, 5, 9)
        np.testing.assert_array_equal(x, [[0, 1, 0], [1, 0, 0], [0, 0, 1], [1, 0, 0]])

    def test_fixed_alphabet(self):
        x, _ = encode_node_features(np.array([1]), alphabet=[0, 1, 2])
        np.testing.assert_array_equal(x, [[0, 1, 0]])

    def test_label_outside_alphabet(self):
        with pytest.raises(ValueError):
            encode_node_features(np.array([3]), alphabet=[0, 1, 2])


class TestGraphRecord:
    def test_edges_canonical(self):
        g = GraphRecord(np.eye(3), np.array([[2, 0], [0, 2], [1, 0]]), 0)
        np.testing.assert_array_equal(g.edges, [[0, 1], [0, 2]])

    def test_rejects_self_loop_and_range(self):
        with pytest.raises(ValueError):
            GraphRecord(np.eye(2), np.array([[1, 1]]), 0)
        with pytest.raises(ValueError):
            GraphRecord(np.eye(2), np.array([[0, 2]]), 0)

    def test_views(self):
        g = GraphRecord(np.eye(3), np.array([[0, 1], [1, 2]]), 0)
        np.testing.assert_array_equal(g.adjacency, [[0, 1, 0], [1, 0, 1], [0, 1, 0]])
        np.testing.assert_array_equal(g.attention_mask, g.adjacency + np.eye(3) > 0)
        deg = np.array([2.0, 3.0, 2.0])
        np.testing.assert_allclose(g.gcn_propagation, (g.adjacency + np.eye(3)) / np.sqrt(np.outer(deg, deg)))
        np.testing.assert_allclose(g.neighbor_mean, [[0, 1, 0], [0.5, 0, 0.5], [0, 1, 0]])

    def test_isolated_node_neighbor_mean_zero(self):
        g = GraphRecord(np.eye(2), np.empty((0, 2), dtype=int), 0)
        np.testing.assert_array_equal(g.neighbor_mean, np.zeros((2, 2)))

    def test_permuted(self):
        g = GraphRecord(np.arange(6.0).reshape(3, 2), np.array([[0, 1]]), 0)
        p = g.permuted([2, 0, 1])
        np.testing.assert_array_equal(p.x, g.x[[2, 0, 1]])
        # old edge (0, 1) becomes new (1, 2)
        np.testing.assert_array_equal(p.edges, [[1, 2]])


class TestSplits:
    @pytest.mark.parametrize("n, expected", [(1113, (779, 111, 223)), (10, (7, 1, 2)),
                                             (4110, (2877, 411, 822)), (4337, (3035, 433, 869))])
    def test_sizes(self, n, expected):
        assert split_sizes(n, SplitSpec()) == expected

    def test_partition_and_determinism(self):
        a = split_dataset(1113, SplitSpec(seed=3))
        b = split_dataset(1113, SplitSpec(seed=3))
        c = split_dataset(1113, SplitSpec(seed=4))
        assert a == b and a != c
        assert sorted(a[0] + a[1] + a[2]) == list(range(1113))

    def test_too_small(self):
        with pytest.raises(ValueError):
            split_dataset(2, SplitSpec())

    def test_bad_fractions(self):
        with pytest.raises(ValueError):
            SplitSpec(0.5, 0.5, 0.5)
        with pytest.raises(ValueError):
            SplitSpec.parse("0.8,0.2")
        assert SplitSpec.parse("0.8,0.1,0.1", seed=2) == SplitSpec(0.8, 0.1, 0.1, 2)

    @settings(max_examples=200, deadline=None)
    @given(st.integers(10, 5000))
    def test_sizes_sum(self, n):
        tr, va, te = split_sizes(n, SplitSpec())
        assert tr + va + te == n and min(tr, va, te) >= 1
        assert tr == int(np.floor(n * 0.7 + 1e-9))


class TestKFold:
    def test_equal_folds(self):
        folds = kfold(range(100), 5, seed=0)
        assert [len(v) for _, v in folds] == [20] * 5
        assert sorted(x for _, v in folds for x in v) == list(range(100))
        for tr, v in folds:
            assert set(tr).isdisjoint(v) and len(tr) + len(v) == 100

    @settings(max_examples=100, deadline=None)
    @given(st.integers(2, 10), st.integers(0, 200), st.integers(0, 2**31))
    def test_partition(self, k, extra, seed):
        n = k + extra
        folds = kfold(range(n), k, seed)
        sizes = [len(v) for _, v in folds]
        assert max(sizes) - min(sizes) <= 1
        assert sorted(x for _, v in folds for x in v) == list(range(n))

    def test_errors(self):
        with pytest.raises(ValueError):
            kfold(range(10), 1, 0)
        with pytest.raises(ValueError):
            kfold(range(3), 5, 0)


def test_synthetic_helper_balanced():
    ds = make_synthetic(40)
    assert sum(g.label for g in ds.graphs) == 20

import numpy as np
import pytest

from mpguard.errors import PreconditionError, ValidationError
from mpguard.graph import (SparseGraph, SplitSpec, apply_perturbation,
                           jaccard_preprocess, load_edge_list, save_edge_list,
                           split)


class FakePert:
    def __init__(self, insertions=(), deletions=(), budget=10):
        self.insertions = list(insertions)
        self.deletions = list(deletions)
        self.budget = budget


def random_graph(n, p, seed, n_classes=0, feat_dim=0):
    rng = np.random.default_rng(seed)
    pairs = [(u, v) for u in range(n) for v in range(u + 1, n)
             if rng.random() < p]
    labels = rng.integers(0, n_classes, size=n) if n_classes else None
    feats = rng.normal(size=(n, feat_dim)) if feat_dim else None
    return SparseGraph.from_edges(n, pairs, features=feats, labels=labels)


def assert_well_formed(g):
    # symmetry, sortedness, no self loops, no duplicates
    for u in range(g.n_nodes):
        row = g.neighbors(u)
        assert np.all(np.diff(row) > 0), "neighbor list not strictly sorted"
        assert u not in row, "self loop stored"
        for v in row:
            assert g.has_edge(int(v), u), "asymmetric adjacency"
    assert int(g.degrees.sum()) == 2 * g.n_edges


# ---------------------------------------------------------------------------
# construction


def test_from_edges_dedupes_both_directions():
    g = SparseGraph.from_edges(3, [(0, 1), (1, 2), (1, 0)])
    assert g.n_edges == 2
    assert_well_formed(g)


def test_from_edges_drops_self_loops_with_warning():
    with pytest.warns(UserWarning, match="2 self-loop"):
        g = SparseGraph.from_edges(3, [(0, 0), (1, 1), (0, 1)])
    assert g.n_edges == 1


def test_from_edges_rejects_out_of_range():
    with pytest.raises(ValidationError):
        SparseGraph.from_edges(3, [(5, 0)])


def test_reverse_edge_index_roundtrip():
    g = random_graph(12, 0.3, seed=5)
    rev = g.reverse_edge_index
    recv, send = g.receivers, g.senders
    assert np.array_equal(recv[rev], send)
    assert np.array_equal(send[rev], recv)
    assert np.array_equal(rev[rev], np.arange(rev.size))


def test_well_formed_on_random_graphs():
    for seed in range(5):
        assert_well_formed(random_graph(15, 0.25, seed))


# ---------------------------------------------------------------------------
# loading


def test_load_edge_list_formats(tmp_path):
    edges = tmp_path / "edges.txt"
    edges.write_text("0 1\n1 2\n1 0\n")
    feats = tmp_path / "features.csv"
    feats.write_text("1.0,0.0\n0.5,0.5\n0.0,1.0\n")
    labels = tmp_path / "labels.txt"
    labels.write_text("0\n1\n1\n")
    g = load_edge_list(edges, feats, labels)
    assert g.n_nodes == 3 and g.n_edges == 2
    assert g.features.shape == (3, 2)
    assert np.array_equal(g.labels, [0, 1, 1])


def test_load_edge_list_out_of_range_reports_line(tmp_path):
    edges = tmp_path / "edges.txt"
    edges.write_text("0 1\n5 0\n")
    labels = tmp_path / "labels.txt"
    labels.write_text("0\n1\n0\n")
    with pytest.raises(ValidationError, match=":2"):
        load_edge_list(edges, labels_path=labels)


def test_load_edge_list_ragged_features(tmp_path):
    feats = tmp_path / "features.csv"
    feats.write_text("1.0,2.0\n3.0\n")
    edges = tmp_path / "edges.txt"
    edges.write_text("0 1\n")
    with pytest.raises(ValidationError, match=":2"):
        load_edge_list(edges, features_path=feats)


def test_load_edge_list_label_out_of_range(tmp_path):
    edges = tmp_path / "edges.txt"
    edges.write_text("0 1\n")
    labels = tmp_path / "labels.txt"
    labels.write_text("0\n7\n")
    with pytest.raises(ValidationError, match=":2"):
        load_edge_list(edges, labels_path=labels, n_classes=2)


def test_save_load_roundtrip(tmp_path):
    g = random_graph(10, 0.3, seed=1, n_classes=3, feat_dim=4)
    save_edge_list(g, tmp_path / "e.txt", tmp_path / "x.csv", tmp_path / "y.txt")
    g2 = load_edge_list(tmp_path / "e.txt", tmp_path / "x.csv", tmp_path / "y.txt")
    assert g2.n_edges == g.n_edges
    assert np.array_equal(g2.indices, g.indices)
    assert np.allclose(g2.features, g.features)


# ---------------------------------------------------------------------------
# split


def _balanced_graph(n, n_classes, seed=0):
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % n_classes
    pairs = [(u, v) for u in range(n) for v in range(u + 1, n)
             if rng.random() < 0.1]
    return SparseGraph.from_edges(n, pairs, labels=labels)


def test_split_sizes_match_fractions():
    g = _balanced_graph(100, 4)
    s = split(g, SplitSpec(0.1, 0.1, 0.8, seed=3))
    assert int(s.train_mask.sum()) == 10
    assert int(s.val_mask.sum()) == 10
    assert int(s.test_mask.sum()) == 80
    assert not np.any(s.train_mask & s.val_mask)
    assert not np.any(s.train_mask & s.test_mask)
    assert not np.any(s.val_mask & s.test_mask)


def test_split_is_deterministic():
    g = _balanced_graph(60, 3)
    a = split(g, SplitSpec(0.2, 0.2, 0.6, seed=11))
    b = split(g, SplitSpec(0.2, 0.2, 0.6, seed=11))
    assert np.array_equal(a.train_mask, b.train_mask)
    assert np.array_equal(a.val_mask, b.val_mask)
    assert np.array_equal(a.test_mask, b.test_mask)


def test_split_is_stratified():
    g = _balanced_graph(200, 4)
    s = split(g, SplitSpec(0.1, 0.1, 0.8, seed=7))
    for c in range(4):
        in_class = s.labels == c
        assert int((s.train_mask & in_class).sum()) == 5


def test_split_rejects_bad_fractions():
    g = _balanced_graph(20, 2)
    with pytest.raises(ValidationError):
        split(g, SplitSpec(0.5, 0.6, 0.1))
    with pytest.raises(ValidationError):
        split(g, SplitSpec(0.0, 0.5, 0.5))


def test_split_rejects_class_without_training_nodes():
    labels = np.zeros(40, dtype=int)
    labels[0] = 1  # singleton class
    g = SparseGraph.from_edges(40, [(0, 1)], labels=labels)
    with pytest.raises(ValidationError, match="training nodes"):
        split(g, SplitSpec(0.025, 0.1, 0.8, seed=0))


# ---------------------------------------------------------------------------
# perturbation application


def test_empty_perturbation_is_identity():
    g = random_graph(10, 0.3, seed=2)
    g2 = apply_perturbation(g, FakePert())
    assert np.array_equal(g2.indptr, g.indptr)
    assert np.array_equal(g2.indices, g.indices)


def test_insert_then_delete_roundtrips():
    g = SparseGraph.from_edges(4, [(0, 1), (2, 3)])
    g2 = apply_perturbation(g, FakePert(insertions=[(1, 2)]))
    assert g2.has_edge(1, 2) and g2.n_edges == 3
    g3 = apply_perturbation(g2, FakePert(deletions=[(1, 2)]))
    assert np.array_equal(g3.indices, g.indices)


def test_budget_enforced():
    g = random_graph(10, 0.0, seed=0)
    ins = [(i, i + 1) for i in range(5)]
    with pytest.raises(PreconditionError, match="budget"):
        apply_perturbation(g, FakePert(insertions=ins, budget=4))


def test_insert_existing_and_delete_missing_rejected():
    g = SparseGraph.from_edges(3, [(0, 1)])
    with pytest.raises(PreconditionError):
        apply_perturbation(g, FakePert(insertions=[(0, 1)]))
    with pytest.raises(PreconditionError):
        apply_perturbation(g, FakePert(deletions=[(1, 2)]))


def test_perturbation_preserves_nodes_and_features():
    g = random_graph(12, 0.25, seed=4, feat_dim=3, n_classes=2)
    g2 = apply_perturbation(g, FakePert(insertions=[(0, 11)], budget=1))
    assert g2.n_nodes == g.n_nodes
    assert g2.features is g.features  # identity, not a copy
    assert int(g2.degrees.sum()) == 2 * g2.n_edges
    assert_well_formed(g2)


# ---------------------------------------------------------------------------
# feature-overlap edge filtering


def _binary_graph(features, pairs):
    feats = np.asarray(features, dtype=float)
    return SparseGraph.from_edges(feats.shape[0], pairs, features=feats)


def test_jaccard_keeps_identical_features():
    g = _binary_graph([[1, 1, 0], [1, 1, 0]], [(0, 1)])
    assert jaccard_preprocess(g, 1.0).n_edges == 1


def test_jaccard_removes_disjoint_support():
    g = _binary_graph([[1, 0], [0, 1]], [(0, 1)])
    assert jaccard_preprocess(g, 0.01).n_edges == 0
    assert jaccard_preprocess(g, 0.0).n_edges == 1


def test_jaccard_threshold_boundary_case():
    # overlap 1, union 3 -> similarity 1/3
    g = _binary_graph([[1, 1, 0], [1, 0, 1]], [(0, 1)])
    assert jaccard_preprocess(g, 0.4).n_edges == 0
    assert jaccard_preprocess(g, 0.3).n_edges == 1


def test_jaccard_rejects_numeric_features():
    g = _binary_graph([[1, 0], [0, 1]], [(0, 1)])
    g = g.with_features(np.array([[0.5, 0.0], [0.0, 1.0]]))
    with pytest.raises(ValidationError, match="cosine"):
        jaccard_preprocess(g, 0.1)


# ---------------------------------------------------------------------------
# mask export


def test_export_masks(tmp_path):
    g = _balanced_graph(30, 3)
    s = split(g, SplitSpec(0.2, 0.2, 0.6, seed=1))
    s.export_masks(tmp_path)
    train = np.loadtxt(tmp_path / "mask_train.txt", dtype=int)
    assert np.array_equal(np.sort(train), np.flatnonzero(s.train_mask))

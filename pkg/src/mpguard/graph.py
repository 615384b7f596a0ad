"""Immutable undirected graphs in CSR form: loading, splitting, edits.

Both directions of every undirected edge are stored; neighbor lists are
sorted and deduplicated. Self loops are never stored: models and the
defense inject the self contribution analytically.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import PreconditionError, ValidationError

Array = np.ndarray


class SparseGraph:
    """Undirected graph with optional features, labels and split masks.

    Treat instances as immutable: every mutating operation returns a new
    graph. Derived structures (reverse-edge map, adjacency sets) are cached
    lazily, which is safe because nothing is ever written back.
    """

    def __init__(self, n_nodes: int, indptr: Array, indices: Array,
                 features: Array | None = None, labels: Array | None = None,
                 train_mask: Array | None = None, val_mask: Array | None = None,
                 test_mask: Array | None = None):
        self.n_nodes = int(n_nodes)
        self.indptr = np.asarray(indptr, dtype=np.int64)
        self.indices = np.asarray(indices, dtype=np.int64)
        self.features = None if features is None else np.asarray(features, dtype=np.float64)
        self.labels = None if labels is None else np.asarray(labels, dtype=np.int64)
        self.train_mask = None if train_mask is None else np.asarray(train_mask, dtype=bool)
        self.val_mask = None if val_mask is None else np.asarray(val_mask, dtype=bool)
        self.test_mask = None if test_mask is None else np.asarray(test_mask, dtype=bool)
        self._cache: dict[str, object] = {}
        self._validate()

    # -- construction -------------------------------------------------------

    @classmethod
    def from_edges(cls, n_nodes: int, pairs, features=None, labels=None,
                   train_mask=None, val_mask=None, test_mask=None) -> "SparseGraph":
        """Build from an iterable of (u, v) pairs; dedupes and symmetrizes.

        Self loops in the input are dropped with a warning carrying the count.
        """
        n_nodes = int(n_nodes)
        seen: set[tuple[int, int]] = set()
        self_loops = 0
        for u, v in pairs:
            u, v = int(u), int(v)
            if not (0 <= u < n_nodes and 0 <= v < n_nodes):
                raise ValidationError(f"edge ({u}, {v}) outside [0, {n_nodes})")
            if u == v:
                self_loops += 1
                continue
            seen.add((u, v) if u < v else (v, u))
        if self_loops:
            warnings.warn(f"dropped {self_loops} self-loop edge(s)", stacklevel=2)
        indptr, indices = _pairs_to_csr(n_nodes, seen)
        return cls(n_nodes, indptr, indices, features, labels,
                   train_mask, val_mask, test_mask)

    def _validate(self) -> None:
        if self.indptr.shape != (self.n_nodes + 1,):
            raise ValidationError("indptr length mismatch")
        if self.indptr[0] != 0 or self.indptr[-1] != self.indices.size:
            raise ValidationError("indptr does not cover indices")
        if self.indices.size and (self.indices.min() < 0
                                  or self.indices.max() >= self.n_nodes):
            raise ValidationError("neighbor index out of range")
        if self.features is not None and self.features.shape[0] != self.n_nodes:
            raise ValidationError("feature row count != n_nodes")
        if self.labels is not None and self.labels.shape != (self.n_nodes,):
            raise ValidationError("label count != n_nodes")
        masks = [m for m in (self.train_mask, self.val_mask, self.test_mask)
                 if m is not None]
        for m in masks:
            if m.shape != (self.n_nodes,):
                raise ValidationError("mask length != n_nodes")
        for i in range(len(masks)):
            for j in range(i + 1, len(masks)):
                if np.any(masks[i] & masks[j]):
                    raise ValidationError("split masks overlap")

    # -- basic accessors -----------------------------------------------------

    @property
    def n_edges(self) -> int:
        """Undirected edge count."""
        return self.indices.size // 2

    @property
    def degrees(self) -> Array:
        return np.diff(self.indptr)

    @property
    def receivers(self) -> Array:
        """Owning node of each stored directed edge (CSR row ids)."""
        key = "receivers"
        if key not in self._cache:
            self._cache[key] = np.repeat(
                np.arange(self.n_nodes, dtype=np.int64), self.degrees)
        return self._cache[key]  # type: ignore[return-value]

    @property
    def senders(self) -> Array:
        """Neighbor of each stored directed edge (alias of indices)."""
        return self.indices

    @property
    def reverse_edge_index(self) -> Array:
        """For directed edge i = (u, v), the index of the stored (v, u)."""
        key = "reverse"
        if key not in self._cache:
            rev = np.empty(self.indices.size, dtype=np.int64)
            recv = self.receivers
            for i in range(self.indices.size):
                u, v = recv[i], self.indices[i]
                lo, hi = self.indptr[v], self.indptr[v + 1]
                rev[i] = lo + np.searchsorted(self.indices[lo:hi], u)
            self._cache[key] = rev
        return self._cache[key]  # type: ignore[return-value]

    @property
    def adjacency_sets(self) -> list[set[int]]:
        key = "adj_sets"
        if key not in self._cache:
            self._cache[key] = [
                set(self.indices[self.indptr[u]:self.indptr[u + 1]].tolist())
                for u in range(self.n_nodes)
            ]
        return self._cache[key]  # type: ignore[return-value]

    def neighbors(self, u: int) -> Array:
        return self.indices[self.indptr[u]:self.indptr[u + 1]]

    def degree(self, u: int) -> int:
        return int(self.indptr[u + 1] - self.indptr[u])

    def has_edge(self, u: int, v: int) -> bool:
        row = self.neighbors(u)
        pos = np.searchsorted(row, v)
        return pos < row.size and row[pos] == v

    def edge_pairs(self) -> Array:
        """Undirected edges as an (E, 2) array with u < v."""
        key = "pairs"
        if key not in self._cache:
            recv = self.receivers
            keep = recv < self.indices
            self._cache[key] = np.stack([recv[keep], self.indices[keep]], axis=1)
        return self._cache[key]  # type: ignore[return-value]

    # -- derived graphs ------------------------------------------------------

    def with_masks(self, train: Array, val: Array, test: Array) -> "SparseGraph":
        return SparseGraph(self.n_nodes, self.indptr, self.indices,
                           self.features, self.labels, train, val, test)

    def with_features(self, features: Array) -> "SparseGraph":
        return SparseGraph(self.n_nodes, self.indptr, self.indices,
                           features, self.labels, self.train_mask,
                           self.val_mask, self.test_mask)

    def export_masks(self, out_dir) -> None:
        """Write train/val/test node indices as three text files."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for name, mask in (("train", self.train_mask), ("val", self.val_mask),
                           ("test", self.test_mask)):
            if mask is None:
                raise ValidationError(f"graph has no {name} mask to export")
            np.savetxt(out / f"mask_{name}.txt", np.flatnonzero(mask), fmt="%d")


def _pairs_to_csr(n_nodes: int, pairs) -> tuple[Array, Array]:
    if not pairs:
        return np.zeros(n_nodes + 1, dtype=np.int64), np.zeros(0, dtype=np.int64)
    arr = np.asarray(sorted(pairs), dtype=np.int64)
    src = np.concatenate([arr[:, 0], arr[:, 1]])
    dst = np.concatenate([arr[:, 1], arr[:, 0]])
    order = np.lexsort((dst, src))
    src, dst = src[order], dst[order]
    indptr = np.zeros(n_nodes + 1, dtype=np.int64)
    counts = np.bincount(src, minlength=n_nodes)
    indptr[1:] = np.cumsum(counts)
    return indptr, dst


# ---------------------------------------------------------------------------
# Loading


def load_edge_list(edges_path, features_path=None, labels_path=None,
                   n_nodes: int | None = None,
                   n_classes: int | None = None) -> SparseGraph:
    """Load a graph from whitespace "u v" lines plus optional CSV features
    and one-label-per-line files. Errors carry 1-based line numbers."""
    labels = None
    if labels_path is not None:
        labels = _read_labels(labels_path, n_classes)
    features = None
    if features_path is not None:
        features = _read_features(features_path)
    if n_nodes is None:
        if labels is not None:
            n_nodes = labels.size
        elif features is not None:
            n_nodes = features.shape[0]
    if labels is not None and features is not None and labels.size != features.shape[0]:
        raise ValidationError(
            f"{labels.size} labels but {features.shape[0]} feature rows")

    pairs = []
    max_seen = -1
    with open(edges_path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 2:
                raise ValidationError(
                    f"{edges_path}:{lineno}: expected 'u v', got {line!r}")
            try:
                u, v = int(parts[0]), int(parts[1])
            except ValueError:
                raise ValidationError(
                    f"{edges_path}:{lineno}: non-integer node id in {line!r}")
            if u < 0 or v < 0:
                raise ValidationError(f"{edges_path}:{lineno}: negative node id")
            if n_nodes is not None and (u >= n_nodes or v >= n_nodes):
                raise ValidationError(
                    f"{edges_path}:{lineno}: node id >= {n_nodes}")
            max_seen = max(max_seen, u, v)
            pairs.append((u, v))
    if n_nodes is None:
        n_nodes = max_seen + 1
    return SparseGraph.from_edges(n_nodes, pairs, features=features, labels=labels)


def _read_labels(path, n_classes: int | None) -> Array:
    values = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                label = int(line)
            except ValueError:
                raise ValidationError(f"{path}:{lineno}: non-integer label {line!r}")
            if label < 0:
                raise ValidationError(f"{path}:{lineno}: negative label")
            if n_classes is not None and label >= n_classes:
                raise ValidationError(
                    f"{path}:{lineno}: label {label} >= {n_classes}")
            values.append(label)
    return np.asarray(values, dtype=np.int64)


def _read_features(path) -> Array:
    rows = []
    width = None
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                row = [float(x) for x in line.split(",")]
            except ValueError:
                raise ValidationError(f"{path}:{lineno}: non-numeric feature value")
            if width is None:
                width = len(row)
            elif len(row) != width:
                raise ValidationError(
                    f"{path}:{lineno}: ragged row ({len(row)} values, expected {width})")
            rows.append(row)
    return np.asarray(rows, dtype=np.float64)


def save_edge_list(graph: SparseGraph, edges_path, features_path=None,
                   labels_path=None) -> None:
    """Write the external text formats back out."""
    pairs = graph.edge_pairs()
    with open(edges_path, "w", encoding="utf-8") as fh:
        for u, v in pairs:
            fh.write(f"{u} {v}\n")
    if features_path is not None:
        if graph.features is None:
            raise ValidationError("graph has no features to save")
        np.savetxt(features_path, graph.features, delimiter=",")
    if labels_path is not None:
        if graph.labels is None:
            raise ValidationError("graph has no labels to save")
        np.savetxt(labels_path, graph.labels, fmt="%d")


# ---------------------------------------------------------------------------
# Splitting


@dataclass(frozen=True)
class SplitSpec:
    """Train/val/test fractions plus the shuffling seed."""

    train: float
    val: float
    test: float
    seed: int = 0

    def validate(self) -> None:
        for name, frac in (("train", self.train), ("val", self.val),
                           ("test", self.test)):
            if frac <= 0:
                raise ValidationError(f"{name} fraction must be positive")
        if self.train + self.val + self.test > 1.0 + 1e-9:
            raise ValidationError("split fractions sum to more than 1")


def split(graph: SparseGraph, spec: SplitSpec) -> SparseGraph:
    """Deterministic class-stratified split; returns a graph with masks."""
    spec.validate()
    if graph.labels is None:
        raise ValidationError("split requires labels")
    n = graph.n_nodes
    rng = np.random.default_rng(spec.seed)
    classes = [int(c) for c in np.unique(graph.labels)]
    sizes = {c: int((graph.labels == c).sum()) for c in classes}
    pools = {}
    for c in classes:
        nodes = np.flatnonzero(graph.labels == c)
        pools[c] = list(nodes[rng.permutation(nodes.size)])

    masks = {}
    for part, frac in (("train", spec.train), ("val", spec.val),
                       ("test", spec.test)):
        target = int(round(frac * n))
        counts = {c: int(np.floor(frac * sizes[c])) for c in classes}
        by_remainder = sorted(
            classes, key=lambda c: (-(frac * sizes[c] - counts[c]), c))
        short = target - sum(counts.values())
        for c in by_remainder[:max(short, 0)]:
            counts[c] += 1
        mask = np.zeros(n, dtype=bool)
        taken = 0
        for c in classes:
            take = min(counts[c], len(pools[c]))
            chosen, pools[c] = pools[c][:take], pools[c][take:]
            mask[chosen] = True
            taken += take
        # pool caps can leave the part short; backfill from spare classes
        for c in by_remainder:
            while taken < target and pools[c]:
                mask[pools[c].pop(0)] = True
                taken += 1
        masks[part] = mask

    for c in classes:
        if not np.any(masks["train"][graph.labels == c]):
            raise ValidationError(f"class {c} has no training nodes")
    return graph.with_masks(masks["train"], masks["val"], masks["test"])


# ---------------------------------------------------------------------------
# Structure edits


def apply_perturbation(graph: SparseGraph, pert) -> SparseGraph:
    """Apply budgeted edge insertions/deletions, returning a new graph.

    ``pert`` needs ``insertions``, ``deletions`` and ``budget`` attributes
    (see the adversary module). The original graph is untouched and shares
    its feature/label/mask arrays with the result.
    """
    insertions = [_norm_pair(p) for p in pert.insertions]
    deletions = [_norm_pair(p) for p in pert.deletions]
    if len(insertions) + len(deletions) > pert.budget:
        raise PreconditionError(
            f"{len(insertions) + len(deletions)} modifications exceed "
            f"budget {pert.budget}")
    edge_set = {tuple(p) for p in graph.edge_pairs().tolist()}
    for pair in insertions:
        if pair in edge_set:
            raise PreconditionError(f"insertion {pair} already present")
    for pair in deletions:
        if pair not in edge_set:
            raise PreconditionError(f"deletion {pair} not present")
    edge_set.difference_update(deletions)
    edge_set.update(insertions)
    indptr, indices = _pairs_to_csr(graph.n_nodes, edge_set)
    return SparseGraph(graph.n_nodes, indptr, indices, graph.features,
                       graph.labels, graph.train_mask, graph.val_mask,
                       graph.test_mask)


def _norm_pair(pair) -> tuple[int, int]:
    u, v = int(pair[0]), int(pair[1])
    if u == v:
        raise PreconditionError(f"self loop ({u}, {v}) is not a legal edit")
    return (u, v) if u < v else (v, u)


# ---------------------------------------------------------------------------
# Baseline defense: feature-overlap edge filtering


def jaccard_preprocess(graph: SparseGraph, threshold: float) -> SparseGraph:
    """Drop edges whose endpoints share too little binary-feature support.

    Keeps an edge when |x_u AND x_v| / |x_u OR x_v| >= threshold. Only
    defined for binary features; numeric features belong to the cosine
    similarity mode of the guard defense.
    """
    if graph.features is None:
        raise ValidationError("jaccard_preprocess requires features")
    x = graph.features
    if not np.all((x == 0.0) | (x == 1.0)):
        raise ValidationError(
            "jaccard_preprocess requires binary features; use the guard "
            "defense in feature-cosine mode for numeric features")
    pairs = graph.edge_pairs()
    kept = []
    for u, v in pairs:
        inter = float(np.minimum(x[u], x[v]).sum())
        union = float(np.maximum(x[u], x[v]).sum())
        sim = inter / union if union > 0 else 0.0
        if sim >= threshold:
            kept.append((int(u), int(v)))
    indptr, indices = _pairs_to_csr(graph.n_nodes, set(kept))
    return SparseGraph(graph.n_nodes, indptr, indices, graph.features,
                       graph.labels, graph.train_mask, graph.val_mask,
                       graph.test_mask)

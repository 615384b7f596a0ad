"""Graphlet orbit counting and synthetic graph generators.

Orbit counting produces the 15-orbit degree vector over connected
graphlets on at most 4 nodes (orbit 0 is plain degree, orbit 3 triangle
membership, orbit 14 K4 membership). Generators cover a homophily regime
(planted partition with label-correlated features) and a heterophily
regime (cycle with attached house motifs, labeled by structural role).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .graph import SparseGraph

Array = np.ndarray

N_ORBITS = 15


# ---------------------------------------------------------------------------
# Orbit counting


def count_orbits(graph: SparseGraph) -> Array:
    """Exact per-node orbit counts, shape (n_nodes, 15).

    Enumerates every connected induced subgraph on 3 and 4 nodes exactly
    once (exclusive-neighborhood expansion) and classifies it by its
    internal degree sequence, which is unique among connected graphlets
    of this size.
    """
    n = graph.n_nodes
    adj = graph.adjacency_sets
    counts = np.zeros((n, N_ORBITS), dtype=np.int64)
    counts[:, 0] = graph.degrees
    for root in range(n):
        closed = adj[root] | {root}
        ext = [w for w in adj[root] if w > root]
        _extend([root], ext, closed, root, adj, counts)
    return counts


def _extend(sub: list[int], ext: list[int], closed: set[int], root: int,
            adj: list[set[int]], counts: Array) -> None:
    size = len(sub)
    if size == 3:
        _classify3(sub, adj, counts)
    elif size == 4:
        _classify4(sub, adj, counts)
        return
    pool = list(ext)
    while pool:
        w = pool.pop()
        grown = [u for u in adj[w] if u > root and u not in closed]
        _extend(sub + [w], pool + grown, closed | {w} | adj[w], root, adj, counts)


def _classify3(sub: list[int], adj: list[set[int]], counts: Array) -> None:
    a, b, c = sub
    ab = b in adj[a]
    ac = c in adj[a]
    bc = c in adj[b]
    if ab and ac and bc:
        counts[a, 3] += 1
        counts[b, 3] += 1
        counts[c, 3] += 1
        return
    # two edges: the shared endpoint is the path center
    if ab and ac:
        center, ends = a, (b, c)
    elif ab and bc:
        center, ends = b, (a, c)
    else:
        center, ends = c, (a, b)
    counts[center, 2] += 1
    counts[ends[0], 1] += 1
    counts[ends[1], 1] += 1


# (edge count, max internal degree) -> orbit per internal degree
_FOUR_NODE_ORBITS = {
    (3, 2): {1: 4, 2: 5},            # path
    (3, 3): {1: 6, 3: 7},            # star
    (4, 2): {2: 8},                  # cycle
    (4, 3): {1: 9, 2: 10, 3: 11},    # triangle with a tail
    (5, 3): {2: 12, 3: 13},          # four-cycle with a chord
    (6, 3): {3: 14},                 # complete
}


def _classify4(sub: list[int], adj: list[set[int]], counts: Array) -> None:
    d = [0, 0, 0, 0]
    m = 0
    for i in range(4):
        ai = adj[sub[i]]
        for j in range(i + 1, 4):
            if sub[j] in ai:
                d[i] += 1
                d[j] += 1
                m += 1
    table = _FOUR_NODE_ORBITS[(m, max(d))]
    for i in range(4):
        counts[sub[i], table[d[i]]] += 1


def save_gdv(gdv: Array, path) -> None:
    """Write orbit counts as CSV, one node per row, 15 columns."""
    np.savetxt(path, np.asarray(gdv, dtype=np.int64), fmt="%d", delimiter=",")


def load_gdv(path) -> Array:
    return np.loadtxt(path, dtype=np.int64, delimiter=",").reshape(-1, N_ORBITS)


# ---------------------------------------------------------------------------
# Cycle-with-houses generator (heterophily benchmark)


ROLE_NAMES = (
    "cycle-mid",     # cycle nodes two steps from the nearest anchor
    "cycle-near",    # cycle nodes adjacent to an anchor
    "anchor",        # cycle node carrying a house
    "roof",          # house tip, attached to the anchor
    "house-top",     # upper square corners, adjacent to the roof
    "house-base",    # lower square corners
)


@dataclass(frozen=True)
class CycleHouseSpec:
    """Cycle of length 5*houses with one house per anchor, 10 nodes per unit."""

    houses: int | None = None
    n_nodes: int | None = None
    seed: int = 0

    def resolve_houses(self) -> int:
        if self.houses is None and self.n_nodes is None:
            raise ValidationError("cycle-house spec needs houses or n_nodes")
        houses = self.houses
        if houses is None:
            if self.n_nodes % 10 != 0:
                raise ValidationError(
                    f"n_nodes {self.n_nodes} not divisible by 10")
            houses = self.n_nodes // 10
        elif self.n_nodes is not None and self.n_nodes != 10 * houses:
            raise ValidationError(
                f"n_nodes {self.n_nodes} inconsistent with houses {houses}")
        if houses < 1:
            raise ValidationError("need at least one house")
        return houses


def gen_cycle_house(spec: CycleHouseSpec) -> SparseGraph:
    """Long cycle with evenly spaced house motifs, labeled by structural role.

    Every unit contributes five cycle nodes (anchor plus four spacers) and a
    five-node house (square plus roof) hung from the anchor by a single
    roof edge. Anchors are spaced so that each of the six roles is a single
    automorphism orbit: all nodes sharing a label are structurally
    equivalent, hence have identical graphlet degree vectors. The graph is
    featureless; downstream models consume graphlet vectors instead.
    """
    houses = spec.resolve_houses()
    n = 10 * houses
    pairs: list[tuple[int, int]] = []
    labels = np.empty(n, dtype=np.int64)
    role = {name: i for i, name in enumerate(ROLE_NAMES)}
    for i in range(houses):
        base = 10 * i
        anchor, p1, p2, p3, p4 = base, base + 1, base + 2, base + 3, base + 4
        roof, t1, t2, b1, b2 = base + 5, base + 6, base + 7, base + 8, base + 9
        next_anchor = (base + 10) % n
        pairs += [(anchor, p1), (p1, p2), (p2, p3), (p3, p4), (p4, next_anchor)]
        pairs += [(anchor, roof), (roof, t1), (roof, t2), (t1, t2),
                  (t1, b1), (t2, b2), (b1, b2)]
        labels[anchor] = role["anchor"]
        labels[p1] = labels[p4] = role["cycle-near"]
        labels[p2] = labels[p3] = role["cycle-mid"]
        labels[roof] = role["roof"]
        labels[t1] = labels[t2] = role["house-top"]
        labels[b1] = labels[b2] = role["house-base"]
    return SparseGraph.from_edges(n, pairs, labels=labels)


# ---------------------------------------------------------------------------
# Planted-partition generator (homophily benchmark)


@dataclass(frozen=True)
class SbmSpec:
    """Planted clusters with label-correlated Gaussian features.

    Features are drawn around one-hot class means scaled by ``signal``;
    ``noise`` is the per-coordinate standard deviation. With signal 0 the
    features carry no label information.
    """

    n_nodes: int = 800
    clusters: int = 4
    p_in: float = 0.05
    p_out: float = 0.002
    feat_dim: int = 16
    signal: float = 1.0
    noise: float = 0.25
    seed: int = 0

    def validate(self) -> None:
        if self.n_nodes <= 0 or self.clusters <= 0 or self.feat_dim <= 0:
            raise ValidationError("sizes must be positive")
        if self.clusters > self.n_nodes:
            raise ValidationError("more clusters than nodes")
        if self.feat_dim < self.clusters:
            raise ValidationError("feat_dim must be >= clusters")
        for name, p in (("p_in", self.p_in), ("p_out", self.p_out)):
            if not 0.0 <= p <= 1.0:
                raise ValidationError(f"{name}={p} outside [0, 1]")
        if self.noise < 0:
            raise ValidationError("noise must be nonnegative")


def gen_sbm(spec: SbmSpec) -> SparseGraph:
    """Stochastic block model with planted labels and feature homophily."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    n, k = spec.n_nodes, spec.clusters
    sizes = np.full(k, n // k, dtype=np.int64)
    sizes[: n % k] += 1
    labels = np.repeat(np.arange(k), sizes)

    prob = np.where(labels[:, None] == labels[None, :], spec.p_in, spec.p_out)
    draw = rng.random((n, n))
    upper = np.triu(draw < prob, k=1)
    us, vs = np.nonzero(upper)
    pairs = list(zip(us.tolist(), vs.tolist()))

    means = np.zeros((k, spec.feat_dim))
    means[np.arange(k), np.arange(k)] = spec.signal
    feats = means[labels] + rng.normal(0.0, spec.noise, size=(n, spec.feat_dim))
    return SparseGraph.from_edges(n, pairs, features=feats, labels=labels)


def gen_uniform_graph(n_nodes: int, n_edges: int, seed: int = 0,
                      feat_dim: int = 0) -> SparseGraph:
    """Uniform random simple graph with an exact edge count (for benchmarks)."""
    total = n_nodes * (n_nodes - 1) // 2
    if n_edges > total:
        raise ValidationError(f"{n_edges} edges exceed {total} possible pairs")
    rng = np.random.default_rng(seed)
    codes = rng.choice(total, size=n_edges, replace=False)
    # decode linear index of the upper triangle
    us = (n_nodes - 2 - np.floor(
        np.sqrt(-8.0 * codes + 4.0 * n_nodes * (n_nodes - 1) - 7) / 2.0 - 0.5
    )).astype(np.int64)
    vs = (codes + us + 1 - us * (2 * n_nodes - us - 1) // 2).astype(np.int64)
    feats = rng.normal(size=(n_nodes, feat_dim)) if feat_dim else None
    return SparseGraph.from_edges(n_nodes, zip(us.tolist(), vs.tolist()),
                                  features=feats)

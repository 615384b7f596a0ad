"""Independent numerical oracles used by the test suite.

These stay deliberately dumb: central finite differences for gradients and
exhaustive enumeration elsewhere. They never call the code paths they check.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from mpguard.autodiff import Tape, Tensor, mul, total_sum

FD_STEP = 1e-5
FD_RTOL = 1e-4


def finite_difference(f: Callable[..., float], arrays: Sequence[np.ndarray],
                      index: int, eps: float = FD_STEP) -> np.ndarray:
    """Central-difference gradient of scalar f with respect to arrays[index]."""
    work = [a.copy() for a in arrays]
    grad = np.zeros_like(work[index], dtype=np.float64)
    flat_g = grad.reshape(-1)
    flat_x = work[index].reshape(-1)
    for i in range(flat_x.size):
        orig = flat_x[i]
        flat_x[i] = orig + eps
        hi = f(*work)
        flat_x[i] = orig - eps
        lo = f(*work)
        flat_x[i] = orig
        flat_g[i] = (hi - lo) / (2.0 * eps)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = np.maximum(1.0, np.abs(numeric))
    return float(np.max(np.abs(analytic - numeric) / denom))


def check_op_gradients(op: Callable[..., Tensor],
                       arrays: Sequence[np.ndarray],
                       wrt: Sequence[int],
                       projection_seed: int = 0) -> float:
    """Compare tape gradients of proj·op(arrays) against finite differences.

    Returns the worst relative error across the checked inputs. A fixed
    random projection turns the op output into a scalar so non-uniform
    output gradients are exercised.
    """
    probe = op(*[Tensor(a) for a in arrays])
    proj = np.random.default_rng(projection_seed).normal(size=probe.data.shape)

    def scalar_fn(*args: np.ndarray) -> float:
        out = op(*[Tensor(a) for a in args])
        return float((out.data * proj).sum())

    tensors = [Tensor(a, requires_grad=(i in wrt)) for i, a in enumerate(arrays)]
    with Tape() as tape:
        out = op(*tensors)
        loss = total_sum(mul(out, Tensor(proj)))
        tape.backward(loss)

    worst = 0.0
    for i in wrt:
        assert tensors[i].grad is not None, f"no gradient for input {i}"
        numeric = finite_difference(scalar_fn, arrays, i)
        worst = max(worst, relative_error(tensors[i].grad, numeric))
    return worst


def _away_from_zero(rng: np.random.Generator, shape, low: float = 0.15) -> np.ndarray:
    """Random values with |x| >= low, keeping finite differences off kinks."""
    x = rng.uniform(low, 1.5, size=shape)
    return x * rng.choice([-1.0, 1.0], size=shape)


def gradient_check_cases():
    """(name, builder) pairs; builder(rng) -> (op, arrays, wrt_indices)."""
    import mpguard.autodiff as ad

    def matmul_case(rng):
        m, k, n = rng.integers(1, 6, size=3)
        return ad.matmul, [rng.normal(size=(m, k)), rng.normal(size=(k, n))], [0, 1]

    def spmm_case(rng):
        n, d = int(rng.integers(2, 8)), int(rng.integers(1, 5))
        dense = (rng.random((n, n)) < 0.5) * rng.normal(size=(n, n))
        indptr = np.zeros(n + 1, dtype=np.int64)
        indices, values = [], []
        for u in range(n):
            cols = np.flatnonzero(dense[u])
            indptr[u + 1] = indptr[u] + cols.size
            indices.extend(cols)
            values.extend(dense[u, cols])
        adj = ad.CSRMatrix(indptr, np.asarray(indices, dtype=np.int64),
                           np.asarray(values, dtype=np.float64), (n, n))
        return (lambda h: ad.spmm(adj, h)), [rng.normal(size=(n, d))], [0]

    def weighted_agg_case(rng):
        n, d, m = int(rng.integers(2, 8)), int(rng.integers(1, 5)), int(rng.integers(1, 12))
        recv = rng.integers(0, n, size=m)
        send = rng.integers(0, n, size=m)
        op = lambda h, w: ad.weighted_agg(h, w, recv, send)
        return op, [rng.normal(size=(n, d)), rng.normal(size=m)], [0, 1]

    def row_scale_case(rng):
        n, d = int(rng.integers(1, 7)), int(rng.integers(1, 5))
        return ad.row_scale, [rng.normal(size=(n, d)), rng.normal(size=n)], [0, 1]

    def add_case(rng):
        shape = tuple(rng.integers(1, 5, size=2))
        return ad.add, [rng.normal(size=shape), rng.normal(size=shape)], [0, 1]

    def add_scalar_case(rng):
        shape = tuple(rng.integers(1, 5, size=2))
        return ad.add, [rng.normal(size=shape), rng.normal(size=(1,))], [0, 1]

    def mul_case(rng):
        shape = tuple(rng.integers(1, 5, size=2))
        return ad.mul, [rng.normal(size=shape), rng.normal(size=shape)], [0, 1]

    def mul_scalar_case(rng):
        shape = tuple(rng.integers(1, 5, size=2))
        return ad.mul, [rng.normal(size=(1,)), rng.normal(size=shape)], [0, 1]

    def scale_case(rng):
        c = float(rng.normal())
        return (lambda x: ad.scale(x, c)), [rng.normal(size=(3, 2))], [0]

    def relu_case(rng):
        return ad.relu, [_away_from_zero(rng, (4, 3))], [0]

    def sigmoid_case(rng):
        return ad.sigmoid, [rng.normal(size=(4, 3)) * 2.0], [0]

    def reciprocal_case(rng):
        return ad.reciprocal_or_zero, [rng.uniform(0.4, 2.0, size=6)], [0]

    def rsqrt_case(rng):
        return ad.rsqrt_or_zero, [rng.uniform(0.4, 2.0, size=6)], [0]

    def gather_case(rng):
        n, d, m = int(rng.integers(2, 7)), int(rng.integers(1, 4)), int(rng.integers(1, 10))
        idx = rng.integers(0, n, size=m)
        return (lambda x: ad.gather_rows(x, idx)), [rng.normal(size=(n, d))], [0]

    def gather_1d_case(rng):
        n, m = int(rng.integers(2, 7)), int(rng.integers(1, 10))
        idx = rng.integers(0, n, size=m)
        return (lambda x: ad.gather_rows(x, idx)), [rng.normal(size=n)], [0]

    def segment_sum_case(rng):
        m, n = int(rng.integers(1, 12)), int(rng.integers(1, 6))
        seg = rng.integers(0, n, size=m)
        return (lambda x: ad.segment_sum(x, seg, n)), [rng.normal(size=m)], [0]

    def row_sum_case(rng):
        n, d = int(rng.integers(1, 6)), int(rng.integers(1, 5))
        return ad.row_sum, [rng.normal(size=(n, d))], [0]

    def total_sum_case(rng):
        return ad.total_sum, [rng.normal(size=(3, 4))], [0]

    def column_stack_case(rng):
        m = int(rng.integers(1, 8))
        return ad.column_stack2, [rng.normal(size=m), rng.normal(size=m)], [0, 1]

    def reshape_case(rng):
        return (lambda x: ad.reshape(x, (6,))), [rng.normal(size=(2, 3))], [0]

    def dropout_case(rng):
        # deterministic mask: the op re-seeds identically on every call
        seed = int(rng.integers(0, 2**31))
        op = lambda x: ad.dropout(x, 0.5, np.random.default_rng(seed), True)
        return op, [rng.normal(size=(4, 3))], [0]

    def cross_entropy_case(rng):
        n, c = int(rng.integers(2, 7)), int(rng.integers(2, 5))
        labels = rng.integers(0, c, size=n)
        mask = rng.random(n) < 0.7
        if not mask.any():
            mask[0] = True
        op = lambda z: ad.softmax_cross_entropy(z, labels, mask)
        return op, [rng.normal(size=(n, c))], [0]

    return [
        ("matmul", matmul_case),
        ("spmm", spmm_case),
        ("weighted_agg", weighted_agg_case),
        ("row_scale", row_scale_case),
        ("add", add_case),
        ("add_scalar", add_scalar_case),
        ("mul", mul_case),
        ("mul_scalar", mul_scalar_case),
        ("scale", scale_case),
        ("relu", relu_case),
        ("sigmoid", sigmoid_case),
        ("reciprocal_or_zero", reciprocal_case),
        ("rsqrt_or_zero", rsqrt_case),
        ("gather_rows", gather_case),
        ("gather_rows_1d", gather_1d_case),
        ("segment_sum", segment_sum_case),
        ("row_sum", row_sum_case),
        ("total_sum", total_sum_case),
        ("column_stack2", column_stack_case),
        ("reshape", reshape_case),
        ("dropout", dropout_case),
        ("softmax_cross_entropy", cross_entropy_case),
    ]


def run_gradient_suite(n_instances: int = 20, seed: int = 1234) -> dict[str, float]:
    """Worst relative FD error per op over n random instances."""
    results = {}
    for name, builder in gradient_check_cases():
        rng = np.random.default_rng(seed)
        worst = 0.0
        for k in range(n_instances):
            op, arrays, wrt = builder(rng)
            worst = max(worst, check_op_gradients(op, arrays, wrt,
                                                  projection_seed=seed + k))
        results[name] = worst
    return results


# ---------------------------------------------------------------------------
# Brute-force graphlet orbit oracle: subgraph-isomorphism against reference
# graphlets over every 3- and 4-node subset. Independent of the package's
# enumeration-based counter.

from itertools import combinations, permutations

_REF_GRAPHLETS = [
    # (size, frozenset of edges on nodes 0..size-1, orbit id per node)
    (3, frozenset({(0, 1), (1, 2)}), (1, 2, 1)),                       # path
    (3, frozenset({(0, 1), (0, 2), (1, 2)}), (3, 3, 3)),               # triangle
    (4, frozenset({(0, 1), (1, 2), (2, 3)}), (4, 5, 5, 4)),            # path
    (4, frozenset({(0, 1), (0, 2), (0, 3)}), (7, 6, 6, 6)),            # star
    (4, frozenset({(0, 1), (1, 2), (2, 3), (0, 3)}), (8, 8, 8, 8)),    # cycle
    (4, frozenset({(0, 1), (0, 2), (1, 2), (2, 3)}), (10, 10, 11, 9)), # paw
    (4, frozenset({(0, 1), (0, 2), (1, 2), (1, 3), (2, 3)}),
     (12, 13, 13, 12)),                                                # diamond
    (4, frozenset({(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)}),
     (14, 14, 14, 14)),                                                # complete
]


def _induced_edges(subset, adj_sets):
    edges = set()
    for i, u in enumerate(subset):
        for j in range(i + 1, len(subset)):
            if subset[j] in adj_sets[u]:
                edges.add((i, j))
    return frozenset(edges)


def _is_connected(subset, edges):
    k = len(subset)
    seen = {0}
    frontier = [0]
    neigh = {i: set() for i in range(k)}
    for a, b in edges:
        neigh[a].add(b)
        neigh[b].add(a)
    while frontier:
        x = frontier.pop()
        for y in neigh[x]:
            if y not in seen:
                seen.add(y)
                frontier.append(y)
    return len(seen) == k


def brute_force_orbits(graph):
    """Orbit counts via exhaustive isomorphism matching (graphs <= ~14 nodes)."""
    n = graph.n_nodes
    adj = graph.adjacency_sets
    counts = np.zeros((n, 15), dtype=np.int64)
    counts[:, 0] = graph.degrees
    for size in (3, 4):
        refs = [(e, orb) for s, e, orb in _REF_GRAPHLETS if s == size]
        for subset in combinations(range(n), size):
            edges = _induced_edges(subset, adj)
            if not edges or not _is_connected(subset, edges):
                continue
            matched = False
            for ref_edges, orbits in refs:
                if len(ref_edges) != len(edges):
                    continue
                for perm in permutations(range(size)):
                    mapped = frozenset(tuple(sorted((perm[a], perm[b])))
                                       for a, b in edges)
                    if mapped == ref_edges:
                        for pos, node in enumerate(subset):
                            counts[node, orbits[perm[pos]]] += 1
                        matched = True
                        break
                if matched:
                    break
            assert matched, f"unclassified induced subgraph on {subset}"
    return counts

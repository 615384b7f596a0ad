"""Similarity-gated message-passing defense.

Per layer, every directed edge gets an importance weight derived from the
cosine similarity of its endpoint embeddings (or of their graphlet degree
vectors on heterophily graphs), normalized so that each node's closed
neighborhood forms a convex combination. A learned two-feature score can
prune edges outright, and a learned memory coefficient blends each layer's
coefficients with the previous layer's, smoothing how the effective graph
evolves. The resulting coefficients replace the model's own aggregation
weights; the message content itself is untouched.

Gradient handling: coefficients are recomputed inside the tape on every
forward pass, so gradients reach the embeddings through the similarity and
normalization path. The hard pruning indicator is held constant in
backward; the pruning score stays trainable through a small auxiliary
penalty on the scores of currently pruned edges.
"""
from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, sigmoid_array
from .errors import ShapeError, StateError, ValidationError
from .graph import SparseGraph

Array = np.ndarray

DEFAULT_PRUNE_THRESHOLD = 0.5
PRUNE_PENALTY_COEF = 1e-3


# ---------------------------------------------------------------------------
# Plain-array reference operations (also used for traces and tests)


def similarity(h_u: Array, h_v: Array) -> float:
    """Cosine similarity; 0 when either vector has zero norm."""
    h_u = np.asarray(h_u, dtype=np.float64)
    h_v = np.asarray(h_v, dtype=np.float64)
    if h_u.shape != h_v.shape or h_u.ndim != 1:
        raise ShapeError(f"similarity: {h_u.shape} vs {h_v.shape}")
    nu = float(np.linalg.norm(h_u))
    nv = float(np.linalg.norm(h_v))
    if nu == 0.0 or nv == 0.0:
        return 0.0
    return float(h_u @ h_v) / (nu * nv)


def edge_similarities(embeddings: Array, graph: SparseGraph) -> Array:
    """Cosine similarity per stored directed edge."""
    recv, send = graph.receivers, graph.senders
    a = embeddings[recv]
    b = embeddings[send]
    dots = np.einsum("ij,ij->i", a, b)
    norms = np.einsum("ij,ij->i", a, a) * np.einsum("ij,ij->i", b, b)
    out = np.zeros(dots.size)
    pos = norms > 0.0
    out[pos] = dots[pos] / np.sqrt(norms[pos])
    return out


def estimate_importance(embeddings: Array, graph: SparseGraph,
                        similarities: Array | None = None
                        ) -> tuple[Array, Array, Array]:
    """Per-edge importance weights and per-node self weights.

    Similarities are clamped at zero. For a node with ``nhat`` strictly
    positive neighbor similarities, the neighbor weights are the clamped
    similarities normalized to sum to nhat/(nhat+1) and the self weight is
    1/(nhat+1), so the closed neighborhood is a convex combination. A node
    with no positive similarity keeps weight 1 on itself.

    Returns (alpha_edges, alpha_self, nhat).
    """
    n = graph.n_nodes
    s = edge_similarities(embeddings, graph) if similarities is None \
        else np.asarray(similarities, dtype=np.float64)
    s_plus = np.maximum(s, 0.0)
    recv = graph.receivers
    sums = np.bincount(recv, weights=s_plus, minlength=n)
    nhat = np.bincount(recv[s_plus > 0.0], minlength=n).astype(np.int64)
    ratio = nhat / (nhat + 1.0)
    inv = np.where(sums > 0.0, 1.0 / np.where(sums > 0.0, sums, 1.0), 0.0)
    alpha = s_plus * (inv * ratio)[recv]
    alpha_self = 1.0 / (nhat + 1.0)
    return alpha, alpha_self, nhat


def prune(alpha: Array, reverse_index: Array, weights: Array,
          threshold: float) -> tuple[Array, Array, Array]:
    """Zero out edges whose two-feature score falls below the threshold.

    Each directed edge is scored from its own ordered pair
    [alpha_uv, alpha_vu]; surviving edges keep their weight exactly.
    Returns (alpha_hat, score, keep_mask).
    """
    w = np.asarray(weights, dtype=np.float64).reshape(2)
    score = sigmoid_array(alpha * w[0] + alpha[reverse_index] * w[1])
    keep = score >= threshold
    alpha_hat = np.where(keep, alpha, 0.0)
    return alpha_hat, score, keep


def memory_update(omega_prev: Array | None, alpha_hat: Array, beta: float,
                  layer: int) -> Array:
    """Blend the previous layer's coefficients into the current ones.

    Layer 0 ignores the memory entirely (the blend coefficient is forced
    to zero there); later layers return
    ``beta * omega_prev + (1 - beta) * alpha_hat`` elementwise.
    """
    if not 0.0 <= beta <= 1.0:
        raise StateError(f"memory coefficient {beta} outside [0, 1]")
    if layer < 0:
        raise StateError(f"negative layer index {layer}")
    if layer == 0:
        return np.asarray(alpha_hat, dtype=np.float64).copy()
    if omega_prev is None:
        raise StateError("memory_update needs previous coefficients past layer 0")
    return beta * np.asarray(omega_prev) + (1.0 - beta) * np.asarray(alpha_hat)


def graphlet_similarity(u: int, v: int, gdv: Array) -> float:
    """Cosine similarity of log-scaled orbit-count vectors."""
    gdv = np.asarray(gdv)
    if u >= gdv.shape[0] or v >= gdv.shape[0]:
        raise StateError(f"graphlet vectors missing for node {max(u, v)}")
    return similarity(np.log1p(gdv[u]), np.log1p(gdv[v]))


def graphlet_edge_similarities(gdv: Array, graph: SparseGraph) -> Array:
    if gdv.shape[0] != graph.n_nodes:
        raise StateError(
            f"graphlet table covers {gdv.shape[0]} nodes, graph has "
            f"{graph.n_nodes}")
    return edge_similarities(np.log1p(np.asarray(gdv, dtype=np.float64)), graph)


# ---------------------------------------------------------------------------
# Guard state


class GuardState:
    """Defense parameters and per-layer trace for one guarded model.

    ``mode`` selects the similarity source: "feature" compares per-layer
    embeddings, "graphlet" compares fixed graphlet degree vectors (supply
    ``gdv``). The pruning map is initialized at zero, which scores every
    edge exactly at the keep/prune boundary and therefore prunes nothing
    until training moves it.
    """

    def __init__(self, n_layers: int, threshold: float = DEFAULT_PRUNE_THRESHOLD,
                 mode: str = "feature", gdv: Array | None = None,
                 prune_enabled: bool = True, memory_enabled: bool = True,
                 penalty_coef: float = PRUNE_PENALTY_COEF):
        if n_layers <= 0:
            raise ValidationError("guard needs at least one layer")
        if mode not in ("feature", "graphlet"):
            raise ValidationError(f"unknown similarity mode {mode!r}")
        if mode == "graphlet" and gdv is None:
            raise ValidationError("graphlet mode requires a gdv table")
        self.n_layers = int(n_layers)
        self.threshold = float(threshold)
        self.mode = mode
        self.gdv = None if gdv is None else np.asarray(gdv, dtype=np.float64)
        self.prune_enabled = bool(prune_enabled)
        self.memory_enabled = bool(memory_enabled)
        self.penalty_coef = float(penalty_coef)
        # 2 -> 1 linear map over [alpha_uv, alpha_vu]; no bias
        self.prune_weights = Tensor(np.zeros((2, 1)), requires_grad=True)
        # memory coefficient, squashed to (0, 1); logit(0.5) start
        self.memory_raw = Tensor(np.zeros(()), requires_grad=True)
        self.layer_traces: list[dict] = []
        self._penalty: Tensor | None = None

    # -- parameters ----------------------------------------------------------

    def named_params(self):
        return [("guard.prune_weights", self.prune_weights),
                ("guard.memory_raw", self.memory_raw)]

    def params(self) -> list[Tensor]:
        return [self.prune_weights, self.memory_raw]

    def trainable_params(self) -> list[Tensor]:
        out = []
        if self.prune_enabled:
            out.append(self.prune_weights)
        if self.memory_enabled and self.n_layers > 1:
            out.append(self.memory_raw)
        return out

    @property
    def beta(self) -> float:
        """Current memory coefficient value."""
        if not self.memory_enabled:
            return 0.0
        return float(sigmoid_array(self.memory_raw.data.reshape(1))[0])

    def consume_penalty(self) -> Tensor | None:
        penalty, self._penalty = self._penalty, None
        return penalty

    def reset_traces(self) -> None:
        self.layer_traces = []


# ---------------------------------------------------------------------------
# In-tape pipeline


def _tape_similarities(h: Tensor, graph: SparseGraph) -> Tensor:
    """Per-edge cosine similarity with gradients into the embeddings."""
    recv, send = graph.receivers, graph.senders
    a = ad.gather_rows(h, recv)
    b = ad.gather_rows(h, send)
    dots = ad.row_sum(ad.mul(a, b))
    na = ad.row_sum(ad.mul(a, a))
    nb = ad.row_sum(ad.mul(b, b))
    return ad.mul(dots, ad.rsqrt_or_zero(ad.mul(na, nb)))


def _tape_importance(s: Tensor, graph: SparseGraph
                     ) -> tuple[Tensor, Array, Array]:
    """Importance weights inside the tape; self weights are constants."""
    recv = graph.receivers
    n = graph.n_nodes
    s_plus = ad.relu(s)
    sums = ad.segment_sum(s_plus, recv, n)
    nhat = np.bincount(recv[s_plus.data > 0.0], minlength=n).astype(np.int64)
    ratio = nhat / (nhat + 1.0)
    coeff = ad.mul(ad.reciprocal_or_zero(sums), Tensor(ratio))
    alpha = ad.mul(s_plus, ad.gather_rows(coeff, recv))
    alpha_self = 1.0 / (nhat + 1.0)
    return alpha, alpha_self, nhat


def guarded_forward(model, graph: SparseGraph, guard: GuardState) -> Tensor:
    """Forward pass with defense coefficients driving every aggregation."""
    if guard.n_layers != model.n_layers:
        raise ShapeError(
            f"guard has {guard.n_layers} layers, model has {model.n_layers}")
    if graph.features is None:
        raise ValidationError("guarded forward requires node features")
    if guard.mode == "graphlet" and guard.gdv is None:
        raise StateError("graphlet mode requires a gdv table")

    n, m = graph.n_nodes, graph.indices.size
    recv, send = graph.receivers, graph.senders
    rev = graph.reverse_edge_index
    graphlet_s = None
    if guard.mode == "graphlet":
        graphlet_s = graphlet_edge_similarities(guard.gdv, graph)

    guard.reset_traces()
    penalty_terms: list[Tensor] = []
    h = Tensor(graph.features)
    omega_prev_e: Tensor | None = None
    omega_prev_s: Tensor | None = None

    for k, layer in enumerate(model.layers):
        if graphlet_s is not None:
            s = Tensor(graphlet_s)
        else:
            s = _tape_similarities(h, graph)
        alpha, alpha_self_arr, nhat = _tape_importance(s, graph)

        if guard.prune_enabled and m > 0:
            c = ad.column_stack2(alpha, ad.gather_rows(alpha, rev))
            score = ad.reshape(ad.matmul(c, guard.prune_weights), (m,))
            score = ad.sigmoid(score)
            keep = score.data >= guard.threshold
            alpha_hat = ad.mul(alpha, Tensor(keep.astype(np.float64)))
            pruned_mask = (~keep).astype(np.float64)
            penalty_terms.append(
                ad.scale(ad.total_sum(ad.mul(score, Tensor(pruned_mask))),
                         guard.penalty_coef))
            score_arr = score.data.copy()
        else:
            keep = np.ones(m, dtype=bool)
            alpha_hat = alpha
            score_arr = np.full(m, 0.5)

        alpha_self = Tensor(alpha_self_arr)
        use_memory = guard.memory_enabled and k > 0
        if use_memory:
            beta_t = ad.sigmoid(ad.reshape(guard.memory_raw, (1,)))
            one_minus = ad.add(1.0, ad.scale(beta_t, -1.0))
            omega_e = ad.add(ad.mul(beta_t, omega_prev_e),
                             ad.mul(one_minus, alpha_hat))
            omega_s = ad.add(ad.mul(beta_t, omega_prev_s),
                             ad.mul(one_minus, alpha_self))
            beta_value = float(beta_t.data[0])
        else:
            omega_e, omega_s = alpha_hat, alpha_self
            beta_value = 0.0

        guard.layer_traces.append({
            "similarity": s.data.copy(),
            "alpha": alpha.data.copy(),
            "alpha_self": alpha_self_arr.copy(),
            "alpha_hat": alpha_hat.data.copy(),
            "score": score_arr,
            "keep": keep.copy(),
            "omega": omega_e.data.copy(),
            "omega_self": omega_s.data.copy(),
            "beta": beta_value,
            "nhat": nhat.copy(),
        })

        hd = ad.dropout(h, model.dropout, model.dropout_rng, model.training)
        z = ad.add(ad.row_scale(hd, omega_s),
                   ad.weighted_agg(hd, omega_e, recv, send))
        h = layer.transform(z)
        omega_prev_e, omega_prev_s = omega_e, omega_s

    if penalty_terms:
        total = penalty_terms[0]
        for term in penalty_terms[1:]:
            total = ad.add(total, term)
        guard._penalty = total
    else:
        guard._penalty = None
    return h


# ---------------------------------------------------------------------------
# Trace export


def export_trace(guard: GuardState, graph: SparseGraph, out_dir) -> list[Path]:
    """Write one CSV per layer with per-edge defense quantities."""
    if not guard.layer_traces:
        raise StateError("no traces recorded; run a guarded forward first")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    recv, send = graph.receivers, graph.senders
    paths = []
    for k, trace in enumerate(guard.layer_traces):
        path = out / f"guard_layer_{k}.csv"
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["u", "v", "s", "alpha", "score", "pruned", "omega"])
            for e in range(recv.size):
                writer.writerow([
                    int(recv[e]), int(send[e]),
                    f"{trace['similarity'][e]:.12g}",
                    f"{trace['alpha'][e]:.12g}",
                    f"{trace['score'][e]:.12g}",
                    int(not trace["keep"][e]),
                    f"{trace['omega'][e]:.12g}",
                ])
        paths.append(path)
    return paths

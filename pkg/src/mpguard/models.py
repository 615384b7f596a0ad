"""Message-passing models (GCN, GIN), training loop, and checkpoints.

A layer is split into the usual three pieces: the message is the sender's
embedding, aggregation is a weighted sum over the open neighborhood plus a
weighted self term, and the update is the layer's learned transform. The
aggregation weights come either from the model's standard normalization or,
when a guard is attached, from the defense coefficients computed per layer.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Adam, CSRMatrix, Tape, Tensor
from .errors import (PreconditionError, ShapeError, TrainingError,
                     ValidationError)
from .graph import SparseGraph

Array = np.ndarray


@dataclass(frozen=True)
class LayerSpec:
    in_dim: int
    out_dim: int
    kind: str = "gcn"  # "gcn" | "gin"
    activation: bool = True

    def validate(self) -> None:
        if self.in_dim <= 0 or self.out_dim <= 0:
            raise ValidationError(f"layer dims must be positive, got {self}")
        if self.kind not in ("gcn", "gin"):
            raise ValidationError(f"unknown layer kind {self.kind!r}")


class GCNLayer:
    """h' = act(Z W); Z is the normalized aggregation of the previous layer."""

    def __init__(self, spec: LayerSpec, rng: np.random.Generator):
        spec.validate()
        self.spec = spec
        self.weight = Tensor(
            ad.uniform_init(rng, spec.in_dim, (spec.in_dim, spec.out_dim)),
            requires_grad=True)

    def transform(self, z: Tensor) -> Tensor:
        out = ad.matmul(z, self.weight)
        return ad.relu(out) if self.spec.activation else out

    def named_params(self):
        return [("weight", self.weight)]


class GINLayer:
    """h' = MLP(Z); sum aggregation with epsilon fixed at 0.

    The MLP has one hidden layer of the output width, with biases realized
    as a ones-column product so the kernel's broadcasting stays minimal.
    """

    def __init__(self, spec: LayerSpec, rng: np.random.Generator):
        spec.validate()
        self.spec = spec
        d_in, d_out = spec.in_dim, spec.out_dim
        self.w1 = Tensor(ad.uniform_init(rng, d_in, (d_in, d_out)), requires_grad=True)
        self.b1 = Tensor(np.zeros((1, d_out)), requires_grad=True)
        self.w2 = Tensor(ad.uniform_init(rng, d_out, (d_out, d_out)), requires_grad=True)
        self.b2 = Tensor(np.zeros((1, d_out)), requires_grad=True)

    def transform(self, z: Tensor) -> Tensor:
        ones = Tensor(np.ones((z.shape[0], 1)))
        hidden = ad.relu(ad.add(ad.matmul(z, self.w1), ad.matmul(ones, self.b1)))
        out = ad.add(ad.matmul(hidden, self.w2), ad.matmul(ones, self.b2))
        return ad.relu(out) if self.spec.activation else out

    def named_params(self):
        return [("w1", self.w1), ("b1", self.b1), ("w2", self.w2), ("b2", self.b2)]


def make_gcn_layer(spec: LayerSpec, rng: np.random.Generator) -> GCNLayer:
    return GCNLayer(spec, rng)


def make_gin_layer(spec: LayerSpec, rng: np.random.Generator) -> GINLayer:
    return GINLayer(spec, rng)


_LAYER_FACTORIES = {"gcn": make_gcn_layer, "gin": make_gin_layer}


class Model:
    """An ordered stack of message-passing layers plus training state."""

    def __init__(self, specs: list[LayerSpec], seed: int = 0, dropout: float = 0.5):
        if not specs:
            raise ValidationError("model needs at least one layer")
        for a, b in zip(specs, specs[1:]):
            if a.out_dim != b.in_dim:
                raise ValidationError(f"layer dims do not chain: {a} -> {b}")
        self.specs = list(specs)
        self.seed = int(seed)
        self.dropout = float(dropout)
        self.training = False
        self.guard = None
        rng = np.random.default_rng(seed)
        self.layers = [_LAYER_FACTORIES[s.kind](s, rng) for s in specs]
        self.dropout_rng = np.random.default_rng(seed)

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    @property
    def out_dim(self) -> int:
        return self.specs[-1].out_dim

    def reset_dropout_rng(self, seed: int) -> None:
        self.dropout_rng = np.random.default_rng(seed)

    def attach_guard(self, guard) -> None:
        if guard is not None and guard.n_layers != self.n_layers:
            raise ShapeError(
                f"guard has {guard.n_layers} layers, model has {self.n_layers}")
        self.guard = guard

    def named_params(self):
        out = []
        for i, layer in enumerate(self.layers):
            for name, p in layer.named_params():
                out.append((f"layers.{i}.{name}", p))
        if self.guard is not None:
            out.extend(self.guard.named_params())
        return out

    def parameters(self) -> list[Tensor]:
        """Optimizable tensors: layer weights plus the guard's active ones."""
        params = []
        for layer in self.layers:
            params.extend(p for _, p in layer.named_params())
        if self.guard is not None:
            params.extend(self.guard.trainable_params())
        return params

    def state_dict(self) -> dict[str, Array]:
        return {name: p.data.copy() for name, p in self.named_params()}

    def load_state_dict(self, state: dict[str, Array]) -> None:
        for name, p in self.named_params():
            if name not in state:
                raise ValidationError(f"missing parameter {name!r} in state")
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != p.data.shape:
                raise ShapeError(
                    f"{name}: checkpoint shape {value.shape} != {p.data.shape}")
            p.data = value.copy()


def build_model(in_dim: int, hidden_dims, n_classes: int, kind: str = "gcn",
                seed: int = 0, dropout: float = 0.5) -> Model:
    """Convenience constructor for the usual relu-separated stack."""
    dims = [in_dim, *hidden_dims, n_classes]
    specs = [LayerSpec(dims[i], dims[i + 1], kind, activation=(i < len(dims) - 2))
             for i in range(len(dims) - 1)]
    return Model(specs, seed=seed, dropout=dropout)


# ---------------------------------------------------------------------------
# Standard aggregation matrices (cached per graph)


def gcn_norm_csr(graph: SparseGraph) -> CSRMatrix:
    """Symmetric normalization with the self term folded in."""
    key = "gcn_norm"
    if key not in graph._cache:
        n = graph.n_nodes
        deg_hat = graph.degrees.astype(np.float64) + 1.0
        inv_sqrt = 1.0 / np.sqrt(deg_hat)
        indptr = np.zeros(n + 1, dtype=np.int64)
        indices = np.empty(graph.indices.size + n, dtype=np.int64)
        values = np.empty(indices.size, dtype=np.float64)
        pos = 0
        for u in range(n):
            row = graph.neighbors(u)
            insert = int(np.searchsorted(row, u))
            chunk = np.concatenate([row[:insert], [u], row[insert:]])
            vals = inv_sqrt[u] * inv_sqrt[chunk]
            indices[pos:pos + chunk.size] = chunk
            values[pos:pos + chunk.size] = vals
            pos += chunk.size
            indptr[u + 1] = pos
        graph._cache[key] = CSRMatrix(indptr, indices, values, (n, n))
    return graph._cache[key]  # type: ignore[return-value]


def plain_csr(graph: SparseGraph) -> CSRMatrix:
    key = "plain_adj"
    if key not in graph._cache:
        graph._cache[key] = CSRMatrix(
            graph.indptr, graph.indices,
            np.ones(graph.indices.size, dtype=np.float64),
            (graph.n_nodes, graph.n_nodes))
    return graph._cache[key]  # type: ignore[return-value]


# ---------------------------------------------------------------------------
# Forward


def forward(model: Model, graph: SparseGraph, edge_weights=None) -> Tensor:
    """Full-graph forward pass returning logits.

    ``edge_weights`` optionally supplies per-layer aggregation weights as
    (self_weights[n], edge_weights[m]) tensors, one pair per layer, which
    replace the model's standard normalization. With a guard attached and
    no explicit weights, the defense computes them layer by layer.
    """
    if graph.features is None:
        raise ValidationError("graph has no node features")
    if graph.features.shape[1] != model.specs[0].in_dim:
        raise ShapeError(
            f"feature dim {graph.features.shape[1]} != layer-0 in_dim "
            f"{model.specs[0].in_dim}")
    if edge_weights is not None:
        return _forward_with_weights(model, graph, edge_weights)
    if model.guard is not None:
        from .guard import guarded_forward
        return guarded_forward(model, graph, model.guard)
    return _forward_standard(model, graph)


def _forward_standard(model: Model, graph: SparseGraph) -> Tensor:
    h = Tensor(graph.features)
    for layer in model.layers:
        hd = ad.dropout(h, model.dropout, model.dropout_rng, model.training)
        if layer.spec.kind == "gcn":
            z = ad.spmm(gcn_norm_csr(graph), hd)
        else:
            z = ad.add(hd, ad.spmm(plain_csr(graph), hd))
        h = layer.transform(z)
    return h


def _forward_with_weights(model: Model, graph: SparseGraph, edge_weights) -> Tensor:
    if len(edge_weights) != model.n_layers:
        raise ShapeError(
            f"{len(edge_weights)} weight pairs for {model.n_layers} layers")
    m = graph.indices.size
    recv, send = graph.receivers, graph.senders
    h = Tensor(graph.features)
    for layer, (w_self, w_edge) in zip(model.layers, edge_weights):
        if w_edge.shape != (m,) or w_self.shape != (graph.n_nodes,):
            raise ShapeError(
                f"weights {w_self.shape}/{w_edge.shape} do not match "
                f"{graph.n_nodes} nodes / {m} directed edges")
        hd = ad.dropout(h, model.dropout, model.dropout_rng, model.training)
        z = ad.add(ad.row_scale(hd, w_self),
                   ad.weighted_agg(hd, w_edge, recv, send))
        h = layer.transform(z)
    return h


def predict_logits(model: Model, graph: SparseGraph) -> Array:
    """Inference-mode logits as a plain array."""
    was_training = model.training
    model.training = False
    try:
        return forward(model, graph).data
    finally:
        model.training = was_training


# ---------------------------------------------------------------------------
# Training and evaluation


@dataclass
class TrainConfig:
    epochs: int = 200
    patience: int = 10
    lr: float = 0.01
    seed: int = 0
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8


@dataclass
class History:
    epochs: list[dict] = field(default_factory=list)
    best_epoch: int = -1
    best_val: float = -1.0


def train(model: Model, graph: SparseGraph, config: TrainConfig | None = None
          ) -> History:
    """Optimize masked cross-entropy with early stopping on validation
    accuracy; the model is left at its best-validation checkpoint."""
    config = config or TrainConfig()
    if graph.train_mask is None or graph.val_mask is None:
        raise PreconditionError("train requires train and val masks")
    if graph.labels is None:
        raise ValidationError("train requires labels")
    n_classes = int(graph.labels.max()) + 1
    if model.out_dim < n_classes:
        raise ValidationError(
            f"final layer width {model.out_dim} < {n_classes} classes")
    model.reset_dropout_rng(config.seed)
    params = model.parameters()
    opt = Adam(params, lr=config.lr, betas=config.adam_betas, eps=config.adam_eps)

    history = History()
    best_state: dict[str, Array] | None = None
    stall = 0
    for epoch in range(config.epochs):
        model.training = True
        with Tape() as tape:
            logits = forward(model, graph)
            loss = ad.softmax_cross_entropy(logits, graph.labels, graph.train_mask)
            if model.guard is not None:
                penalty = model.guard.consume_penalty()
                if penalty is not None:
                    loss = ad.add(loss, penalty)
            loss_value = loss.item()
            if not np.isfinite(loss_value):
                raise TrainingError(f"loss diverged at epoch {epoch}", epoch=epoch)
            tape.backward(loss)
        model.training = False
        opt.step()

        val_acc = evaluate(model, graph, graph.val_mask)
        history.epochs.append(
            {"epoch": epoch, "loss": loss_value, "val_acc": val_acc})
        if val_acc > history.best_val:
            history.best_val = val_acc
            history.best_epoch = epoch
            best_state = model.state_dict()
            stall = 0
        else:
            stall += 1
            if stall >= config.patience:
                break
    if best_state is not None:
        model.load_state_dict(best_state)
    return history


def evaluate(model: Model, graph: SparseGraph, mask: Array) -> float:
    """Argmax accuracy over masked nodes; ties resolve to the lower class."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise PreconditionError("evaluate: empty mask")
    if graph.labels is None:
        raise ValidationError("evaluate requires labels")
    logits = predict_logits(model, graph)
    pred = np.argmax(logits, axis=1)
    return float(np.mean(pred[mask] == graph.labels[mask]))


# ---------------------------------------------------------------------------
# Checkpoints: flat binary of named arrays plus a text manifest


def save_checkpoint(model: Model, path) -> None:
    path = Path(path)
    manifest_path = path.with_name(path.name + ".manifest")
    state = model.state_dict()
    offset = 0
    lines = []
    with open(path, "wb") as fh:
        for name, arr in state.items():
            raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
            fh.write(raw)
            shape = ",".join(str(s) for s in arr.shape) or "scalar"
            lines.append(f"{name}\t{shape}\t{offset}")
            offset += len(raw)
    manifest_path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_checkpoint(model: Model, path) -> None:
    path = Path(path)
    manifest_path = path.with_name(path.name + ".manifest")
    blob = path.read_bytes()
    state: dict[str, Array] = {}
    for line in manifest_path.read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        name, shape_s, offset_s = line.split("\t")
        shape = () if shape_s == "scalar" else tuple(
            int(x) for x in shape_s.split(","))
        count = int(np.prod(shape)) if shape else 1
        offset = int(offset_s)
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=offset)
        state[name] = arr.reshape(shape).copy()
    model.load_state_dict(state)

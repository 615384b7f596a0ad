"""Dense float64 tensors with reverse-mode automatic differentiation.

The op set is deliberately small: matrix products, sparse-dense products,
a handful of elementwise functions, gather/segment primitives for per-edge
computations, and a masked softmax cross-entropy. Ops record onto the
thread's active :class:`Tape`; with no active tape they run in inference
mode and record nothing. Broadcasting is restricted to scalar-with-tensor
and equal-shape operands so every backward rule stays auditable.
"""
from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import PreconditionError, ShapeError, StateError, ValidationError

Array = np.ndarray


class Tensor:
    """A dense float64 array plus an additive gradient slot."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data: Array = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Array | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: Array) -> None:
        if g.shape != self.data.shape:
            raise ShapeError(f"grad shape {g.shape} != data shape {self.shape}")
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy(), self.requires_grad)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


@dataclass
class _Record:
    output: Tensor
    inputs: tuple[Tensor | None, ...]
    backward: Callable[[Array], Sequence[Array | None]]


_TLS = threading.local()


def _tape_stack() -> list["Tape"]:
    stack = getattr(_TLS, "stack", None)
    if stack is None:
        stack = []
        _TLS.stack = stack
    return stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of executed ops, replayed in reverse for gradients.

    A tape is owned by a single run; use it as a context manager so the
    ops executed inside record onto it.
    """

    def __init__(self):
        self._records: list[_Record] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise StateError("tape context exited out of order")
        stack.pop()

    def __len__(self) -> int:
        return len(self._records)

    def record(self, record: _Record) -> None:
        self._records.append(record)

    def clear(self) -> None:
        self._records.clear()

    def backward(self, out: Tensor) -> None:
        """Accumulate d(out)/d(leaf) into every requires_grad leaf.

        Gradients are additive: calling backward twice without resetting
        leaf grads doubles them.
        """
        if out.data.size != 1:
            raise ShapeError(f"backward expects a scalar, got shape {out.shape}")
        flowing: dict[int, Array] = {id(out): np.ones_like(out.data)}
        holders: dict[int, Tensor] = {id(out): out}
        produced = {id(r.output) for r in self._records}
        for rec in reversed(self._records):
            g_out = flowing.get(id(rec.output))
            if g_out is None:
                continue
            for tensor, g in zip(rec.inputs, rec.backward(g_out)):
                if tensor is None or g is None or not tensor.requires_grad:
                    continue
                key = id(tensor)
                holders[key] = tensor
                if key in flowing:
                    flowing[key] = flowing[key] + g
                else:
                    flowing[key] = g
        for key, tensor in holders.items():
            if tensor.requires_grad and key not in produced:
                tensor.accumulate_grad(np.asarray(flowing[key], dtype=np.float64))


def _apply(inputs: tuple, out_data: Array, backward) -> Tensor:
    tape = active_tape()
    tensor_inputs = tuple(t if isinstance(t, Tensor) else None for t in inputs)
    needs = tape is not None and any(
        t is not None and t.requires_grad for t in tensor_inputs
    )
    out = Tensor(out_data, requires_grad=needs)
    if needs:
        tape.record(_Record(out, tensor_inputs, backward))
    return out


def _coerce(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(np.float64(value))


def _reduce_to(g: Array, shape: tuple[int, ...]) -> Array:
    if g.shape == shape:
        return g
    return np.asarray(g.sum(), dtype=np.float64).reshape(shape)


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape == b.shape or a.size == 1 or b.size == 1:
        return
    raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} "
                     "(only equal-shape or scalar broadcasting supported)")


# ---------------------------------------------------------------------------
# Core linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """C = A @ B. Backward: dA = dC Bᵀ, dB = Aᵀ dC."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def backward(g: Array):
        return g @ bd.T, ad.T @ g

    return _apply((a, b), ad @ bd, backward)


@dataclass(frozen=True)
class CSRMatrix:
    """Read-only sparse matrix in CSR form; values never enter the tape."""

    indptr: Array
    indices: Array
    values: Array
    shape: tuple[int, int]
    row_ids: Array = field(default=None, repr=False)  # type: ignore[assignment]

    def __post_init__(self):
        rows = np.repeat(
            np.arange(self.shape[0], dtype=np.int64), np.diff(self.indptr)
        )
        object.__setattr__(self, "row_ids", rows)

    @property
    def nnz(self) -> int:
        return int(self.indices.size)


def _scatter_rows(idx: Array, contrib: Array, n: int) -> Array:
    """Sum 2-d contributions into n rows; column-wise bincount beats add.at."""
    out = np.empty((n, contrib.shape[1]), dtype=np.float64)
    for j in range(contrib.shape[1]):
        out[:, j] = np.bincount(idx, weights=contrib[:, j], minlength=n)
    return out


def spmm(adj: CSRMatrix, h: Tensor) -> Tensor:
    """out[u] = sum_v adj[u, v] * h[v]; adjacency weights are constants."""
    if h.data.ndim != 2 or adj.shape[1] != h.shape[0]:
        raise ShapeError(f"spmm: {adj.shape} @ {h.shape}")
    n_out = adj.shape[0]
    hd = h.data
    if adj.nnz == 0:
        out_data = np.zeros((n_out, hd.shape[1]))
    else:
        out_data = _scatter_rows(
            adj.row_ids, adj.values[:, None] * hd[adj.indices], n_out
        )

    def backward(g: Array):
        if adj.nnz == 0:
            return (np.zeros_like(hd),)
        return (_scatter_rows(adj.indices, adj.values[:, None] * g[adj.row_ids],
                              hd.shape[0]),)

    return _apply((h,), out_data, backward)


def weighted_agg(h: Tensor, w: Tensor, receivers: Array, senders: Array) -> Tensor:
    """out[receivers[e]] += w[e] * h[senders[e]], gradients into h and w."""
    if h.data.ndim != 2:
        raise ShapeError(f"weighted_agg: h must be 2-d, got {h.shape}")
    m = receivers.size
    if w.shape != (m,) or senders.size != m:
        raise ShapeError(
            f"weighted_agg: {m} edges but weights {w.shape}, senders {senders.size}"
        )
    n = h.shape[0]
    hd, wd = h.data, w.data
    if m == 0:
        out_data = np.zeros_like(hd)
    else:
        out_data = _scatter_rows(receivers, wd[:, None] * hd[senders], n)

    def backward(g: Array):
        if m == 0:
            return np.zeros_like(hd), np.zeros_like(wd)
        dh = _scatter_rows(senders, wd[:, None] * g[receivers], n)
        dw = np.einsum("ij,ij->i", g[receivers], hd[senders])
        return dh, dw

    return _apply((h, w), out_data, backward)


def row_scale(x: Tensor, w: Tensor) -> Tensor:
    """Scale row i of x by w[i]; gradients into both."""
    if x.data.ndim != 2 or w.shape != (x.shape[0],):
        raise ShapeError(f"row_scale: x {x.shape}, w {w.shape}")
    xd, wd = x.data, w.data

    def backward(g: Array):
        return g * wd[:, None], np.einsum("ij,ij->i", g, xd)

    return _apply((x, w), xd * wd[:, None], backward)


# ---------------------------------------------------------------------------
# Elementwise ops (equal-shape or scalar broadcasting only)


def add(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    _check_broadcast(a, b, "add")
    ash, bsh = a.shape, b.shape

    def backward(g: Array):
        return _reduce_to(g, ash), _reduce_to(g, bsh)

    return _apply((a, b), a.data + b.data, backward)


def mul(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data

    def backward(g: Array):
        return _reduce_to(g * bd, ad.shape), _reduce_to(g * ad, bd.shape)

    return _apply((a, b), ad * bd, backward)


def scale(x: Tensor, c: float) -> Tensor:
    """Multiply by a python constant (no gradient into c)."""
    c = float(c)

    def backward(g: Array):
        return (g * c,)

    return _apply((x,), x.data * c, backward)


def relu(x: Tensor) -> Tensor:
    xd = x.data

    def backward(g: Array):
        return (g * (xd > 0.0),)

    return _apply((x,), np.maximum(xd, 0.0), backward)


def sigmoid_array(x: Array) -> Array:
    """Numerically stable logistic function on a plain array."""
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = sigmoid_array(x.data)

    def backward(g: Array):
        return (g * s * (1.0 - s),)

    return _apply((x,), s, backward)


def reciprocal_or_zero(x: Tensor) -> Tensor:
    """1/x where x > 0, else 0 (safe denominator for nonnegative sums)."""
    xd = x.data
    pos = xd > 0.0
    out = np.where(pos, 1.0 / np.where(pos, xd, 1.0), 0.0)

    def backward(g: Array):
        return (np.where(pos, -g * out * out, 0.0),)

    return _apply((x,), out, backward)


def rsqrt_or_zero(x: Tensor) -> Tensor:
    """x^(-1/2) where x > 0, else 0."""
    xd = x.data
    pos = xd > 0.0
    safe = np.where(pos, xd, 1.0)
    out = np.where(pos, 1.0 / np.sqrt(safe), 0.0)

    def backward(g: Array):
        return (np.where(pos, -0.5 * g * out / safe, 0.0),)

    return _apply((x,), out, backward)


# ---------------------------------------------------------------------------
# Gather / segment primitives


def gather_rows(x: Tensor, idx: Array) -> Tensor:
    """out = x[idx] along axis 0; backward scatter-adds."""
    idx = np.asarray(idx, dtype=np.int64)
    xd = x.data

    def backward(g: Array):
        dx = np.zeros_like(xd)
        if g.ndim == 1:
            dx += np.bincount(idx, weights=g, minlength=xd.shape[0]).reshape(dx.shape)
        else:
            dx += _scatter_rows(idx, g, xd.shape[0])
        return (dx,)

    return _apply((x,), xd[idx], backward)


def segment_sum(x: Tensor, seg: Array, n_segments: int) -> Tensor:
    """out[j] = sum of x over entries with seg == j (1-d x)."""
    if x.data.ndim != 1 or seg.shape != x.shape:
        raise ShapeError(f"segment_sum: x {x.shape}, seg {seg.shape}")
    seg = np.asarray(seg, dtype=np.int64)
    out = np.bincount(seg, weights=x.data, minlength=n_segments)

    def backward(g: Array):
        return (g[seg],)

    return _apply((x,), out, backward)


def row_sum(x: Tensor) -> Tensor:
    """Sum a 2-d tensor along axis 1."""
    if x.data.ndim != 2:
        raise ShapeError(f"row_sum expects 2-d, got {x.shape}")
    cols = x.shape[1]

    def backward(g: Array):
        return (np.repeat(g[:, None], cols, axis=1),)

    return _apply((x,), x.data.sum(axis=1), backward)


def total_sum(x: Tensor) -> Tensor:
    """Sum all entries into a scalar."""
    shape = x.shape

    def backward(g: Array):
        return (np.full(shape, float(g)),)

    return _apply((x,), np.asarray(x.data.sum()), backward)


def column_stack2(a: Tensor, b: Tensor) -> Tensor:
    """Stack two 1-d tensors as the columns of an (m, 2) tensor."""
    if a.data.ndim != 1 or a.shape != b.shape:
        raise ShapeError(f"column_stack2: {a.shape} vs {b.shape}")

    def backward(g: Array):
        return g[:, 0].copy(), g[:, 1].copy()

    return _apply((a, b), np.stack([a.data, b.data], axis=1), backward)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = x.shape

    def backward(g: Array):
        return (g.reshape(old),)

    return _apply((x,), x.data.reshape(shape), backward)


def dropout(x: Tensor, rate: float, rng: np.random.Generator,
            training: bool) -> Tensor:
    """Inverted dropout; identity when not training or rate is 0."""
    if not training or rate <= 0.0:
        return x
    if not 0.0 <= rate < 1.0:
        raise ValidationError(f"dropout rate {rate} outside [0, 1)")
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return mul(x, Tensor(mask))


# ---------------------------------------------------------------------------
# Loss


def softmax_cross_entropy(logits: Tensor, labels: Array, mask: Array) -> Tensor:
    """Mean over masked rows of -log softmax(logits)[label], row-max stabilized."""
    if logits.data.ndim != 2:
        raise ShapeError(f"logits must be 2-d, got {logits.shape}")
    labels = np.asarray(labels, dtype=np.int64)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (logits.shape[0],) or labels.shape != (logits.shape[0],):
        raise ShapeError(
            f"labels {labels.shape} / mask {mask.shape} vs logits {logits.shape}"
        )
    rows = np.flatnonzero(mask)
    if rows.size == 0:
        raise PreconditionError("softmax_cross_entropy: empty mask")
    n_classes = logits.shape[1]
    picked = labels[rows]
    if picked.min() < 0 or picked.max() >= n_classes:
        raise ValidationError(
            f"labels outside [0, {n_classes}) in masked rows"
        )
    z = logits.data[rows]
    z = z - z.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=1))
    logp = z - logsumexp[:, None]
    loss = -logp[np.arange(rows.size), picked].mean()

    def backward(g: Array):
        soft = np.exp(logp)
        soft[np.arange(rows.size), picked] -= 1.0
        dl = np.zeros_like(logits.data)
        dl[rows] = soft * (float(g) / rows.size)
        return (dl,)

    return _apply((logits,), np.asarray(loss), backward)


# ---------------------------------------------------------------------------
# Optimizer and initialization


class Adam:
    """Adam with bias correction; step() zeroes gradients afterwards."""

    def __init__(self, params: Sequence[Tensor], lr: float = 0.01,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = float(lr)
        self.beta1, self.beta2 = betas
        self.eps = float(eps)
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]
        self._t = 0

    def step(self) -> None:
        for p in self.params:
            if p.grad is None:
                raise StateError("Adam.step: parameter has no gradient")
        self._t += 1
        c1 = 1.0 - self.beta1 ** self._t
        c2 = 1.0 - self.beta2 ** self._t
        for p, m, v in zip(self.params, self._m, self._v):
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.zero_grad()


def uniform_init(rng: np.random.Generator, fan_in: int,
                 shape: tuple[int, ...]) -> Array:
    """Uniform in [-1/sqrt(fan_in), +1/sqrt(fan_in)]."""
    limit = 1.0 / np.sqrt(max(fan_in, 1))
    return rng.uniform(-limit, limit, size=shape)

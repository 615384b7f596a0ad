"""Budget-constrained greedy poisoning attackers.

Three attack shapes: direct (edits touch the target), influence (edits
touch only the target's neighbors), and non-targeted (edits spread over
the graph to hurt aggregate accuracy). All of them greedily pick edge
flips that maximize the loss of a fixed two-layer GCN surrogate; the
poisoned graph is evaluated later by full retraining.

Scoring uses an incremental evaluator that recomputes only the hidden
rows an edge flip can touch, which keeps a greedy step at O(candidates x
local degree) instead of O(candidates x graph).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import AttackError, PreconditionError, SelectionError, ValidationError
from .graph import SparseGraph
from .models import Model, TrainConfig, build_model, predict_logits, train

Array = np.ndarray


# ---------------------------------------------------------------------------
# Perturbation


@dataclass(frozen=True)
class Perturbation:
    """A budgeted set of undirected edge edits with its actor sets."""

    insertions: tuple[tuple[int, int], ...]
    deletions: tuple[tuple[int, int], ...]
    budget: int
    targets: frozenset[int]
    attackers: frozenset[int]
    kind: str = "direct"
    seed: int = 0
    scores: tuple[float, ...] = field(default=(), compare=False)

    def __post_init__(self):
        ins = tuple(_norm(p) for p in self.insertions)
        dels = tuple(_norm(p) for p in self.deletions)
        object.__setattr__(self, "insertions", ins)
        object.__setattr__(self, "deletions", dels)
        if len(ins) + len(dels) > self.budget:
            raise PreconditionError(
                f"{len(ins) + len(dels)} edits exceed budget {self.budget}")
        if set(ins) & set(dels):
            raise PreconditionError("insertions and deletions overlap")
        if self.attackers:
            for u, v in ins + dels:
                if u not in self.attackers and v not in self.attackers:
                    raise PreconditionError(
                        f"edit ({u}, {v}) touches no attacker node")

    @property
    def n_edits(self) -> int:
        return len(self.insertions) + len(self.deletions)

    def save(self, path) -> None:
        lines = [f"# kind={self.kind} delta={self.budget} seed={self.seed}"]
        if self.targets:
            lines.append("# targets=" + ",".join(map(str, sorted(self.targets))))
        if self.attackers:
            lines.append("# attackers=" + ",".join(map(str, sorted(self.attackers))))
        for u, v in self.insertions:
            lines.append(f"+ {u} {v}")
        for u, v in self.deletions:
            lines.append(f"- {u} {v}")
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Perturbation":
        kind, budget, seed = "direct", 0, 0
        targets: frozenset[int] = frozenset()
        attackers: frozenset[int] = frozenset()
        ins, dels = [], []
        for lineno, raw in enumerate(
                Path(path).read_text(encoding="utf-8").splitlines(), start=1):
            line = raw.strip()
            if not line:
                continue
            if line.startswith("#"):
                body = line[1:].strip()
                for token in body.split():
                    if "=" not in token:
                        continue
                    key, value = token.split("=", 1)
                    if key == "kind":
                        kind = value
                    elif key == "delta":
                        budget = int(value)
                    elif key == "seed":
                        seed = int(value)
                    elif key == "targets":
                        targets = frozenset(int(x) for x in value.split(","))
                    elif key == "attackers":
                        attackers = frozenset(int(x) for x in value.split(","))
                continue
            parts = line.split()
            if len(parts) != 3 or parts[0] not in "+-":
                raise ValidationError(f"{path}:{lineno}: bad edit line {raw!r}")
            pair = (int(parts[1]), int(parts[2]))
            (ins if parts[0] == "+" else dels).append(pair)
        return cls(tuple(ins), tuple(dels), budget, targets, attackers,
                   kind=kind, seed=seed)


def _norm(pair) -> tuple[int, int]:
    u, v = int(pair[0]), int(pair[1])
    return (u, v) if u < v else (v, u)


@dataclass(frozen=True)
class AttackConfig:
    """Knobs shared by the attackers; surrogate hyperparameters included."""

    kind: str = "direct"  # "direct" | "influence" | "non-targeted"
    seed: int = 0
    pool_size: int = 500
    rate: float | None = None          # non-targeted only
    batch_size: int = 20               # non-targeted rescoring interval
    n_influencers: int = 5             # influence only
    surrogate_hidden: int = 16
    surrogate_lr: float = 0.01
    surrogate_epochs: int = 200
    surrogate_patience: int = 10

    def validate(self) -> None:
        if self.kind not in ("direct", "influence", "non-targeted"):
            raise ValidationError(f"unknown attack kind {self.kind!r}")
        if self.kind == "non-targeted":
            if self.rate is None or not 0.0 < self.rate <= 0.25:
                raise ValidationError(
                    f"non-targeted rate {self.rate} outside (0, 0.25]")
        if self.pool_size <= 0 or self.batch_size <= 0:
            raise ValidationError("pool_size and batch_size must be positive")


def train_surrogate(graph: SparseGraph, config: AttackConfig) -> Model:
    """The fixed scoring model: a plain two-layer GCN without any defense."""
    if graph.features is None or graph.labels is None:
        raise ValidationError("surrogate needs features and labels")
    n_classes = int(graph.labels.max()) + 1
    model = build_model(graph.features.shape[1], [config.surrogate_hidden],
                        n_classes, kind="gcn", seed=config.seed, dropout=0.5)
    train(model, graph, TrainConfig(epochs=config.surrogate_epochs,
                                    patience=config.surrogate_patience,
                                    lr=config.surrogate_lr, seed=config.seed))
    return model


# ---------------------------------------------------------------------------
# Incremental flip scoring


class FlipScorer:
    """Exact two-layer GCN logits under single-edge flips.

    Maintains H1 = relu(S X W1) and L = S H1 W2 for the symmetric
    normalization S of the current graph. A flip of (a, b) only changes
    rows of H1 for {a, b} and their neighbors, and only changes logits for
    those rows and their neighbors; score queries recompute exactly that
    fringe and leave the cached state untouched.
    """

    def __init__(self, graph: SparseGraph, surrogate: Model):
        if surrogate.n_layers != 2 or surrogate.specs[0].kind != "gcn":
            raise ValidationError("FlipScorer expects a 2-layer GCN surrogate")
        self.n = graph.n_nodes
        self.nbrs = [set(map(int, graph.neighbors(u))) for u in range(self.n)]
        self.labels = graph.labels.copy()
        w1 = surrogate.layers[0].weight.data
        self.w2 = surrogate.layers[1].weight.data
        self.xw1 = graph.features @ w1
        self.h1w2 = np.zeros((self.n, self.w2.shape[1]))
        self.logits = np.zeros((self.n, self.w2.shape[1]))
        for u in range(self.n):
            self.h1w2[u] = self._h1_row(u) @ self.w2
        for u in range(self.n):
            self.logits[u] = self._logits_row(u)

    # -- cached-state helpers -------------------------------------------------

    def _h1_row(self, u: int, nbrs: set[int] | None = None) -> Array:
        nb = self.nbrs[u] if nbrs is None else nbrs
        du = len(nb) + 1.0
        acc = self.xw1[u] / du
        if nb:
            idx = np.fromiter(nb, dtype=np.int64)
            degs = np.fromiter((len(self.nbrs[v]) + 1.0 for v in idx), dtype=float)
            coeff = 1.0 / np.sqrt(du * degs)
            acc = acc + coeff @ self.xw1[idx]
        return np.maximum(acc, 0.0)

    def _logits_row(self, u: int, h1w2_override: dict[int, Array] | None = None,
                    nbrs: set[int] | None = None,
                    deg_override: dict[int, float] | None = None) -> Array:
        nb = self.nbrs[u] if nbrs is None else nbrs
        deg = deg_override or {}
        du = deg.get(u, len(self.nbrs[u]) + 1.0)
        over = h1w2_override or {}
        acc = over.get(u, self.h1w2[u]) / du
        for v in nb:
            dv = deg.get(v, len(self.nbrs[v]) + 1.0)
            acc = acc + over.get(v, self.h1w2[v]) / np.sqrt(du * dv)
        return acc

    # -- queries ---------------------------------------------------------------

    def _flip_fringe(self, a: int, b: int):
        """Hidden rows and degree changes a flip of (a, b) induces."""
        insert = b not in self.nbrs[a]
        na = set(self.nbrs[a])
        nb = set(self.nbrs[b])
        if insert:
            na.add(b)
            nb.add(a)
        else:
            na.discard(b)
            nb.discard(a)
        deg_override = {a: len(na) + 1.0, b: len(nb) + 1.0}
        touched_h1 = {a, b} | self.nbrs[a] | self.nbrs[b]
        new_nbrs = {a: na, b: nb}
        return insert, new_nbrs, deg_override, touched_h1

    def _updated_h1w2(self, new_nbrs, deg_override, touched_h1):
        over: dict[int, Array] = {}
        for w in touched_h1:
            nb = new_nbrs.get(w, self.nbrs[w])
            dw = deg_override.get(w, len(nb) + 1.0)
            acc = self.xw1[w] / dw
            for v in nb:
                dv = deg_override.get(v, len(self.nbrs[v]) + 1.0)
                acc = acc + self.xw1[v] / np.sqrt(dw * dv)
            over[w] = np.maximum(acc, 0.0) @ self.w2
        return over

    def logits_after_flip(self, a: int, b: int, nodes) -> dict[int, Array]:
        """Logits at ``nodes`` if (a, b) were flipped; no state change."""
        insert, new_nbrs, deg_override, touched_h1 = self._flip_fringe(a, b)
        over = self._updated_h1w2(new_nbrs, deg_override, touched_h1)
        out = {}
        for u in nodes:
            out[u] = self._logits_row(
                u, h1w2_override=over,
                nbrs=new_nbrs.get(u, self.nbrs[u]),
                deg_override=deg_override)
        return out

    def affected_logit_rows(self, a: int, b: int) -> set[int]:
        insert, new_nbrs, deg_override, touched_h1 = self._flip_fringe(a, b)
        affected = set(touched_h1)
        for w in touched_h1:
            affected |= self.nbrs[w]
        affected |= new_nbrs[a] | new_nbrs[b]
        return affected

    def target_loss_after(self, a: int, b: int, target: int) -> float:
        row = self.logits_after_flip(a, b, [target])[target]
        return _cross_entropy_row(row, int(self.labels[target]))

    def masked_loss_delta(self, a: int, b: int, mask_nodes: set[int]) -> float:
        affected = self.affected_logit_rows(a, b) & mask_nodes
        if not affected:
            return 0.0
        new_rows = self.logits_after_flip(a, b, affected)
        delta = 0.0
        for u in affected:
            label = int(self.labels[u])
            delta += (_cross_entropy_row(new_rows[u], label)
                      - _cross_entropy_row(self.logits[u], label))
        return delta

    # -- mutation ---------------------------------------------------------------

    def apply_flip(self, a: int, b: int) -> None:
        insert, new_nbrs, deg_override, touched_h1 = self._flip_fringe(a, b)
        if insert:
            self.nbrs[a].add(b)
            self.nbrs[b].add(a)
        else:
            self.nbrs[a].discard(b)
            self.nbrs[b].discard(a)
        for w in touched_h1:
            self.h1w2[w] = self._h1_row(w) @ self.w2
        relog = set(touched_h1)
        for w in touched_h1:
            relog |= self.nbrs[w]
        for u in relog:
            self.logits[u] = self._logits_row(u)

    def current_target_loss(self, target: int) -> float:
        return _cross_entropy_row(self.logits[target], int(self.labels[target]))

    def current_masked_loss(self, mask_nodes) -> float:
        return float(sum(_cross_entropy_row(self.logits[u], int(self.labels[u]))
                         for u in mask_nodes))


def _cross_entropy_row(row: Array, label: int) -> float:
    z = row - row.max()
    return float(np.log(np.exp(z).sum()) - z[label])


# ---------------------------------------------------------------------------
# Candidate pools


def _dissimilarity_order(features: Array, anchor: int) -> Array:
    """Node ids sorted from least to most feature-similar to the anchor."""
    x = features
    ref = x[anchor]
    norms = np.linalg.norm(x, axis=1) * (np.linalg.norm(ref) or 1.0)
    sims = np.where(norms > 0, x @ ref / np.where(norms > 0, norms, 1.0), 0.0)
    return np.argsort(sims, kind="stable")


def _insertion_pool(graph: SparseGraph, attacker: int, avoid_label: int,
                    pool_size: int, forbidden: set[int]) -> list[int]:
    order = _dissimilarity_order(graph.features, attacker)
    pool = []
    for w in order:
        w = int(w)
        if w in forbidden or graph.labels[w] == avoid_label:
            continue
        pool.append(w)
        if len(pool) >= pool_size:
            break
    return pool


# ---------------------------------------------------------------------------
# Attacks


def attack_direct(graph: SparseGraph, target: int, config: AttackConfig,
                  surrogate: Model | None = None) -> Perturbation:
    """Greedy flips incident to the target, budget = its clean degree.

    Insertion candidates are the most feature-dissimilar nodes of a
    different label; deletion candidates are same-label neighbors. Each
    step takes the flip with the highest surrogate loss at the target.
    """
    config.validate()
    if surrogate is None:
        surrogate = train_surrogate(graph, config)
    label = int(graph.labels[target])
    if int(np.argmax(predict_logits(surrogate, graph)[target])) != label:
        raise AttackError(f"target {target} is misclassified by the surrogate")
    budget = graph.degree(target)
    if budget == 0:
        raise AttackError(f"target {target} is isolated")

    scorer = FlipScorer(graph, surrogate)
    forbidden = {target} | set(map(int, graph.neighbors(target)))
    insert_pool = _insertion_pool(graph, target, label, config.pool_size,
                                  forbidden)
    delete_pool = [int(v) for v in graph.neighbors(target)
                   if graph.labels[v] == label]
    insertions: list[tuple[int, int]] = []
    deletions: list[tuple[int, int]] = []
    scores: list[float] = []
    inserted: set[int] = set()
    deleted: set[int] = set()
    for _ in range(budget):
        best = None
        for w in insert_pool:
            if w in inserted:
                continue
            loss = scorer.target_loss_after(target, w, target)
            if best is None or loss > best[0]:
                best = (loss, "+", w)
        for v in delete_pool:
            if v in deleted:
                continue
            loss = scorer.target_loss_after(target, v, target)
            if best is None or loss > best[0]:
                best = (loss, "-", v)
        if best is None:
            break
        loss, op, w = best
        scorer.apply_flip(target, w)
        scores.append(loss)
        if op == "+":
            inserted.add(w)
            insertions.append((target, w))
        else:
            deleted.add(w)
            deletions.append((target, w))
    return Perturbation(tuple(insertions), tuple(deletions), budget,
                        frozenset({target}), frozenset({target}),
                        kind="direct", seed=config.seed, scores=tuple(scores))


def attack_influence(graph: SparseGraph, target: int, config: AttackConfig,
                     surrogate: Model | None = None) -> Perturbation:
    """Greedy flips around the target's neighbors; none touch the target.

    The highest-degree neighbors act as attackers (up to ``n_influencers``),
    each with a budget equal to its own clean degree. Flips are scored by
    the surrogate's loss at the target.
    """
    config.validate()
    if surrogate is None:
        surrogate = train_surrogate(graph, config)
    if graph.degree(target) == 0:
        raise AttackError(f"target {target} is isolated")
    label = int(graph.labels[target])
    neighbors = sorted(map(int, graph.neighbors(target)),
                       key=lambda v: (-graph.degree(v), v))
    attackers = neighbors[: config.n_influencers]
    all_neighbors = frozenset(map(int, graph.neighbors(target)))

    scorer = FlipScorer(graph, surrogate)
    insertions: list[tuple[int, int]] = []
    deletions: list[tuple[int, int]] = []
    scores: list[float] = []
    total_budget = 0
    edited: set[tuple[int, int]] = set()
    for v in attackers:
        budget_v = graph.degree(v)
        total_budget += budget_v
        forbidden = {target, v} | set(map(int, graph.neighbors(v)))
        insert_pool = _insertion_pool(graph, target, label, config.pool_size,
                                      forbidden)
        delete_pool = [int(w) for w in graph.neighbors(v)
                       if w != target and graph.labels[w] == label]
        for _ in range(budget_v):
            best = None
            for w in insert_pool:
                pair = _norm((v, w))
                if pair in edited or w in scorer.nbrs[v]:
                    continue
                loss = scorer.target_loss_after(v, w, target)
                if best is None or loss > best[0]:
                    best = (loss, "+", w)
            for w in delete_pool:
                pair = _norm((v, w))
                if pair in edited or w not in scorer.nbrs[v]:
                    continue
                loss = scorer.target_loss_after(v, w, target)
                if best is None or loss > best[0]:
                    best = (loss, "-", w)
            if best is None:
                break
            loss, op, w = best
            scorer.apply_flip(v, w)
            edited.add(_norm((v, w)))
            scores.append(loss)
            if op == "+":
                insertions.append((v, w))
            else:
                deletions.append((v, w))
    return Perturbation(tuple(insertions), tuple(deletions), total_budget,
                        frozenset({target}), all_neighbors,
                        kind="influence", seed=config.seed,
                        scores=tuple(scores))


def attack_nontargeted(graph: SparseGraph, config: AttackConfig,
                       surrogate: Model | None = None) -> Perturbation:
    """Global greedy flips against the surrogate's training loss.

    The budget is rate * E. Candidates (inter-class insertions and
    intra-class deletions touching at least one test node) are sampled,
    scored by the training-loss increase of the flip, and applied in
    batches of ``batch_size`` before rescoring.
    """
    config.validate()
    if config.kind != "non-targeted":
        raise ValidationError("config.kind must be 'non-targeted'")
    if graph.test_mask is None or graph.train_mask is None:
        raise ValidationError("non-targeted attack requires split masks")
    if surrogate is None:
        surrogate = train_surrogate(graph, config)
    budget = int(np.floor(config.rate * graph.n_edges))
    rng = np.random.default_rng(config.seed)
    labels = graph.labels
    test_nodes = frozenset(map(int, np.flatnonzero(graph.test_mask)))
    train_nodes = set(map(int, np.flatnonzero(graph.train_mask)))

    scorer = FlipScorer(graph, surrogate)
    insertions: list[tuple[int, int]] = []
    deletions: list[tuple[int, int]] = []
    scores: list[float] = []
    edited: set[tuple[int, int]] = set()

    def sample_candidates() -> list[tuple[int, int]]:
        cands: list[tuple[int, int]] = []
        seen: set[tuple[int, int]] = set()
        # inter-class insertions
        tries = 0
        want_ins = config.pool_size
        while len(cands) < want_ins and tries < 40 * want_ins:
            tries += 1
            u = int(rng.integers(0, graph.n_nodes))
            v = int(rng.integers(0, graph.n_nodes))
            if u == v or labels[u] == labels[v]:
                continue
            pair = _norm((u, v))
            if pair in seen or pair in edited or pair[1] in scorer.nbrs[pair[0]]:
                continue
            if pair[0] not in test_nodes and pair[1] not in test_nodes:
                continue
            seen.add(pair)
            cands.append(pair)
        # intra-class deletions
        pairs = graph.edge_pairs()
        intra = [(int(u), int(v)) for u, v in pairs
                 if labels[u] == labels[v]
                 and (int(u) in test_nodes or int(v) in test_nodes)]
        rng.shuffle(intra)
        for pair in intra[: max(config.pool_size // 4, 1)]:
            pair = _norm(pair)
            if (pair not in edited and pair not in seen
                    and pair[1] in scorer.nbrs[pair[0]]):
                seen.add(pair)
                cands.append(pair)
        return cands

    while len(edited) < budget:
        cands = sample_candidates()
        if not cands:
            break
        scored = []
        for a, b in cands:
            delta = scorer.masked_loss_delta(a, b, train_nodes)
            if delta > 0.0:
                scored.append((delta, a, b))
        if not scored:
            break
        scored.sort(key=lambda t: (-t[0], t[1], t[2]))
        for delta, a, b in scored[: config.batch_size]:
            if len(edited) >= budget:
                break
            pair = _norm((a, b))
            if pair in edited:
                continue
            existing = pair[1] in scorer.nbrs[pair[0]]
            scorer.apply_flip(a, b)
            edited.add(pair)
            scores.append(delta)
            if existing:
                deletions.append(pair)
            else:
                insertions.append(pair)
    return Perturbation(tuple(insertions), tuple(deletions), budget,
                        frozenset(test_nodes), frozenset(test_nodes),
                        kind="non-targeted", seed=config.seed,
                        scores=tuple(scores))


# ---------------------------------------------------------------------------
# Target selection


def select_targets(graph: SparseGraph, model: Model, n: int = 40,
                   seed: int = 0, eligible: Array | None = None) -> list[int]:
    """Correctly classified test nodes stratified by classification margin.

    Returns n targets: the n//4 widest margins, the n//4 narrowest, and
    the rest drawn at random, all disjoint.
    """
    if graph.test_mask is None or graph.labels is None:
        raise ValidationError("select_targets requires labels and a test mask")
    logits = predict_logits(model, graph)
    pred = np.argmax(logits, axis=1)
    ok = (pred == graph.labels) & graph.test_mask
    if eligible is not None:
        ok &= np.asarray(eligible, dtype=bool)
    nodes = np.flatnonzero(ok)
    if nodes.size < n:
        raise SelectionError(
            f"only {nodes.size} eligible targets, need {n}",
            available=int(nodes.size))
    true_logit = logits[nodes, graph.labels[nodes]]
    masked = logits[nodes].copy()
    masked[np.arange(nodes.size), graph.labels[nodes]] = -np.inf
    margin = true_logit - masked.max(axis=1)
    order = nodes[np.argsort(-margin, kind="stable")]
    k = n // 4
    top = list(order[:k])
    bottom = list(order[-k:])
    middle = order[k:-k] if k else order
    rng = np.random.default_rng(seed)
    pick = rng.choice(middle.size, size=n - 2 * k, replace=False)
    random_part = list(middle[np.sort(pick)])
    targets = top + random_part + bottom
    assert len(set(targets)) == n
    return [int(t) for t in targets]

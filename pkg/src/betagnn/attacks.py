"""Structure-poisoning attacks under an edge-flip budget.

Four generators of increasing cost:

* ``random``: uniform flips over all node pairs.
* ``heterophily``: drops same-label edges / adds cross-label edges.
* ``grad``: first-order adjacency-gradient attack against a retrained
  2-layer GCN surrogate (a cheap stand-in for meta-gradient attacks).
* ``greedy``: per-target greedy flips maximizing a frozen surrogate's loss
  at the target (structure-only, exact surrogate scoring).

Attacks never read or write node features other than to feed the surrogate.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .ensemble import TrainConfig, predict, train
from .graph import DataSplit, EdgeDiff, PerturbationBudget, SparseGraph, normalize_adjacency
from .models import GcnModel

ATTACK_KINDS = ("random", "heterophily", "grad", "greedy")
ATTACK_OBJECTIVES = ("self-training", "train")
DENSE_LIMIT = 5000


class AttackError(ValueError):
    pass


class BudgetShortfallWarning(UserWarning):
    """Fewer feasible flips than the budget allowed."""


def default_surrogate() -> TrainConfig:
    return TrainConfig(epochs=100, lr=0.01, hidden=16, dropout=0.5, seed=0, weight_decay=0.0)


@dataclass(frozen=True)
class AttackSpec:
    kind: str
    budget: PerturbationBudget
    targets: tuple[int, ...] = ()
    seed: int = 0
    surrogate: TrainConfig = field(default_factory=default_surrogate)
    retrain_every: Optional[int] = None
    objective: str = "train"

    def __post_init__(self):
        if self.objective not in ATTACK_OBJECTIVES:
            raise AttackError(f"unknown objective {self.objective!r}; expected one of {ATTACK_OBJECTIVES}")
        if self.kind not in ATTACK_KINDS:
            raise AttackError(f"unknown attack kind {self.kind!r}; expected one of {ATTACK_KINDS}")
        if self.kind == "greedy" and not self.targets:
            raise AttackError("targeted attack needs at least one target node")
        object.__setattr__(self, "targets", tuple(int(t) for t in self.targets))


def _unrank_pairs(idx: np.ndarray, n: int) -> np.ndarray:
    """Map linear indices over the strict upper triangle (row-major) to (u, v)."""
    idx = np.asarray(idx, dtype=np.int64)
    rows = np.arange(n, dtype=np.int64)
    starts = rows * n - rows * (rows + 1) // 2
    u = np.searchsorted(starts, idx, side="right") - 1
    return np.stack([u, idx - starts[u] + u + 1], axis=1)


def random_flip_attack(g: SparseGraph, y, spec: AttackSpec) -> EdgeDiff:
    n = g.n_nodes
    n_pairs = n * (n - 1) // 2
    k = min(spec.budget.b_edges, n_pairs)
    if k == 0:
        return EdgeDiff()
    rng = np.random.default_rng(spec.seed)
    pairs = _unrank_pairs(rng.choice(n_pairs, size=k, replace=False), n)
    return EdgeDiff.from_flips(map(tuple, pairs.tolist()), g)


def heterophily_inject_attack(g: SparseGraph, y, spec: AttackSpec) -> EdgeDiff:
    """Random flips drawn from same-label edges (removed) and absent cross-label pairs (added).

    Candidates are visited in a seeded random order. A flip is taken when it
    strictly lowers the current edge homophily; flips that would leave it
    unchanged (removals while no cross-label edge exists) are retried on later
    passes and used only as a last resort. When fewer candidates exist than
    the budget, all are used and a :class:`BudgetShortfallWarning` is issued.
    """
    y = np.asarray(y)
    n = g.n_nodes
    edges = g.edges()
    is_same = y[edges[:, 0]] == y[edges[:, 1]]
    same = edges[is_same]
    iu, iv = np.triu_indices(n, 1)
    cross = y[iu] != y[iv]
    present = np.zeros(len(iu), dtype=bool)
    if len(edges):
        u, v = edges[:, 0], edges[:, 1]
        present[u * n - u * (u + 1) // 2 + (v - u - 1)] = True
    absent_cross = np.stack([iu[cross & ~present], iv[cross & ~present]], axis=1)
    candidates = np.concatenate([same, absent_cross]).astype(np.int64)
    n_removals = len(same)
    budget = spec.budget.b_edges
    if len(candidates) < budget:
        warnings.warn(f"only {len(candidates)} homophily-lowering flips exist, budget {budget}",
                      BudgetShortfallWarning, stacklevel=2)
    k = min(budget, len(candidates))
    if k == 0:
        return EdgeDiff()
    rng = np.random.default_rng(spec.seed)
    pending = list(rng.permutation(len(candidates)))
    n_same, n_cross = int(is_same.sum()), int((~is_same).sum())
    chosen = []
    while len(chosen) < k:
        deferred = []
        for i in pending:
            if len(chosen) == k:
                break
            removal = i < n_removals
            # removing a same-label edge lowers s/(s+c) only if c > 0 and an edge remains;
            # adding a cross-label edge lowers it only if s > 0
            lowers = (n_cross > 0 and n_same + n_cross > 1) if removal else n_same > 0
            if lowers:
                chosen.append(i)
                if removal:
                    n_same -= 1
                else:
                    n_cross += 1
            else:
                deferred.append(i)
        if len(deferred) == len(pending):
            chosen.extend(deferred[:k - len(chosen)])
            break
        pending = deferred
    return EdgeDiff.from_flips(map(tuple, candidates[np.sort(chosen)].tolist()), g)


def train_surrogate(g: SparseGraph, x, y, split: DataSplit, cfg: TrainConfig) -> GcnModel:
    x = np.asarray(x, dtype=np.float64)
    n_classes = int(np.max(y)) + 1
    model = GcnModel([x.shape[1], cfg.hidden, n_classes], dropout=cfg.dropout, seed=cfg.seed)
    try:
        train(model, g, x, y, split, cfg)
    except FloatingPointError as exc:
        raise AttackError(f"surrogate training diverged: {exc}") from exc
    return model


def _dense_normalize(a: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    a_tilde = a + np.eye(len(a))
    deg = a_tilde.sum(axis=1)
    s = deg ** -0.5
    return s[:, None] * a_tilde * s[None, :], a_tilde, deg


def surrogate_loss_dense(a: np.ndarray, x: np.ndarray, w1: np.ndarray, w2: np.ndarray,
                         y, idx) -> float:
    a_hat, _, _ = _dense_normalize(a)
    z = a_hat @ (np.maximum(a_hat @ (x @ w1), 0.0) @ w2)
    return _mean_ce(z[idx], np.asarray(y)[idx])


def _mean_ce(z: np.ndarray, y: np.ndarray) -> float:
    z = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    return float(np.mean(lse - z[np.arange(len(y)), y]))


def adjacency_gradient(a: np.ndarray, x: np.ndarray, w1: np.ndarray, w2: np.ndarray,
                       y, idx) -> np.ndarray:
    """Gradient of the surrogate's mean cross-entropy over ``idx`` w.r.t. each entry of ``a``.

    Entries are treated as independent; the derivative for flipping an
    undirected pair (u, v) is ``G[u, v] + G[v, u]``. Derivatives flow through
    the degree normalization as well as the propagation.
    """
    y = np.asarray(y)
    a_hat, a_tilde, deg = _dense_normalize(a)
    s = deg ** -0.5
    xw = x @ w1
    pre = a_hat @ xw
    h = np.maximum(pre, 0.0)
    hw = h @ w2
    z = a_hat @ hw
    zi = z[idx] - z[idx].max(axis=1, keepdims=True)
    p = np.exp(zi)
    p /= p.sum(axis=1, keepdims=True)
    p[np.arange(len(idx)), y[idx]] -= 1.0
    g_z = np.zeros_like(z)
    g_z[idx] = p / len(idx)
    g_pre = (a_hat.T @ g_z @ w2.T) * (pre > 0)
    g_ahat = g_z @ hw.T + g_pre @ xw.T
    weighted = g_ahat * a_tilde
    g_s = weighted @ s + weighted.T @ s
    g_deg = g_s * (-0.5) * deg ** -1.5
    return g_ahat * (s[:, None] * s[None, :]) + g_deg[:, None]


def _dense_to_graph(a: np.ndarray) -> SparseGraph:
    u, v = np.nonzero(np.triu(a, 1))
    return SparseGraph.from_edges(len(a), np.stack([u, v], axis=1))


def _attack_objective(model, g, x, y, split, objective):
    """Labels and node set whose surrogate loss the attack maximizes.

    ``train`` uses the labelled training nodes only. ``self-training`` scores
    every node, using the clean surrogate's predictions as labels outside
    the training set, so flips spread beyond the training neighbourhoods.
    """
    if objective == "train":
        return np.asarray(y), np.flatnonzero(split.train_mask)
    pseudo = np.argmax(predict(model, normalize_adjacency(g), x), axis=1)
    pseudo[split.train_mask] = np.asarray(y)[split.train_mask]
    return pseudo, np.arange(g.n_nodes)


def grad_untargeted_attack(g: SparseGraph, x, y, split: DataSplit, spec: AttackSpec) -> EdgeDiff:
    """Greedy first-order flips scored by ``grad * (1 - 2A)`` over all pairs.

    The gradient is recomputed after every flip and the surrogate is retrained
    from scratch on the current graph every ``retrain_every`` flips
    (default ``max(1, budget // 10)``).
    """
    n = g.n_nodes
    if n > DENSE_LIMIT:
        raise AttackError(f"gradient attack needs a dense adjacency; {n} nodes exceeds {DENSE_LIMIT}")
    budget = min(spec.budget.b_edges, n * (n - 1) // 2)
    if budget == 0:
        return EdgeDiff()
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    every = spec.retrain_every or max(1, budget // 10)
    a = g.to_dense()
    a = (a != 0).astype(np.float64)
    locked = np.tril(np.ones((n, n), dtype=bool))
    flips = []
    model = train_surrogate(g, x, y, split, spec.surrogate)
    targets, idx = _attack_objective(model, g, x, y, split, spec.objective)
    for step in range(budget):
        if step and step % every == 0:
            model = train_surrogate(_dense_to_graph(a), x, y, split, spec.surrogate)
        w1, w2 = (p.value for p in model.parameters())
        grad = adjacency_gradient(a, x, w1, w2, targets, idx)
        score = (grad + grad.T) * (1.0 - 2.0 * a)
        score[locked] = -np.inf
        best = int(np.argmax(score))
        u, v = divmod(best, n)
        if not np.isfinite(score[u, v]):
            break
        a[u, v] = a[v, u] = 1.0 - a[u, v]
        locked[u, v] = True
        flips.append((u, v))
    return EdgeDiff.from_flips(flips, g)


class _LocalGcn:
    """Frozen 2-layer GCN evaluated at single nodes on an editable adjacency."""

    def __init__(self, g: SparseGraph, x, model: GcnModel):
        w1, w2 = (p.value for p in model.parameters())
        self.xw = np.asarray(x, dtype=np.float64) @ w1
        self.w2 = w2
        self.adj = [set(g.neighbors(u).tolist()) for u in range(g.n_nodes)]

    def toggle(self, u: int, v: int) -> None:
        if v in self.adj[u]:
            self.adj[u].discard(v)
            self.adj[v].discard(u)
        else:
            self.adj[u].add(v)
            self.adj[v].add(u)

    def logits_at(self, t: int) -> np.ndarray:
        adj = self.adj
        deg = lambda j: len(adj[j]) + 1  # noqa: E731
        row_t = [t, *adj[t]]
        out = np.zeros(self.w2.shape[1])
        dt = deg(t)
        for j in row_t:
            dj = deg(j)
            nb = [j, *adj[j]]
            coef = np.array([1.0 / np.sqrt(dj * deg(k)) for k in nb])
            h = np.maximum(coef @ self.xw[nb], 0.0)
            out += (h @ self.w2) / np.sqrt(dt * dj)
        return out

    def loss_at(self, t: int, label: int) -> float:
        return _mean_ce(self.logits_at(t)[None, :], np.array([label]))


def greedy_targeted_flips(g: SparseGraph, x, y, targets, budget: int, surrogate: GcnModel) -> EdgeDiff:
    """For each target in ascending order, make ``budget`` greedy flips incident to it.

    Each step evaluates the surrogate loss at the target for every incident
    flip and applies the best; ties go to the smallest pair. Pairs joining two
    targets or already flipped are skipped, so every target's incident flip
    count stays within the budget.
    """
    y = np.asarray(y)
    targets = sorted(set(int(t) for t in targets))
    for t in targets:
        if not 0 <= t < g.n_nodes:
            raise AttackError(f"target {t} out of range")
        if y[t] < 0:
            raise AttackError(f"target {t} is unlabeled")
    target_set = set(targets)
    local = _LocalGcn(g, x, surrogate)
    flipped: set[tuple[int, int]] = set()
    flips = []
    for t in targets:
        for _ in range(budget):
            best, best_pair = -np.inf, None
            for v in range(g.n_nodes):
                pair = (min(t, v), max(t, v))
                if v == t or v in target_set or pair in flipped:
                    continue
                local.toggle(t, v)
                loss = local.loss_at(t, int(y[t]))
                local.toggle(t, v)
                if loss > best:
                    best, best_pair = loss, pair
            if best_pair is None:
                break
            local.toggle(*best_pair)
            flipped.add(best_pair)
            flips.append(best_pair)
    return EdgeDiff.from_flips(flips, g)


def greedy_targeted_attack(g: SparseGraph, x, y, split: DataSplit, spec: AttackSpec) -> EdgeDiff:
    if spec.budget.b_edges == 0:
        return EdgeDiff()
    y = np.asarray(y)
    for t in spec.targets:
        if not 0 <= t < g.n_nodes or y[t] < 0:
            raise AttackError(f"target {t} is unlabeled or out of range")
    surrogate = train_surrogate(g, x, y, split, spec.surrogate)
    return greedy_targeted_flips(g, x, y, spec.targets, spec.budget.b_edges, surrogate)


def run_attack(spec: AttackSpec, g: SparseGraph, x, y, split: DataSplit) -> EdgeDiff:
    if spec.kind == "random":
        return random_flip_attack(g, y, spec)
    if spec.kind == "heterophily":
        return heterophily_inject_attack(g, y, spec)
    if spec.kind == "grad":
        return grad_untargeted_attack(g, x, y, split, spec)
    return greedy_targeted_attack(g, x, y, split, spec)


def write_diff(path, diff: EdgeDiff, kind: str, seed: int, budget: int) -> None:
    lines = [f"# kind={kind} seed={seed} budget={budget} flips={len(diff)}"]
    lines += [f"{sign} {u} {v}" for sign, u, v in diff.flips()]
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text("\n".join(lines) + "\n")
    tmp.replace(path)


def read_diff(path) -> tuple[EdgeDiff, dict[str, str]]:
    header: dict[str, str] = {}
    added, removed = set(), set()
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line:
            continue
        if line.startswith("#"):
            for tok in line[1:].split():
                key, _, val = tok.partition("=")
                header[key] = val
            continue
        parts = line.split()
        if len(parts) != 3 or parts[0] not in "+-":
            raise ValueError(f"{path}:{lineno}: expected '+ u v' or '- u v', got {line!r}")
        try:
            pair = (int(parts[1]), int(parts[2]))
        except ValueError:
            raise ValueError(f"{path}:{lineno}: node ids must be integers") from None
        (added if parts[0] == "+" else removed).add(pair)
    return EdgeDiff(frozenset(added), frozenset(removed)), header

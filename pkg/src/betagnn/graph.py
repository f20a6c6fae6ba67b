"""Graph structure, normalization, homophily, edge-diff accounting and splits."""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable

import numpy as np
import scipy.sparse as sp


class GraphError(ValueError):
    pass


def _pair(u: int, v: int) -> tuple[int, int]:
    u, v = int(u), int(v)
    return (u, v) if u < v else (v, u)


@dataclass(frozen=True, eq=False)
class SparseGraph:
    """Undirected graph stored as a symmetric CSR matrix.

    Both directions of every edge are stored. ``normalized`` marks the
    propagation operator produced by :func:`normalize_adjacency`, the only
    place where diagonal entries are allowed.
    """

    n_nodes: int
    row_offsets: np.ndarray
    col_indices: np.ndarray
    values: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        n = self.n_nodes
        ro = np.asarray(self.row_offsets, dtype=np.int64)
        ci = np.asarray(self.col_indices, dtype=np.int64)
        vals = np.asarray(self.values, dtype=np.float64)
        object.__setattr__(self, "row_offsets", ro)
        object.__setattr__(self, "col_indices", ci)
        object.__setattr__(self, "values", vals)
        if n < 0:
            raise GraphError(f"n_nodes must be >= 0, got {n}")
        if ro.shape != (n + 1,) or ro[0] != 0:
            raise GraphError("row_offsets must have length n_nodes+1 and start at 0")
        if np.any(np.diff(ro) < 0):
            raise GraphError("row_offsets must be non-decreasing")
        if ro[-1] != len(ci) or len(vals) != len(ci):
            raise GraphError("last row offset must equal the number of stored entries")
        if len(ci) and (ci.min() < 0 or ci.max() >= n):
            raise GraphError("column index out of range")
        rows = np.repeat(np.arange(n), np.diff(ro))
        if len(ci):
            same_row = rows[1:] == rows[:-1]
            if np.any(same_row & (ci[1:] <= ci[:-1])):
                raise GraphError("column indices must be strictly increasing within a row")
        if not self.normalized and np.any(rows == ci):
            raise GraphError("self-loops are not allowed")
        if not np.all(np.isfinite(vals)):
            raise GraphError("edge weights must be finite")
        m = self.to_scipy()
        if (m != m.T).nnz:
            raise GraphError("graph is not symmetric")

    @classmethod
    def from_edges(cls, n_nodes: int, edges, weights=None) -> "SparseGraph":
        """Build from undirected pairs; each pair given once in either orientation."""
        e = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        w = np.ones(len(e)) if weights is None else np.asarray(weights, dtype=np.float64)
        if len(w) != len(e):
            raise GraphError("weights and edges differ in length")
        if len(e) and (e.min() < 0 or e.max() >= n_nodes):
            raise GraphError("edge endpoint out of range")
        if np.any(e[:, 0] == e[:, 1]):
            raise GraphError("self-loops are not allowed")
        lo, hi = np.minimum(e[:, 0], e[:, 1]), np.maximum(e[:, 0], e[:, 1])
        if len(np.unique(lo * max(n_nodes, 1) + hi)) != len(e):
            raise GraphError("duplicate edges")
        rows = np.concatenate([lo, hi])
        cols = np.concatenate([hi, lo])
        m = sp.csr_matrix((np.concatenate([w, w]), (rows, cols)), shape=(n_nodes, n_nodes))
        m.sort_indices()
        return cls(n_nodes, m.indptr, m.indices, m.data)

    @classmethod
    def from_scipy(cls, m: sp.spmatrix, normalized: bool = False) -> "SparseGraph":
        m = sp.csr_matrix(m, dtype=np.float64)
        m.eliminate_zeros()
        m.sort_indices()
        return cls(m.shape[0], m.indptr, m.indices, m.data, normalized=normalized)

    @classmethod
    def empty(cls, n_nodes: int) -> "SparseGraph":
        return cls(n_nodes, np.zeros(n_nodes + 1, dtype=np.int64),
                   np.zeros(0, dtype=np.int64), np.zeros(0))

    def to_scipy(self) -> sp.csr_matrix:
        return sp.csr_matrix((self.values, self.col_indices, self.row_offsets),
                             shape=(self.n_nodes, self.n_nodes))

    @cached_property
    def csr(self) -> sp.csr_matrix:
        # shared read-only operator for spmm
        return self.to_scipy()

    def to_dense(self) -> np.ndarray:
        return self.to_scipy().toarray()

    def edges(self) -> np.ndarray:
        """Undirected edges as an (m, 2) array with u < v, lexicographically sorted."""
        rows = np.repeat(np.arange(self.n_nodes), np.diff(self.row_offsets))
        keep = rows < self.col_indices
        return np.stack([rows[keep], self.col_indices[keep]], axis=1)

    def edge_weights(self) -> np.ndarray:
        rows = np.repeat(np.arange(self.n_nodes), np.diff(self.row_offsets))
        return self.values[rows < self.col_indices]

    def edge_set(self) -> set[tuple[int, int]]:
        return {(int(u), int(v)) for u, v in self.edges()}

    @property
    def n_edges(self) -> int:
        return len(self.edges())

    def degrees(self) -> np.ndarray:
        """Weighted degree (row sums)."""
        return np.asarray(self.csr.sum(axis=1)).ravel()

    def neighbors(self, u: int) -> np.ndarray:
        return self.col_indices[self.row_offsets[u]:self.row_offsets[u + 1]]

    def is_weighted(self) -> bool:
        return bool(np.any(self.values != 1.0))

    def same_as(self, other: "SparseGraph") -> bool:
        """Bit-identical CSR comparison."""
        return (self.n_nodes == other.n_nodes and self.normalized == other.normalized
                and np.array_equal(self.row_offsets, other.row_offsets)
                and np.array_equal(self.col_indices, other.col_indices)
                and np.array_equal(self.values, other.values))


def normalize_adjacency(g: SparseGraph) -> SparseGraph:
    """Return D^-1/2 (A + I) D^-1/2 with degrees taken after adding self-loops."""
    a = (g.to_scipy() + sp.identity(g.n_nodes, format="csr")).tocoo()
    inv_sqrt = 1.0 / np.sqrt(np.bincount(a.row, weights=a.data, minlength=g.n_nodes))
    # s_u * s_v is commutative, so the result is exactly symmetric
    vals = a.data * (inv_sqrt[a.row] * inv_sqrt[a.col])
    m = sp.csr_matrix((vals, (a.row, a.col)), shape=a.shape)
    return SparseGraph.from_scipy(m, normalized=True)


def homophily_score(g: SparseGraph, y) -> float:
    """Edge homophily: fraction of undirected edges joining same-label nodes."""
    e = g.edges()
    if len(e) == 0:
        raise GraphError("undefined homophily: graph has no edges")
    y = np.asarray(y)
    return float(np.mean(y[e[:, 0]] == y[e[:, 1]]))


@dataclass(frozen=True)
class PerturbationBudget:
    b_edges: int
    # feature budget is carried for completeness; no attack here perturbs features
    b_features: float = 0.0

    def __post_init__(self):
        if self.b_edges < 0 or self.b_features < 0:
            raise ValueError("perturbation budgets must be non-negative")


@dataclass(frozen=True)
class EdgeDiff:
    added: frozenset = field(default_factory=frozenset)
    removed: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        added = frozenset(_pair(u, v) for u, v in self.added)
        removed = frozenset(_pair(u, v) for u, v in self.removed)
        object.__setattr__(self, "added", added)
        object.__setattr__(self, "removed", removed)
        if added & removed:
            raise GraphError("a pair cannot be both added and removed")
        if any(u == v for u, v in added | removed):
            raise GraphError("self-loop pairs are not allowed in a diff")

    def __len__(self) -> int:
        return edge_diff_size(self)

    def inverse(self) -> "EdgeDiff":
        return EdgeDiff(added=self.removed, removed=self.added)

    def flips(self) -> list[tuple[str, int, int]]:
        """Sorted ``(sign, u, v)`` records, ``+`` for additions."""
        out = [("+", u, v) for u, v in self.added] + [("-", u, v) for u, v in self.removed]
        return sorted(out, key=lambda r: (r[1], r[2], r[0]))

    def touching(self, node: int) -> int:
        return sum(1 for p in self.added | self.removed if node in p)

    def check_against(self, g: SparseGraph) -> None:
        edges = g.edge_set()
        if not self.removed <= edges:
            missing = sorted(self.removed - edges)[:3]
            raise GraphError(f"diff removes absent edges, e.g. {missing}")
        if self.added & edges:
            present = sorted(self.added & edges)[:3]
            raise GraphError(f"diff adds existing edges, e.g. {present}")
        for u, v in self.added | self.removed:
            if v >= g.n_nodes:
                raise GraphError(f"pair ({u}, {v}) out of range for {g.n_nodes} nodes")

    @classmethod
    def from_flips(cls, flips: Iterable[tuple[int, int]], g: SparseGraph) -> "EdgeDiff":
        """Interpret pairs as toggles of ``g``; flipping a pair twice cancels."""
        edges = g.edge_set()
        toggled: set[tuple[int, int]] = set()
        for u, v in flips:
            toggled ^= {_pair(u, v)}
        return cls(added=frozenset(p for p in toggled if p not in edges),
                   removed=frozenset(p for p in toggled if p in edges))


def edge_diff_size(d: EdgeDiff) -> int:
    return len(d.added) + len(d.removed)


def apply_edge_diff(g: SparseGraph, d: EdgeDiff) -> SparseGraph:
    if not d.added and not d.removed:
        return g
    d.check_against(g)
    weights = dict(zip(map(tuple, g.edges().tolist()), g.edge_weights()))
    for p in d.removed:
        del weights[p]
    for p in d.added:
        weights[p] = 1.0
    pairs = sorted(weights)
    return SparseGraph.from_edges(g.n_nodes, np.array(pairs, dtype=np.int64).reshape(-1, 2),
                                  [weights[p] for p in pairs])


@dataclass(frozen=True, eq=False)
class DataSplit:
    train_mask: np.ndarray
    val_mask: np.ndarray
    test_mask: np.ndarray

    def __post_init__(self):
        masks = [np.asarray(m, dtype=bool) for m in (self.train_mask, self.val_mask, self.test_mask)]
        if len({m.shape for m in masks}) != 1:
            raise ValueError("split masks differ in length")
        if np.any(masks[0] & masks[1]) or np.any(masks[0] & masks[2]) or np.any(masks[1] & masks[2]):
            raise ValueError("split masks must be disjoint")
        for name, m in zip(("train_mask", "val_mask", "test_mask"), masks):
            object.__setattr__(self, name, m)

    def with_test(self, test_mask) -> "DataSplit":
        test_mask = np.asarray(test_mask, dtype=bool)
        return DataSplit(self.train_mask, self.val_mask & ~test_mask, test_mask & ~self.train_mask)


def _ratio_count(n: int, ratio: float) -> int:
    return int(np.floor(ratio * n + 0.5))


def make_split(n_nodes: int, seed: int, train_ratio: float = 0.1, val_ratio: float = 0.1) -> DataSplit:
    """Uniform random train/val/test split (10/10/80 by default)."""
    if n_nodes < 10:
        raise ValueError(f"need at least 10 nodes for a split, got {n_nodes}")
    perm = np.random.default_rng(seed).permutation(n_nodes)
    n_train, n_val = _ratio_count(n_nodes, train_ratio), _ratio_count(n_nodes, val_ratio)
    masks = [np.zeros(n_nodes, dtype=bool) for _ in range(3)]
    masks[0][perm[:n_train]] = True
    masks[1][perm[n_train:n_train + n_val]] = True
    masks[2][perm[n_train + n_val:]] = True
    return DataSplit(*masks)

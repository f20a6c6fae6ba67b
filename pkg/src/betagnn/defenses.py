"""Preprocessing defenses: Jaccard edge pruning and low-rank graph cleaning."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .graph import GraphError, SparseGraph

DENSE_LIMIT = 5000
ZERO_CUTOFF = 1e-8


def jaccard_similarity(x, edges: np.ndarray) -> np.ndarray:
    """Jaccard index of the binarized (``x > 0``) feature sets at each edge's endpoints.

    An empty union gives 0 rather than 0/0.
    """
    b = np.asarray(x) > 0
    if len(edges) == 0:
        return np.zeros(0)
    bu, bv = b[edges[:, 0]], b[edges[:, 1]]
    inter = np.sum(bu & bv, axis=1)
    union = np.sum(bu | bv, axis=1)
    return np.divide(inter, union, out=np.zeros(len(edges)), where=union > 0)


def jaccard_prune(g: SparseGraph, x, tau: float = 0.01) -> SparseGraph:
    """Drop every edge whose endpoint feature sets have Jaccard index below ``tau``."""
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau must lie in [0, 1], got {tau}")
    x = np.asarray(x)
    if x.shape[0] != g.n_nodes:
        raise GraphError(f"feature rows {x.shape[0]} != nodes {g.n_nodes}")
    edges = g.edges()
    keep = jaccard_similarity(x, edges) >= tau
    weights = g.edge_weights()[keep] if g.is_weighted() else None
    return SparseGraph.from_edges(g.n_nodes, edges[keep], weights)


@dataclass(frozen=True)
class LowRankFactors:
    u: np.ndarray
    s: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        if np.any(self.s < 0) or np.any(np.diff(self.s) > 0):
            raise ValueError("singular values must be non-negative and descending")

    @property
    def rank(self) -> int:
        return len(self.s)

    def reconstruct(self) -> np.ndarray:
        return (self.u * self.s) @ self.v.T


def low_rank_factors(m: np.ndarray, k: int, iters: int = 4, seed: int = 0,
                     oversample: int = 10) -> LowRankFactors:
    """Rank-``k`` SVD by randomized subspace iteration.

    A Gaussian sketch of ``k + oversample`` columns is pushed through
    ``iters`` rounds of ``M M^T``, re-orthonormalized by QR each half-step,
    and the small projected matrix is decomposed exactly.
    """
    m = np.asarray(m, dtype=np.float64)
    n_rows, n_cols = m.shape
    if not 1 <= k <= min(n_rows, n_cols):
        raise ValueError(f"rank k={k} outside [1, {min(n_rows, n_cols)}]")
    if iters < 2:
        raise ValueError(f"need at least 2 power iterations, got {iters}")
    width = min(k + oversample, n_rows, n_cols)
    rng = np.random.default_rng(seed)
    q, _ = np.linalg.qr(m @ rng.standard_normal((n_cols, width)))
    for _ in range(iters):
        w, _ = np.linalg.qr(m.T @ q)
        q, _ = np.linalg.qr(m @ w)
    ub, s, vt = np.linalg.svd(q.T @ m, full_matrices=False)
    return LowRankFactors(q @ ub[:, :k], s[:k], vt[:k].T)


def truncated_svd_clean(g: SparseGraph, k: int = 15, iters: int = 4, seed: int = 0) -> SparseGraph:
    """Replace the adjacency with its rank-``k`` reconstruction as a weighted graph.

    Entries are clipped to [0, 1], values below 1e-8 become exact zeros, the
    result is symmetrized and the diagonal dropped (self-loops are re-added
    by normalization downstream).
    """
    n = g.n_nodes
    if n > DENSE_LIMIT:
        raise GraphError(f"truncated SVD needs a dense adjacency; {n} nodes exceeds {DENSE_LIMIT}")
    a = low_rank_factors(g.to_dense(), k, iters, seed).reconstruct()
    a = np.clip((a + a.T) / 2, 0.0, 1.0)
    a[a < ZERO_CUTOFF] = 0.0
    np.fill_diagonal(a, 0.0)
    u, v = np.nonzero(np.triu(a, 1))
    return SparseGraph.from_edges(n, np.stack([u, v], axis=1), a[u, v])

"""Dataset directories, synthetic SBM graphs and converters for public benchmarks.

A dataset directory holds four files::

    edges.txt      one "u v" pair per line, 0-based, u < v (optional third column: weight)
    features.csv   n rows of d comma-separated reals
    labels.txt     n lines, one class id each
    meta.json      {"name", "n_nodes", "n_features", "n_classes"} (+ "n_edges" when known)
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .graph import SparseGraph


class DatasetFormatError(ValueError):
    pass


@dataclass
class Dataset:
    graph: SparseGraph
    features: np.ndarray
    labels: np.ndarray
    manifest: dict

    @property
    def n_classes(self) -> int:
        return int(self.manifest["n_classes"])

    @property
    def name(self) -> str:
        return str(self.manifest.get("name", "unnamed"))


def check_features(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] < 1:
        raise DatasetFormatError(f"features must be an n x d matrix with d >= 1, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise DatasetFormatError("features contain non-finite values")
    return x


def check_labels(y, n_classes: int) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim != 1 or not np.issubdtype(y.dtype, np.integer):
        raise DatasetFormatError("labels must be a 1-D integer array")
    if len(y) and (y.min() < 0 or y.max() >= n_classes):
        raise DatasetFormatError(f"label ids must lie in [0, {n_classes})")
    return y.astype(np.int64)


def _read_edges(path: Path, n_nodes: int) -> SparseGraph:
    pairs, weights, seen = [], [], set()
    weighted = False
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) not in (2, 3):
                raise DatasetFormatError(f"{path}:{lineno}: expected 'u v' or 'u v w', got {line.strip()!r}")
            try:
                u, v = int(parts[0]), int(parts[1])
                w = float(parts[2]) if len(parts) == 3 else 1.0
            except ValueError:
                raise DatasetFormatError(f"{path}:{lineno}: malformed edge line {line.strip()!r}") from None
            weighted |= len(parts) == 3
            if u == v:
                raise DatasetFormatError(f"{path}:{lineno}: self-loop ({u}, {v})")
            if not (0 <= u < n_nodes and 0 <= v < n_nodes):
                raise DatasetFormatError(f"{path}:{lineno}: node id out of range [0, {n_nodes})")
            key = (min(u, v), max(u, v))
            if key in seen:
                raise DatasetFormatError(f"{path}:{lineno}: duplicate edge {key}")
            if not np.isfinite(w) or w <= 0:
                raise DatasetFormatError(f"{path}:{lineno}: edge weight must be positive and finite")
            seen.add(key)
            pairs.append(key)
            weights.append(w)
    edges = np.array(pairs, dtype=np.int64).reshape(-1, 2)
    return SparseGraph.from_edges(n_nodes, edges, weights if weighted else None)


def _read_features(path: Path) -> np.ndarray:
    rows = []
    width = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                row = [float(v) for v in line.split(",")]
            except ValueError:
                raise DatasetFormatError(f"{path}:{lineno}: non-numeric feature value") from None
            if width is None:
                width = len(row)
            elif len(row) != width:
                raise DatasetFormatError(f"{path}:{lineno}: expected {width} columns, got {len(row)}")
            if not all(np.isfinite(row)):
                raise DatasetFormatError(f"{path}:{lineno}: non-finite feature value")
            rows.append(row)
    return np.array(rows, dtype=np.float64).reshape(len(rows), width or 0)


def _read_labels(path: Path) -> np.ndarray:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(int(line))
            except ValueError:
                raise DatasetFormatError(f"{path}:{lineno}: label must be an integer, got {line.strip()!r}") from None
    return np.array(out, dtype=np.int64)


def load_dataset(path) -> Dataset:
    path = Path(path)
    try:
        manifest = json.loads((path / "meta.json").read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise DatasetFormatError(f"{path}: missing meta.json") from None
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(f"{path / 'meta.json'}:{exc.lineno}: {exc.msg}") from None
    for key in ("n_nodes", "n_features", "n_classes"):
        if key not in manifest:
            raise DatasetFormatError(f"{path / 'meta.json'}: missing key {key!r}")
    n = int(manifest["n_nodes"])
    graph = _read_edges(path / "edges.txt", n)
    x = _read_features(path / "features.csv")
    y = _read_labels(path / "labels.txt")
    found = {"n_nodes": len(y), "n_features": x.shape[1], "n_classes": int(y.max()) + 1 if len(y) else 0}
    mismatch = []
    if x.shape[0] != n:
        mismatch.append(f"feature rows: expected {n}, found {x.shape[0]}")
    for key in ("n_nodes", "n_features"):
        if found[key] != int(manifest[key]):
            mismatch.append(f"{key}: expected {manifest[key]}, found {found[key]}")
    if found["n_classes"] > int(manifest["n_classes"]):
        mismatch.append(f"n_classes: expected {manifest['n_classes']}, found {found['n_classes']}")
    if "n_edges" in manifest and graph.n_edges != int(manifest["n_edges"]):
        mismatch.append(f"n_edges: expected {manifest['n_edges']}, found {graph.n_edges}")
    if mismatch:
        raise DatasetFormatError(f"{path}: manifest mismatch; " + "; ".join(mismatch))
    return Dataset(graph, check_features(x), check_labels(y, int(manifest["n_classes"])), manifest)


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    tmp.replace(path)


def save_dataset(ds: Dataset, path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    g = ds.graph
    edges = g.edges()
    if g.is_weighted():
        lines = [f"{u} {v} {w!r}" for (u, v), w in zip(edges.tolist(), g.edge_weights().tolist())]
    else:
        lines = [f"{u} {v}" for u, v in edges.tolist()]
    _atomic_write(path / "edges.txt", "".join(line + "\n" for line in lines))
    _atomic_write(path / "features.csv",
                  "".join(",".join(repr(float(v)) for v in row) + "\n" for row in ds.features))
    _atomic_write(path / "labels.txt", "".join(f"{int(c)}\n" for c in ds.labels))
    manifest = dict(ds.manifest)
    manifest.update(n_nodes=g.n_nodes, n_features=int(ds.features.shape[1]),
                    n_edges=int(len(edges)))
    manifest.setdefault("n_classes", int(ds.labels.max()) + 1)
    _atomic_write(path / "meta.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def generate_sbm(n: int, n_classes: int, p_in: float, p_out: float, feature_dim: int = 32,
                 feature_noise: float = 1.0, seed: int = 0, name: str = "sbm") -> Dataset:
    """Balanced stochastic block model with class-mean Gaussian features."""
    if not (0.0 <= p_in <= 1.0 and 0.0 <= p_out <= 1.0):
        raise ValueError("edge probabilities must lie in [0, 1]")
    if n_classes < 2 or n < 2 * n_classes or feature_dim < 1 or feature_noise < 0:
        raise ValueError(f"degenerate SBM: n={n}, classes={n_classes}, feature_dim={feature_dim}")
    rng = np.random.default_rng(seed)
    y = (np.arange(n) * n_classes) // n
    iu, iv = np.triu_indices(n, 1)
    prob = np.where(y[iu] == y[iv], p_in, p_out)
    keep = rng.random(len(iu)) < prob
    graph = SparseGraph.from_edges(n, np.stack([iu[keep], iv[keep]], axis=1))
    means = rng.standard_normal((n_classes, feature_dim))
    x = means[y] + feature_noise * rng.standard_normal((n, feature_dim))
    manifest = {"name": name, "n_nodes": n, "n_features": feature_dim, "n_classes": n_classes,
                "generator": "sbm", "p_in": p_in, "p_out": p_out, "feature_noise": feature_noise,
                "seed": seed}
    return Dataset(graph, x, y.astype(np.int64), manifest)


def import_npz(path, name: str | None = None) -> Dataset:
    """Convert a CSR-packed ``.npz`` benchmark file (adj_*, attr_*, labels keys).

    This is the layout used by the widely distributed pre-processed
    Cora/Citeseer/Pubmed files for robustness studies. Directed or duplicate
    entries are symmetrized and binarized; self-loops are dropped.
    """
    import scipy.sparse as sp

    path = Path(path)
    with np.load(path, allow_pickle=True) as raw:
        keys = set(raw.files)
        adj = sp.csr_matrix((raw["adj_data"], raw["adj_indices"], raw["adj_indptr"]),
                            shape=tuple(raw["adj_shape"]))
        if "attr_data" in keys:
            x = sp.csr_matrix((raw["attr_data"], raw["attr_indices"], raw["attr_indptr"]),
                              shape=tuple(raw["attr_shape"])).toarray()
        elif "attr_matrix" in keys:
            x = np.asarray(raw["attr_matrix"])
        else:
            x = np.eye(adj.shape[0])
        y = np.asarray(raw["labels"]).astype(np.int64)
    adj = ((adj + adj.T) > 0).astype(np.float64).tocsr()
    adj.setdiag(0)
    adj.eliminate_zeros()
    graph = SparseGraph.from_scipy(adj)
    manifest = {"name": name or path.stem, "n_nodes": graph.n_nodes,
                "n_features": int(x.shape[1]), "n_classes": int(y.max()) + 1}
    return Dataset(graph, check_features(x), y, manifest)

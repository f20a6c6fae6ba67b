"""MLP, GCN and GPR-style backbones producing n x C logits."""
from __future__ import annotations

from pathlib import Path
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, ShapeError, Tape, Tensor

CHECKPOINT_HEADER = "betagnn-checkpoint v1"


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def _input(tape: Tape, x) -> Tensor:
    return x if isinstance(x, Tensor) else tape.constant(x)


def _check_features(x: Tensor, d: int, who: str) -> None:
    if x.shape[1] != d:
        raise ShapeError(f"{who}: expected {d} feature columns, got input of shape {x.shape}")


class Model:
    """Shared plumbing; subclasses define ``forward``."""

    n_classes: int

    def parameters(self) -> list[Parameter]:
        raise NotImplementedError

    def trainable(self) -> list[Parameter]:
        """Parameters the optimizer updates; by default all of them."""
        return self.parameters()

    def forward(self, tape: Tape, a_hat, x, training: bool = False,
                seed: int = 0, epoch: int = 0) -> Tensor:
        raise NotImplementedError

    def state_dict(self) -> dict[str, np.ndarray]:
        return {p.name: p.value.copy() for p in self.parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = {p.name: p for p in self.parameters()}
        missing = sorted(set(params) - set(state))
        unknown = sorted(set(state) - set(params))
        if missing or unknown:
            raise KeyError(f"state mismatch: missing {missing}, unexpected {unknown}")
        for name, p in params.items():
            if state[name].shape != p.shape:
                raise ShapeError(f"{name}: checkpoint shape {state[name].shape} != {p.shape}")
            p.value[...] = state[name]


class MlpModel(Model):
    """Feature-only classifier; never reads the graph."""

    def __init__(self, dims: list[int], dropout: float = 0.5, seed: int = 0,
                 prefix: str = "mlp", layer_base: int = 0):
        if len(dims) < 3:
            raise ValueError(f"MLP needs at least one hidden layer, got dims {dims}")
        rng = np.random.default_rng(seed)
        self.dims = list(dims)
        self.dropout = dropout
        self.layer_base = layer_base
        self.weights = [Parameter(glorot(rng, a, b), f"{prefix}.w{i}")
                        for i, (a, b) in enumerate(zip(dims[:-1], dims[1:]))]
        self.biases = [Parameter(np.zeros((1, b)), f"{prefix}.b{i}") for i, b in enumerate(dims[1:])]
        self.n_classes = dims[-1]

    def parameters(self):
        return [p for pair in zip(self.weights, self.biases) for p in pair]

    def forward(self, tape, a_hat, x, training=False, seed=0, epoch=0):
        h = _input(tape, x)
        _check_features(h, self.dims[0], "mlp_forward")
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = ad.dropout(h, self.dropout, (seed, self.layer_base + i, epoch), training)
            h = ad.add_bias(ad.matmul(h, tape.param(w)), tape.param(b))
            if i < last:
                h = ad.relu(h)
        return h


class GcnModel(Model):
    """Stacked propagation layers H' = relu(A_hat H W), linear on the last layer."""

    def __init__(self, dims: list[int], dropout: float = 0.5, seed: int = 0,
                 prefix: str = "gcn", layer_base: int = 0):
        if len(dims) < 3:
            raise ValueError(f"GCN needs K >= 2 layers, got dims {dims}")
        rng = np.random.default_rng(seed)
        self.dims = list(dims)
        self.dropout = dropout
        self.layer_base = layer_base
        self.weights = [Parameter(glorot(rng, a, b), f"{prefix}.w{i}")
                        for i, (a, b) in enumerate(zip(dims[:-1], dims[1:]))]
        self.n_classes = dims[-1]

    def parameters(self):
        return list(self.weights)

    def forward(self, tape, a_hat, x, training=False, seed=0, epoch=0):
        h = _input(tape, x)
        _check_features(h, self.dims[0], "gcn_forward")
        if a_hat.n_nodes != h.shape[0]:
            raise ShapeError(f"gcn_forward: operator on {a_hat.n_nodes} nodes, features {h.shape}")
        last = len(self.weights) - 1
        for i, w in enumerate(self.weights):
            h = ad.dropout(h, self.dropout, (seed, self.layer_base + i, epoch), training)
            h = ad.spmm(a_hat, ad.matmul(h, tape.param(w)))
            if i < last:
                h = ad.relu(h)
        return h


def ppr_weights(k: int, alpha: float = 0.1) -> np.ndarray:
    """Personalized-PageRank hop weights; positive, decaying, summing to 1."""
    w = alpha * (1.0 - alpha) ** np.arange(k + 1)
    w[-1] = (1.0 - alpha) ** k
    return w


class GprModel(Model):
    """MLP embedding followed by learned hop weights over powers of A_hat."""

    def __init__(self, dims: list[int], k: int = 4, alpha: float = 0.1, dropout: float = 0.5,
                 seed: int = 0, prefix: str = "gpr", layer_base: int = 0):
        if k < 1:
            raise ValueError(f"GPR needs K >= 1 hops, got {k}")
        self.mlp = MlpModel(dims, dropout=dropout, seed=seed, prefix=f"{prefix}.mlp",
                            layer_base=layer_base)
        self.k = k
        self.gammas = [Parameter([[g]], f"{prefix}.gamma{i}") for i, g in enumerate(ppr_weights(k, alpha))]
        self.n_classes = dims[-1]

    @property
    def dims(self):
        return self.mlp.dims

    def parameters(self):
        return self.mlp.parameters() + list(self.gammas)

    def forward(self, tape, a_hat, x, training=False, seed=0, epoch=0):
        z = self.mlp.forward(tape, a_hat, x, training, seed, epoch)
        if a_hat.n_nodes != z.shape[0]:
            raise ShapeError(f"gpr_forward: operator on {a_hat.n_nodes} nodes, features {z.shape}")
        out = ad.axpy(tape.param(self.gammas[0]), z)
        hop = z
        for gamma in self.gammas[1:]:
            hop = ad.spmm(a_hat, hop)
            out = ad.axpy(tape.param(gamma), hop, out)
        return out


def mlp_forward(m: MlpModel, x, training: bool = False, *, tape: Optional[Tape] = None,
                seed: int = 0, epoch: int = 0) -> Tensor:
    return m.forward(tape or Tape(), None, x, training, seed, epoch)


def gcn_forward(m: GcnModel, a_hat, x, training: bool = False, *, tape: Optional[Tape] = None,
                seed: int = 0, epoch: int = 0) -> Tensor:
    return m.forward(tape or Tape(), a_hat, x, training, seed, epoch)


def gpr_forward(m: GprModel, a_hat, x, training: bool = False, *, tape: Optional[Tape] = None,
                seed: int = 0, epoch: int = 0) -> Tensor:
    return m.forward(tape or Tape(), a_hat, x, training, seed, epoch)


def save_checkpoint(model: Model, path) -> None:
    """Text checkpoint: header line, then ``name rows cols`` and one line of values per tensor."""
    lines = [CHECKPOINT_HEADER]
    for p in model.parameters():
        lines.append(f"{p.name} {p.shape[0]} {p.shape[1]}")
        lines.append(" ".join(repr(float(v)) for v in p.value.ravel()))
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text("\n".join(lines) + "\n")
    tmp.replace(path)


def read_checkpoint(path) -> dict[str, np.ndarray]:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0].strip() != CHECKPOINT_HEADER:
        raise ValueError(f"{path}: not a checkpoint (expected header {CHECKPOINT_HEADER!r})")
    if (len(lines) - 1) % 2:
        raise ValueError(f"{path}: truncated checkpoint")
    state = {}
    for i in range(1, len(lines), 2):
        name, rows, cols = lines[i].split()
        values = np.array([float(v) for v in lines[i + 1].split()])
        state[name] = values.reshape(int(rows), int(cols))
    return state


def load_checkpoint(model: Model, path) -> None:
    model.load_state_dict(read_checkpoint(path))

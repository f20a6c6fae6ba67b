"""Learned-weighted backbone/MLP ensemble, the training loop and beta trajectories."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, ShapeError, Tape, Tensor
from .graph import DataSplit, SparseGraph, normalize_adjacency
from .models import GcnModel, GprModel, MlpModel, Model
from .optim import AdamState, adam_step, clip_grad_norm

# dropout streams of the MLP member must not collide with the backbone's
MLP_LAYER_BASE = 100


class TrainingDivergedError(FloatingPointError):
    pass


class BetaEnsemble(Model):
    """``beta * backbone(A_hat, X) + (1 - beta) * mlp(X)`` on the logits.

    ``beta = sigmoid(beta_raw)``. Setting ``fixed_beta`` pins the weight to a
    constant and removes ``beta_raw`` from the trainable parameters.
    """

    def __init__(self, backbone: Model, mlp: MlpModel, beta_raw: float = 0.0,
                 fixed_beta: Optional[float] = None):
        if backbone.n_classes != mlp.n_classes:
            raise ShapeError(f"backbone emits {backbone.n_classes} classes, MLP {mlp.n_classes}")
        if fixed_beta is not None and not 0.0 <= fixed_beta <= 1.0:
            raise ValueError(f"fixed_beta must lie in [0, 1], got {fixed_beta}")
        self.backbone = backbone
        self.mlp = mlp
        self.beta_raw = Parameter([[beta_raw]], "beta_raw")
        self.fixed_beta = fixed_beta
        self.n_classes = mlp.n_classes

    @property
    def beta(self) -> float:
        if self.fixed_beta is not None:
            return float(self.fixed_beta)
        return _sigmoid(float(self.beta_raw.value[0, 0]))

    def parameters(self):
        params = self.backbone.parameters() + self.mlp.parameters()
        return params if self.fixed_beta is not None else params + [self.beta_raw]

    def trainable(self):
        # a member with zero weight gets no loss gradient; leave it out so that
        # decay and clipping match training that member's partner alone
        if self.fixed_beta == 1.0:
            return self.backbone.parameters()
        if self.fixed_beta == 0.0:
            return self.mlp.parameters()
        return self.parameters()

    def state_dict(self):
        state = super().state_dict()
        state.setdefault("beta_raw", self.beta_raw.value.copy())
        return state

    def load_state_dict(self, state):
        state = dict(state)
        raw = state.pop("beta_raw", None)
        if self.fixed_beta is None and raw is None:
            raise KeyError("state mismatch: missing ['beta_raw']")
        if raw is not None:
            self.beta_raw.value[...] = raw
        params = self.backbone.parameters() + self.mlp.parameters()
        Model.load_state_dict(_Params(params), state)

    def member_logits(self, tape, a_hat, x, training=False, seed=0, epoch=0) -> tuple[Tensor, Tensor]:
        x = x if isinstance(x, Tensor) else tape.constant(x)
        f = self.backbone.forward(tape, a_hat, x, training, seed, epoch)
        g = self.mlp.forward(tape, a_hat, x, training, seed, epoch)
        if f.shape != g.shape:
            raise ShapeError(f"ensemble members disagree: backbone {f.shape}, mlp {g.shape}")
        return f, g

    def forward(self, tape, a_hat, x, training=False, seed=0, epoch=0):
        f, g = self.member_logits(tape, a_hat, x, training, seed, epoch)
        if self.fixed_beta is not None:
            beta = tape.constant([[self.fixed_beta]])
        else:
            beta = ad.sigmoid(tape.param(self.beta_raw))
        return ad.add(ad.axpy(beta, f), ad.axpy(ad.one_minus(beta), g))


class _Params(Model):
    def __init__(self, params):
        self._params = params

    def parameters(self):
        return self._params


def _sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def ensemble_forward(e: BetaEnsemble, a_hat, x, training: bool = False, *,
                     tape: Optional[Tape] = None, seed: int = 0, epoch: int = 0) -> Tensor:
    return e.forward(tape or Tape(), a_hat, x, training, seed, epoch)


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    ez = np.exp(z)
    return ez / ez.sum(axis=1, keepdims=True)


def beta_grad_closed_form(e: BetaEnsemble, a_hat, x, y, mask) -> float:
    """dL/dbeta = sum over masked entries of dL/dy_hat * (f - g), without the tape.

    Uses the eval-mode member outputs and the mean cross-entropy over ``mask``.
    """
    idx = np.flatnonzero(np.asarray(mask, dtype=bool))
    if len(idx) == 0:
        raise ValueError("loss mask selects no nodes")
    tape = Tape()
    f, g = e.member_logits(tape, a_hat, x)
    f, g = f.value, g.value
    beta = e.beta
    y_hat = beta * f + (1.0 - beta) * g
    dl_dy = _softmax(y_hat[idx])
    dl_dy[np.arange(len(idx)), np.asarray(y)[idx]] -= 1.0
    dl_dy /= len(idx)
    return float(np.sum(dl_dy * (f[idx] - g[idx])))


@dataclass
class TrainConfig:
    epochs: int = 200
    lr: float = 0.01
    clip_norm: float = 5.0
    dropout: float = 0.5
    hidden: int = 64
    seed: int = 0
    weight_decay: float = 5e-3

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.lr <= 0 or self.clip_norm <= 0:
            raise ValueError("lr and clip_norm must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")


@dataclass
class TrajectoryRecord:
    epoch: int
    beta: Optional[float]
    train_loss: float
    val_acc: float


@dataclass
class BetaTrajectory:
    records: list[TrajectoryRecord] = field(default_factory=list)
    best_epoch: Optional[int] = None

    def append(self, rec: TrajectoryRecord) -> None:
        if self.records and rec.epoch <= self.records[-1].epoch:
            raise ValueError("trajectory epochs must be strictly increasing")
        if rec.beta is not None and not 0.0 < rec.beta < 1.0:
            raise ValueError(f"beta {rec.beta} outside (0, 1)")
        self.records.append(rec)

    @property
    def betas(self) -> np.ndarray:
        return np.array([r.beta for r in self.records], dtype=float)

    @property
    def final_beta(self) -> Optional[float]:
        return self.records[-1].beta if self.records else None

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "beta", "train_loss", "val_acc"])
        for r in self.records:
            w.writerow([r.epoch, "" if r.beta is None else f"{r.beta:.6f}",
                        f"{r.train_loss:.6f}", f"{r.val_acc:.6f}"])
        return buf.getvalue()

    def write_csv(self, path) -> None:
        _atomic_write(Path(path), self.to_csv())

    @classmethod
    def read_csv(cls, path) -> "BetaTrajectory":
        traj = cls()
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                traj.append(TrajectoryRecord(int(row["epoch"]),
                                             float(row["beta"]) if row["beta"] else None,
                                             float(row["train_loss"]), float(row["val_acc"])))
        return traj


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)


def accuracy(logits: np.ndarray, y, mask) -> float:
    """Argmax accuracy over ``mask``; ties go to the lowest class index."""
    idx = np.flatnonzero(np.asarray(mask, dtype=bool))
    if len(idx) == 0:
        raise ValueError("accuracy mask selects no nodes")
    pred = np.argmax(np.asarray(logits)[idx], axis=1)
    return float(np.mean(pred == np.asarray(y)[idx]))


def predict(model: Model, a_hat, x) -> np.ndarray:
    return model.forward(Tape(), a_hat, x, training=False).value


def evaluate(model: Model, a_hat, x, y, mask) -> float:
    return accuracy(predict(model, a_hat, x), y, mask)


class TrainResult(NamedTuple):
    model: Model
    trajectory: BetaTrajectory
    test_accuracy: float


def train(model: Model, g: SparseGraph, x, y, split: DataSplit, cfg: TrainConfig,
          a_hat: Optional[SparseGraph] = None) -> TrainResult:
    """Full-batch training with Adam and gradient clipping.

    Reports test accuracy at the epoch with the best validation accuracy and
    restores the parameters from that epoch.
    """
    a_hat = normalize_adjacency(g) if a_hat is None else a_hat
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    params = model.trainable()
    state = AdamState(lr=cfg.lr)
    traj = BetaTrajectory()
    best_val, best_test, best_state = -1.0, 0.0, None
    has_beta = isinstance(model, BetaEnsemble) and model.fixed_beta is None
    # L2 on weight matrices only; biases, hop weights and beta_raw are not shrunk
    decayed = [p for p in params if p.shape[0] > 1 and p.shape[1] > 1]
    for epoch in range(1, cfg.epochs + 1):
        tape = Tape()
        try:
            logits = model.forward(tape, a_hat, x, training=True, seed=cfg.seed, epoch=epoch)
            loss = ad.cross_entropy_loss(logits, y, split.train_mask)
            tape.backward(loss)
        except FloatingPointError as exc:
            raise TrainingDivergedError(f"non-finite loss at epoch {epoch}: {exc}") from exc
        if cfg.weight_decay:
            for p in decayed:
                p.grad += cfg.weight_decay * p.value
        clip_grad_norm(params, cfg.clip_norm)
        adam_step(state, params)
        if not all(np.all(np.isfinite(p.value)) for p in params):
            raise TrainingDivergedError(f"non-finite parameters at epoch {epoch}")
        try:
            out = predict(model, a_hat, x)
        except FloatingPointError as exc:
            raise TrainingDivergedError(f"non-finite logits at epoch {epoch}: {exc}") from exc
        val = accuracy(out, y, split.val_mask)
        traj.append(TrajectoryRecord(epoch, model.beta if has_beta else None, loss.item(), val))
        if val > best_val:
            best_val, best_test = val, accuracy(out, y, split.test_mask)
            best_state = model.state_dict()
            traj.best_epoch = epoch
    model.load_state_dict(best_state)
    return TrainResult(model, traj, best_test)


MODEL_KINDS = ("mlp", "gcn", "gpr", "beta-gcn", "beta-gpr")


def build_model(kind: str, n_features: int, n_classes: int, hidden: int = 64,
                dropout: float = 0.5, seed: int = 0, gcn_layers: int = 2, gpr_k: int = 4) -> Model:
    """Construct a model; ensemble members draw from the same init streams as the vanilla models."""
    if kind not in MODEL_KINDS:
        raise ValueError(f"unknown model kind {kind!r}; expected one of {MODEL_KINDS}")
    backbone_seed, mlp_seed = np.random.SeedSequence(seed).generate_state(2)
    dims = [n_features] + [hidden] * (gcn_layers - 1) + [n_classes]
    mlp_dims = [n_features, hidden, n_classes]
    if kind == "mlp":
        return MlpModel(mlp_dims, dropout, seed=mlp_seed)
    if kind.endswith("gcn"):
        backbone = GcnModel(dims, dropout, seed=backbone_seed)
    else:
        backbone = GprModel(mlp_dims, k=gpr_k, dropout=dropout, seed=backbone_seed)
    if not kind.startswith("beta-"):
        return backbone
    return BetaEnsemble(backbone, MlpModel(mlp_dims, dropout, seed=mlp_seed, layer_base=MLP_LAYER_BASE))

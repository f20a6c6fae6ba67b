"""Dense 2-D tensors with a reverse-mode tape.

Every op records its output on the tape of its inputs together with a
closure mapping the output gradient to input gradients. ``Tape.backward``
walks the entries once, newest first, and accumulates into the ``grad``
buffers of the :class:`Parameter` leaves.

All values are float64 and 2-D; scalars are 1x1.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np


class ShapeError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


class Parameter:
    """Trainable dense value with a gradient accumulator."""

    def __init__(self, value, name: str):
        value = np.array(value, dtype=np.float64)
        if value.ndim == 0:
            value = value.reshape(1, 1)
        if value.ndim != 2:
            raise ShapeError(f"parameter {name!r} must be 2-D, got shape {value.shape}")
        self.value = value
        self.grad = np.zeros_like(value)
        self.name = name

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


class Tensor:
    __slots__ = ("value", "tape", "id")

    def __init__(self, value: np.ndarray, tape: "Tape", id: int):
        self.value = value
        self.tape = tape
        self.id = id

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    def item(self) -> float:
        if self.value.size != 1:
            raise ShapeError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.value[0, 0])

    def __repr__(self) -> str:
        return f"Tensor(id={self.id}, shape={self.shape})"


@dataclass
class _Entry:
    kind: str
    inputs: tuple[int, ...]
    output: int
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tape:
    """Ordered record of one forward pass."""

    def __init__(self):
        self.entries: list[_Entry] = []
        self._n_nodes = 0
        self._params: dict[int, Parameter] = {}
        self._param_nodes: dict[int, Tensor] = {}
        self._consumed = False

    def _new(self, value: np.ndarray) -> Tensor:
        t = Tensor(value, self, self._n_nodes)
        self._n_nodes += 1
        return t

    def param(self, p: Parameter) -> Tensor:
        """Leaf node bound to ``p``; repeated calls return the same node."""
        node = self._param_nodes.get(id(p))
        if node is None:
            node = self._new(p.value)
            self._param_nodes[id(p)] = node
            self._params[node.id] = p
        return node

    def constant(self, value) -> Tensor:
        value = np.asarray(value, dtype=np.float64)
        if value.ndim == 1:
            value = value.reshape(-1, 1)
        if value.ndim != 2:
            raise ShapeError(f"constants must be 1-D or 2-D, got shape {value.shape}")
        return self._new(value)

    def record(self, kind: str, inputs: Sequence[Tensor], value: np.ndarray, backward) -> Tensor:
        for t in inputs:
            if t.tape is not self:
                raise TapeError(f"{kind}: inputs belong to different tapes")
        if self._consumed:
            raise TapeError("tape already consumed by backward(); run a new forward pass")
        if not np.all(np.isfinite(value)):
            raise FloatingPointError(f"{kind} produced non-finite values")
        out = self._new(value)
        self.entries.append(_Entry(kind, tuple(t.id for t in inputs), out.id, backward))
        return out

    def backward(self, loss: Tensor) -> None:
        if loss.tape is not self:
            raise TapeError("loss was not recorded on this tape")
        if self._consumed:
            raise TapeError("backward() already called on this tape")
        if loss.value.shape != (1, 1):
            raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
        self._consumed = True
        grads: dict[int, np.ndarray] = {loss.id: np.ones((1, 1))}
        for entry in reversed(self.entries):
            g = grads.pop(entry.output, None)
            if g is None:
                continue
            for i, gi in zip(entry.inputs, entry.backward(g)):
                if gi is None:
                    continue
                if i in grads:
                    grads[i] = grads[i] + gi
                else:
                    grads[i] = gi
        for node_id, p in self._params.items():
            g = grads.get(node_id)
            if g is not None:
                p.grad += g


def backward(loss: Tensor) -> None:
    loss.tape.backward(loss)


def _check_2d(kind: str, *ts: Tensor) -> None:
    for t in ts:
        if not isinstance(t, Tensor):
            raise TypeError(f"{kind}: expected Tensor, got {type(t).__name__}")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _check_2d("matmul", a, b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    av, bv = a.value, b.value
    return a.tape.record("matmul", (a, b), av @ bv, lambda g: (g @ bv.T, av.T @ g))


def spmm(s, d: Tensor) -> Tensor:
    """Sparse (fixed, non-differentiable) operator times a dense tensor."""
    m = s.csr if hasattr(s, "csr") else s
    if m.shape[1] != d.shape[0]:
        raise ShapeError(f"spmm: incompatible shapes {m.shape} and {d.shape}")
    return d.tape.record("spmm", (d,), np.asarray(m @ d.value), lambda g: (np.asarray(m.T @ g),))


def add_bias(t: Tensor, b: Tensor) -> Tensor:
    if b.shape != (1, t.shape[1]):
        raise ShapeError(f"add_bias: bias shape {b.shape} does not match {t.shape}")
    return t.tape.record("add_bias", (t, b), t.value + b.value,
                         lambda g: (g, g.sum(axis=0, keepdims=True)))


def add(x: Tensor, y: Tensor) -> Tensor:
    if x.shape != y.shape:
        raise ShapeError(f"add: shapes {x.shape} and {y.shape} differ")
    return x.tape.record("add", (x, y), x.value + y.value, lambda g: (g, g))


def relu(t: Tensor) -> Tensor:
    mask = t.value > 0
    return t.tape.record("relu", (t,), np.where(mask, t.value, 0.0), lambda g: (g * mask,))


def dropout_rng(seed: int, layer_id: int, epoch: int) -> np.random.Generator:
    """Counter-style stream: depends only on (seed, layer, epoch), not call order."""
    return np.random.default_rng(np.random.SeedSequence([seed, layer_id, epoch]))


def dropout(t: Tensor, p: float, key: tuple[int, int, int], training: bool) -> Tensor:
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return t
    keep = dropout_rng(*key).random(t.shape) >= p
    mask = keep / (1.0 - p)
    return t.tape.record("dropout", (t,), t.value * mask, lambda g: (g * mask,))


def log_softmax(t: Tensor) -> Tensor:
    x = t.value
    shifted = x - x.max(axis=1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    soft = np.exp(out)
    return t.tape.record("log_softmax", (t,), out,
                         lambda g: (g - soft * g.sum(axis=1, keepdims=True),))


def scale(t: Tensor, c: float) -> Tensor:
    c = float(c)
    return t.tape.record("scale", (t,), c * t.value, lambda g: (c * g,))


def axpy(a: Tensor, x: Tensor, y: Optional[Tensor] = None) -> Tensor:
    """``a * x + y`` for a 1x1 tensor ``a``; ``y`` may be omitted."""
    if a.shape != (1, 1):
        raise ShapeError(f"axpy: coefficient must be 1x1, got {a.shape}")
    if y is not None and x.shape != y.shape:
        raise ShapeError(f"axpy: shapes {x.shape} and {y.shape} differ")
    av, xv = a.value[0, 0], x.value
    value = av * xv if y is None else av * xv + y.value
    inputs = (a, x) if y is None else (a, x, y)

    def back(g):
        ga = np.array([[np.sum(g * xv)]])
        return (ga, av * g) if y is None else (ga, av * g, g)

    return a.tape.record("axpy", inputs, value, back)


def one_minus(t: Tensor) -> Tensor:
    return t.tape.record("one_minus", (t,), 1.0 - t.value, lambda g: (-g,))


def sigmoid(t: Tensor) -> Tensor:
    x = t.value
    # split by sign so neither branch overflows
    e = np.exp(-np.abs(x))
    s = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return t.tape.record("sigmoid", (t,), s, lambda g: (g * s * (1.0 - s),))


def sum_all(t: Tensor) -> Tensor:
    shape = t.shape
    return t.tape.record("sum_all", (t,), np.array([[t.value.sum()]]),
                         lambda g: (np.full(shape, g[0, 0]),))


def nll_loss(log_probs: Tensor, y, mask) -> Tensor:
    """Mean negative log-likelihood over the masked rows."""
    idx = np.flatnonzero(np.asarray(mask, dtype=bool))
    if len(idx) == 0:
        raise ValueError("loss mask selects no nodes")
    y = np.asarray(y)
    if log_probs.shape[0] != len(y):
        raise ShapeError(f"nll_loss: {log_probs.shape[0]} rows but {len(y)} labels")
    cls = y[idx]
    value = np.array([[-log_probs.value[idx, cls].mean()]])
    shape = log_probs.shape

    def back(g):
        out = np.zeros(shape)
        out[idx, cls] = -g[0, 0] / len(idx)
        return (out,)

    return log_probs.tape.record("nll", (log_probs,), value, back)


def cross_entropy_loss(logits: Tensor, y, mask) -> Tensor:
    return nll_loss(log_softmax(logits), y, mask)

"""Minimal reverse-mode automatic differentiation over NumPy arrays.

Only the operations the segmentation network needs are implemented.
Arrays keep their dtype, so running a model in float64 gives the
high-precision mode used for gradient checking.  Index selections
(gathers, max-pool argmax) are treated as constants: gradients flow
through the selected elements only, ties to the lowest index.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

__all__ = [
    "Tensor",
    "no_grad",
    "add", "mul", "matmul", "relu", "max_reduce", "sum_reduce", "mean_all",
    "reshape", "concat", "gather_rows", "cross_entropy", "softmax",
]

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (inference / memory saver)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_bwd")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._bwd = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flag})"

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        if self.data.size != 1:
            raise RuntimeError("backward() requires a scalar loss")
        if not self.requires_grad:
            raise RuntimeError("backward() on a tensor with no recorded graph")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._bwd is not None:
                node._bwd(node.grad)

    # Operator sugar used by layer code.
    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def _ensure(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def _make(data: np.ndarray, parents: tuple[Tensor, ...], bwd) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._bwd = bwd
    return out


def _accumulate(t: Tensor, g: np.ndarray):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g.copy() if g.base is not None or not g.flags.owndata else g
    else:
        t.grad = t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def add(a, b) -> Tensor:
    a, b = _ensure(a), _ensure(b)
    out = a.data + b.data

    def bwd(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(g, b.data.shape))
    return _make(out, (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b = _ensure(a), _ensure(b)
    out = a.data * b.data

    def bwd(g):
        _accumulate(a, _unbroadcast(g * b.data, a.data.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.data.shape))
    return _make(out, (a, b), bwd)


def matmul(a, b) -> Tensor:
    """(..., n, k) @ (k, m); the right operand must be a 2-D weight."""
    a, b = _ensure(a), _ensure(b)
    if b.data.ndim != 2:
        raise ValueError("matmul right operand must be 2-D")
    out = a.data @ b.data

    def bwd(g):
        _accumulate(a, g @ b.data.T)
        a2 = a.data.reshape(-1, a.data.shape[-1])
        g2 = g.reshape(-1, g.shape[-1])
        _accumulate(b, a2.T @ g2)
    return _make(out, (a, b), bwd)


def relu(a) -> Tensor:
    a = _ensure(a)
    mask = a.data > 0
    out = a.data * mask

    def bwd(g):
        _accumulate(a, g * mask)
    return _make(out, (a,), bwd)


def max_reduce(a, axis: int) -> Tensor:
    """Max over one axis; gradient routes to the first argmax only."""
    a = _ensure(a)
    idx = np.argmax(a.data, axis=axis)
    out = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis=axis)
    out = np.squeeze(out, axis=axis)

    def bwd(g):
        ga = np.zeros_like(a.data)
        np.put_along_axis(ga, np.expand_dims(idx, axis),
                          np.expand_dims(g, axis), axis=axis)
        _accumulate(a, ga)
    return _make(out, (a,), bwd)


def sum_reduce(a, axis, keepdims: bool = False) -> Tensor:
    a = _ensure(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if not keepdims and axis is not None:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g, a.data.shape))
    return _make(out, (a,), bwd)


def mean_all(a) -> Tensor:
    a = _ensure(a)
    n = a.data.size
    out = np.asarray(a.data.mean())

    def bwd(g):
        _accumulate(a, np.broadcast_to(g / n, a.data.shape).astype(a.data.dtype, copy=False))
    return _make(out, (a,), bwd)


def reshape(a, shape) -> Tensor:
    a = _ensure(a)
    out = a.data.reshape(shape)

    def bwd(g):
        _accumulate(a, g.reshape(a.data.shape))
    return _make(out, (a,), bwd)


def concat(parts, axis: int = -1) -> Tensor:
    parts = [_ensure(p) for p in parts]
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]

    def bwd(g):
        splits = np.cumsum(sizes[:-1])
        for p, piece in zip(parts, np.split(g, splits, axis=axis)):
            _accumulate(p, piece)
    return _make(out, tuple(parts), bwd)


def gather_rows(a, idx: np.ndarray) -> Tensor:
    """Index the first axis with an integer array; grad scatter-adds back."""
    a = _ensure(a)
    idx = np.asarray(idx)
    out = a.data[idx]

    def bwd(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx, g)
        _accumulate(a, ga)
    return _make(out, (a,), bwd)


def log_softmax_data(x: np.ndarray) -> np.ndarray:
    """Log-softmax over the last axis with log-sum-exp stabilization."""
    m = x.max(axis=-1, keepdims=True)
    z = x - m
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    return z - lse


def softmax(x: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax_data(x))


def cross_entropy(logits, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood over all points.

    ``logits``: (..., C); ``labels``: integer array of shape ``logits.shape[:-1]``.
    """
    logits = _ensure(logits)
    labels = np.asarray(labels)
    c = logits.data.shape[-1]
    if labels.shape != logits.data.shape[:-1]:
        raise ValueError(f"labels shape {labels.shape} does not match logits "
                         f"{logits.data.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"labels must lie in [0, {c})")
    logp = log_softmax_data(logits.data)
    picked = np.take_along_axis(logp, labels[..., None], axis=-1)[..., 0]
    out = np.asarray(-picked.mean())
    n = labels.size

    def bwd(g):
        p = np.exp(logp)
        np.subtract.at(p, (*np.indices(labels.shape), labels), 1.0)
        _accumulate(logits, (g / n) * p)
    return _make(out, (logits,), bwd)

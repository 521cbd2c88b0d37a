"""Minimal reverse-mode automatic differentiation on numpy arrays.

Everything is float64. A ``Tensor`` wraps an ndarray and remembers the
operation that produced it; ``backward(loss)`` walks the graph in reverse
topological order and accumulates exact gradients into every reachable
tensor with ``requires_grad=True``. Parameters that did not take part in
the forward pass simply keep ``grad=None`` (read as a zero gradient).

The op set is deliberately small: just what dense layers, graph attention
and the training losses need. Ops broadcast like numpy; gradients are
summed back down to the parent's shape.

Set ``CHECK_FINITE = True`` (or use ``finite_checks()``) to make every op
validate its output and raise :class:`NumericError` naming the op. The
check is off by default because it costs a full pass per op in the hot
training loop; ``backward`` always validates the loss itself.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Iterable, Sequence

import numpy as np

from ..errors import NumericError

CHECK_FINITE = False
GRAD_ENABLED = True


@contextmanager
def finite_checks(enabled: bool = True):
    """Temporarily toggle per-op finiteness validation."""
    global CHECK_FINITE
    prev = CHECK_FINITE
    CHECK_FINITE = enabled
    try:
        yield
    finally:
        CHECK_FINITE = prev


@contextmanager
def no_grad():
    """Skip graph construction inside the block (inference fast path)."""
    global GRAD_ENABLED
    prev = GRAD_ENABLED
    GRAD_ENABLED = False
    try:
        yield
    finally:
        GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward = None
        self.op = "leaf"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self.op}, requires_grad={self.requires_grad})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def param(data, rng=None) -> Tensor:
    """A leaf tensor that collects gradients."""
    return Tensor(np.array(data, dtype=np.float64, copy=True), requires_grad=True)


def _make(data: np.ndarray, parents: tuple, backward, op: str) -> Tensor:
    if CHECK_FINITE and not np.all(np.isfinite(data)):
        raise NumericError(f"non-finite values produced by op '{op}'")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    if GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    out.op = op
    return out


def _acc(p: Tensor, g: np.ndarray) -> None:
    if not p.requires_grad:
        return
    if p.grad is None:
        p.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        p.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient back down to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise / arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data + b.data

    def bwd(g):
        _acc(a, _unbroadcast(g, a.data.shape))
        _acc(b, _unbroadcast(g, b.data.shape))

    return _make(data, (a, b), bwd, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data - b.data

    def bwd(g):
        _acc(a, _unbroadcast(g, a.data.shape))
        _acc(b, _unbroadcast(-g, b.data.shape))

    return _make(data, (a, b), bwd, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data * b.data

    def bwd(g):
        _acc(a, _unbroadcast(g * b.data, a.data.shape))
        _acc(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(data, (a, b), bwd, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data / b.data

    def bwd(g):
        _acc(a, _unbroadcast(g / b.data, a.data.shape))
        _acc(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _make(data, (a, b), bwd, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)

    def bwd(g):
        _acc(a, -g)

    return _make(-a.data, (a,), bwd, "neg")


def exp(a) -> Tensor:
    a = as_tensor(a)
    data = np.exp(a.data)

    def bwd(g):
        _acc(a, g * data)

    return _make(data, (a,), bwd, "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0.0):
        raise NumericError("non-positive input to op 'log'")
    data = np.log(a.data)

    def bwd(g):
        _acc(a, g / a.data)

    return _make(data, (a,), bwd, "log")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0.0  # subgradient at exactly 0 is 0
    data = np.where(mask, a.data, 0.0)

    def bwd(g):
        _acc(a, g * mask)

    return _make(data, (a,), bwd, "relu")


def leaky_relu(a, slope: float = 0.2) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0.0
    data = np.where(mask, a.data, slope * a.data)

    def bwd(g):
        _acc(a, g * np.where(mask, 1.0, slope))

    return _make(data, (a,), bwd, "leaky_relu")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    s = 1.0 / (1.0 + np.exp(-a.data))

    def bwd(g):
        _acc(a, g * s * (1.0 - s))

    return _make(s, (a,), bwd, "sigmoid")


def silu(a) -> Tensor:
    a = as_tensor(a)
    s = 1.0 / (1.0 + np.exp(-a.data))
    data = a.data * s

    def bwd(g):
        _acc(a, g * s * (1.0 + a.data * (1.0 - s)))

    return _make(data, (a,), bwd, "silu")


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp values; gradient passes through strictly inside (lo, hi) only."""
    a = as_tensor(a)
    mask = (a.data > lo) & (a.data < hi)
    data = np.clip(a.data, lo, hi)

    def bwd(g):
        _acc(a, g * mask)

    return _make(data, (a,), bwd, "clip")


# ---------------------------------------------------------------------------
# shape / structure


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.data.shape
    data = a.data.reshape(shape)

    def bwd(g):
        _acc(a, g.reshape(old))

    return _make(data, (a,), bwd, "reshape")


def swapaxes(a, ax1: int, ax2: int) -> Tensor:
    a = as_tensor(a)
    data = np.swapaxes(a.data, ax1, ax2)

    def bwd(g):
        _acc(a, np.swapaxes(g, ax1, ax2))

    return _make(data, (a,), bwd, "swapaxes")


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    data = np.broadcast_to(a.data, shape)

    def bwd(g):
        _acc(a, _unbroadcast(g, a.data.shape))

    return _make(data, (a,), bwd, "broadcast_to")


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in ts], axis=axis)
    ax = axis if axis >= 0 else data.ndim + axis
    sizes = [t.data.shape[ax] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for t, lo, hi in zip(ts, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[ax] = slice(lo, hi)
            _acc(t, g[tuple(idx)])

    return _make(data, tuple(ts), bwd, "concat")


def slice0(a, start: int, stop: int) -> Tensor:
    """Slice along the first axis."""
    a = as_tensor(a)
    data = a.data[start:stop]

    def bwd(g):
        full = np.zeros_like(a.data)
        full[start:stop] = g
        _acc(a, full)

    return _make(data, (a,), bwd, "slice0")


def gather_rows(a, idx) -> Tensor:
    """Row lookup (embedding); gradient scatter-adds into the table."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)
    data = a.data[idx]

    def bwd(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        _acc(a, full)

    return _make(data, (a,), bwd, "gather_rows")


def sumt(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is None:
            _acc(a, np.broadcast_to(g, a.data.shape))
            return
        gg = g
        if not keepdims:
            gg = np.expand_dims(gg, axis)
        _acc(a, np.broadcast_to(gg, a.data.shape))

    return _make(data, (a,), bwd, "sum")


def meant(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        n = a.data.size
    else:
        n = a.data.shape[axis]
    return mul(sumt(a, axis=axis, keepdims=keepdims), 1.0 / n)


def matmul(a, b) -> Tensor:
    """numpy matmul on >=2-D operands, including stacked (batched) matrices."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ValueError("matmul requires operands with ndim >= 2")
    data = np.matmul(a.data, b.data)

    def bwd(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        _acc(a, _unbroadcast(ga, a.data.shape))
        _acc(b, _unbroadcast(gb, b.data.shape))

    return _make(data, (a, b), bwd, "matmul")


def masked_softmax(a, mask, axis: int = -1) -> Tensor:
    """Softmax over ``axis`` restricted to positions where ``mask`` is true.

    ``mask`` is a constant boolean array broadcastable to ``a``. Every slice
    must contain at least one true entry (graph self-loops guarantee this
    for attention neighborhoods).
    """
    a = as_tensor(a)
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), a.data.shape)
    if not mask.any(axis=axis).all():
        raise ValueError("masked_softmax: a slice has an empty neighborhood")
    neg = np.where(mask, a.data, -np.inf)
    m = neg.max(axis=axis, keepdims=True)
    e = np.where(mask, np.exp(neg - m), 0.0)
    denom = e.sum(axis=axis, keepdims=True)
    y = e / denom

    def bwd(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        _acc(a, y * (g - dot))

    return _make(y, (a,), bwd, "masked_softmax")


# ---------------------------------------------------------------------------
# graph traversal


def backward(loss: Tensor) -> None:
    """Reverse-mode sweep from a scalar loss.

    Raises :class:`NumericError` if the loss is not a finite scalar. Every
    tensor reachable from ``loss`` with ``requires_grad=True`` receives its
    exact gradient in ``.grad``; unused parameters are left with
    ``grad=None`` which downstream code treats as zero.
    """
    if loss.data.size != 1:
        raise ValueError("backward expects a scalar loss")
    if not np.isfinite(loss.data).all():
        raise NumericError(f"non-finite loss from op '{loss.op}'")
    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))
    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is not None:
            node._backward(node.grad)


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


def grads_of(params: Sequence[Tensor]) -> list[np.ndarray]:
    """Gradients in parameter order, zeros for parameters never used."""
    return [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]

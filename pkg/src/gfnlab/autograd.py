"""A small reverse-mode tape over numpy arrays.

Only the operations needed by the losses and the MLP are provided: affine
maps, leaky ReLU, masked log-softmax, gathers, segment reductions and a few
elementwise ops. Closures are recorded only when an input requires a
gradient, so the same code doubles as a plain forward pass.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

# stands in for -inf at masked slots; never receives gradient
MASKED = -1e30


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (), _backward: Callable | None = None):
        self.data = np.asarray(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    # arithmetic ----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self):
        return total(self)

    def mean(self):
        return total(self) * (1.0 / max(self.data.size, 1))


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents: tuple, backward: Callable) -> Tensor:
    if any(p.requires_grad for p in parents):
        return Tensor(data, True, parents, backward)
    return Tensor(data)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad = t.grad + g


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(g, b.data.shape))

    return _node(out, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    def backward(g):
        _accumulate(a, -g)

    return _node(-a.data, (a,), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def backward(g):
        _accumulate(a, _unbroadcast(g * b.data, a.data.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.data.shape))

    return _node(out, (a, b), backward)


def square(a: Tensor) -> Tensor:
    def backward(g):
        _accumulate(a, 2.0 * a.data * g)

    return _node(a.data * a.data, (a,), backward)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def backward(g):
        _accumulate(a, g * out)

    return _node(out, (a,), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    def backward(g):
        if a.requires_grad:
            _accumulate(a, g @ b.data.T)
        if b.requires_grad:
            _accumulate(b, a.data.T @ g)

    return _node(a.data @ b.data, (a, b), backward)


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x @ w + b for a 2-D batch ``x``."""
    out = x.data @ w.data + b.data

    def backward(g):
        if x.requires_grad:
            _accumulate(x, g @ w.data.T)
        if w.requires_grad:
            _accumulate(w, x.data.T @ g)
        if b.requires_grad:
            _accumulate(b, g.sum(axis=0))

    return _node(out, (x, w, b), backward)


def leaky_relu(x: Tensor, slope: float = 0.01) -> Tensor:
    pos = x.data > 0
    out = np.where(pos, x.data, slope * x.data)

    def backward(g):
        _accumulate(x, np.where(pos, g, slope * g))

    return _node(out, (x,), backward)


def total(a: Tensor) -> Tensor:
    def backward(g):
        _accumulate(a, np.broadcast_to(g, a.data.shape))

    return _node(a.data.sum(), (a,), backward)


def take(a: Tensor, index) -> Tensor:
    """Fancy indexing; the backward pass scatter-adds into the source."""

    def backward(g):
        buf = np.zeros_like(a.data)
        np.add.at(buf, index, g)
        _accumulate(a, buf)

    return _node(a.data[index], (a,), backward)


def where(cond: np.ndarray, a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = np.where(cond, a.data, b.data)

    def backward(g):
        _accumulate(a, _unbroadcast(np.where(cond, g, 0.0), a.data.shape))
        _accumulate(b, _unbroadcast(np.where(cond, 0.0, g), b.data.shape))

    return _node(out, (a, b), backward)


def masked_log_softmax(x: Tensor, mask: np.ndarray) -> Tensor:
    """Row-wise log-softmax over the ``True`` entries of ``mask``.

    Masked entries are set to :data:`MASKED` and carry no gradient. Rows with
    no valid entry are left at :data:`MASKED` everywhere.
    """
    z = np.where(mask, x.data, -np.inf)
    top = z.max(axis=-1, keepdims=True)
    top = np.where(np.isfinite(top), top, 0.0)
    e = np.where(mask, np.exp(z - top), 0.0)
    norm = e.sum(axis=-1, keepdims=True)
    safe = np.where(norm > 0, norm, 1.0)
    out = np.where(mask, x.data - top - np.log(safe), MASKED)
    probs = e / safe

    def backward(g):
        gm = np.where(mask, g, 0.0)
        _accumulate(x, gm - probs * gm.sum(axis=-1, keepdims=True))

    return _node(out, (x,), backward)


def masked_logsumexp(x: Tensor, mask: np.ndarray) -> Tensor:
    """Row-wise log-sum-exp over valid entries; rows without entries give MASKED."""
    z = np.where(mask, x.data, -np.inf)
    top = z.max(axis=-1)
    finite = np.isfinite(top)
    top0 = np.where(finite, top, 0.0)
    e = np.where(mask, np.exp(z - top0[..., None]), 0.0)
    norm = e.sum(axis=-1)
    out = np.where(finite, top0 + np.log(np.where(norm > 0, norm, 1.0)), MASKED)
    w = e / np.where(norm > 0, norm, 1.0)[..., None]

    def backward(g):
        _accumulate(x, w * g[..., None])

    return _node(out, (x,), backward)


def log_add_const(x: Tensor, log_c: float) -> Tensor:
    """log(exp(x) + c) with c given in log space; ``log_c=-inf`` is the identity."""
    if log_c == -np.inf:
        return x
    out = np.logaddexp(x.data, log_c)

    def backward(g):
        _accumulate(x, g * np.exp(x.data - out))

    return _node(out, (x,), backward)


def segment_sum(x: Tensor, segments: np.ndarray, num_segments: int) -> Tensor:
    out = np.zeros(num_segments, dtype=x.data.dtype)
    np.add.at(out, segments, x.data)

    def backward(g):
        _accumulate(x, g[segments])

    return _node(out, (x,), backward)


def segment_logsumexp(x: Tensor, segments: np.ndarray, num_segments: int) -> Tensor:
    """Log-sum-exp of a 1-D tensor grouped by segment id; empty segments give MASKED."""
    top = np.full(num_segments, -np.inf, dtype=x.data.dtype)
    np.maximum.at(top, segments, x.data)
    top0 = np.where(np.isfinite(top), top, 0.0)
    e = np.exp(x.data - top0[segments])
    norm = np.zeros(num_segments, dtype=x.data.dtype)
    np.add.at(norm, segments, e)
    has = norm > 0
    out = np.where(has, top0 + np.log(np.where(has, norm, 1.0)), MASKED)
    w = e / np.where(has, norm, 1.0)[segments]

    def backward(g):
        _accumulate(x, w * g[segments])

    return _node(out, (x,), backward)


def concat(parts: list[Tensor]) -> Tensor:
    sizes = [p.data.shape[0] for p in parts]
    out = np.concatenate([p.data for p in parts])
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        for p, lo, hi in zip(parts, bounds[:-1], bounds[1:]):
            _accumulate(p, g[lo:hi])

    return _node(out, tuple(parts), backward)


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf that requires it."""
    if not loss.requires_grad:
        return
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is None or node.grad is None:
            continue
        node._backward(node.grad)
        node.grad = None  # interior buffers are not kept

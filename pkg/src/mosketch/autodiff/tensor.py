"""Reverse-mode automatic differentiation over dense float32 tensors.

Define-by-run: every operation records a backward closure on the output
node; ``backward()`` on a scalar walks the graph in reverse topological
order and accumulates gradients additively on every node that requires
them. Data lives in numpy float32 arrays; every op validates finiteness
of its output and raises :class:`NumericalError` naming the op otherwise.
"""

from __future__ import annotations

import numpy as np

from ..errors import NumericalError, ShapeError, UsageError

DTYPE = np.float32


def _as_array(data) -> np.ndarray:
    arr = np.asarray(data, dtype=DTYPE)
    return arr


class Tensor:
    """A dense float32 array with an optional autodiff graph handle."""

    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents", "op")

    def __init__(self, data, requires_grad: bool = False, *, op: str = "leaf",
                 parents: tuple = ()):
        self.data = _as_array(data)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._backward = None
        self._parents = parents
        self.op = op
        if not np.isfinite(self.data).all():
            raise NumericalError(f"non-finite values produced by op {op!r}")

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, grad: np.ndarray):
        if self.grad is None:
            self.grad = grad.astype(DTYPE, copy=True)
        else:
            self.grad = self.grad + grad.astype(DTYPE, copy=False)

    # -- backward ------------------------------------------------------------

    def backward(self):
        """Accumulate d(self)/d(node) into every reachable node's .grad."""
        if self.data.size != 1:
            raise UsageError(
                f"backward() requires a scalar loss, got shape {self.shape}")
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
                if id(p) not in seen:
                    stack.append((p, False))
        self._accumulate(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operator sugar ------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(_lift(other), -1.0))

    def __rsub__(self, other):
        return add(_lift(other), mul(self, -1.0))

    def __truediv__(self, other):
        return div(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return slice_(self, idx)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) != 1 else shape[0])

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _needs_grad(*tensors: Tensor) -> bool:
    return any(t.requires_grad for t in tensors)


def _make(data, op: str, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(data, requires_grad=_needs_grad(*parents), op=op,
                 parents=tuple(p for p in parents if p.requires_grad))
    if out.requires_grad:
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum grad over the axes numpy broadcast to reach grad.shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# -- primitive ops ----------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    out_data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _make(out_data, "add", (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    out_data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _make(out_data, "mul", (a, b), backward)


def div(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    out_data = a.data / b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _make(out_data, "div", (a, b), backward)


def matmul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2, got {a.shape} @ {b.shape}")
    if a.data.ndim != b.data.ndim or a.shape[:-2] != b.shape[:-2]:
        if not (a.data.ndim == 2 and b.data.ndim == 2):
            raise ShapeError(f"matmul batch dims must match: {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    out_data = np.matmul(a.data, b.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(np.matmul(g, np.swapaxes(b.data, -1, -2)))
        if b.requires_grad:
            b._accumulate(np.matmul(np.swapaxes(a.data, -1, -2), g))

    return _make(out_data, "matmul", (a, b), backward)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t._accumulate(g[tuple(idx)])

    return _make(out_data, "concat", tuple(tensors), backward)


def slice_(a, idx) -> Tensor:
    a = _lift(a)
    out_data = a.data[idx]

    def backward(g):
        if a.requires_grad:
            buf = np.zeros_like(a.data)
            np.add.at(buf, idx, g)
            a._accumulate(buf)

    return _make(out_data, "slice", (a,), backward)


def gather_rows(a, index: np.ndarray) -> Tensor:
    """Select rows by integer index; backward scatter-adds (handles repeats)."""
    a = _lift(a)
    index = np.asarray(index, dtype=np.intp)
    out_data = a.data[index]

    def backward(g):
        if a.requires_grad:
            buf = np.zeros_like(a.data)
            np.add.at(buf, index, g)
            a._accumulate(buf)

    return _make(out_data, "gather_rows", (a,), backward)


def reshape(a, shape) -> Tensor:
    a = _lift(a)
    out_data = a.data.reshape(shape)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g.reshape(a.shape))

    return _make(out_data, "reshape", (a,), backward)


def transpose(a, axes=None) -> Tensor:
    a = _lift(a)
    out_data = np.transpose(a.data, axes)
    inv = None if axes is None else np.argsort(axes)

    def backward(g):
        if a.requires_grad:
            a._accumulate(np.transpose(g, inv))

    return _make(out_data, "transpose", (a,), backward)


def broadcast_to(a, shape) -> Tensor:
    a = _lift(a)
    out_data = np.broadcast_to(a.data, shape).copy()

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))

    return _make(out_data, "broadcast", (a,), backward)


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _lift(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if a.requires_grad:
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            a._accumulate(np.broadcast_to(g, a.shape).copy())

    return _make(out_data, "sum", (a,), backward)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _lift(a)
    count = a.data.size if axis is None else np.prod(
        [a.shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))])
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / float(count))


def relu(a) -> Tensor:
    a = _lift(a)
    out_data = np.maximum(a.data, 0.0)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * (a.data > 0))

    return _make(out_data, "relu", (a,), backward)


def tanh(a) -> Tensor:
    a = _lift(a)
    out_data = np.tanh(a.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * (1.0 - out_data * out_data))

    return _make(out_data, "tanh", (a,), backward)


def softplus(a) -> Tensor:
    """log(1 + exp(x)): a smooth relu, derivative sigmoid(x)."""
    a = _lift(a)
    out_data = np.logaddexp(0.0, a.data.astype(np.float64)).astype(DTYPE)

    def backward(g):
        if a.requires_grad:
            sig = 1.0 / (1.0 + np.exp(-a.data.astype(np.float64)))
            a._accumulate(g * sig.astype(DTYPE))

    return _make(out_data, "softplus", (a,), backward)


def sin(a) -> Tensor:
    a = _lift(a)
    out_data = np.sin(a.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * np.cos(a.data))

    return _make(out_data, "sin", (a,), backward)


def cos(a) -> Tensor:
    a = _lift(a)
    out_data = np.cos(a.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(-g * np.sin(a.data))

    return _make(out_data, "cos", (a,), backward)


def exp(a) -> Tensor:
    a = _lift(a)
    out_data = np.exp(a.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * out_data)

    return _make(out_data, "exp", (a,), backward)


def softmax(a, axis: int = -1) -> Tensor:
    a = _lift(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        if a.requires_grad:
            dot = (g * out_data).sum(axis=axis, keepdims=True)
            a._accumulate(out_data * (g - dot))

    return _make(out_data, "softmax", (a,), backward)


def layer_norm(a, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis to zero mean, unit variance."""
    a = _lift(a)
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv

    def backward(g):
        if a.requires_grad:
            gm = g.mean(axis=-1, keepdims=True)
            gym = (g * y).mean(axis=-1, keepdims=True)
            a._accumulate(inv * (g - gm - y * gym))

    return _make(y, "layer_norm", (a,), backward)


def from_op(data: np.ndarray, parents: tuple[Tensor, ...], backward,
            op: str) -> Tensor:
    """Create a node with a hand-written vector-Jacobian product.

    Used by modules (rasterizer, guidance pullback) whose forward is a
    vectorized numpy computation too coarse to express op-by-op.
    ``backward(g)`` must call ``_accumulate`` on the parents itself.
    """
    return _make(data, op, tuple(_lift(p) for p in parents), backward)

"""Reverse-mode differentiation over a small, closed primitive set.

Supported primitives: add, sub, neg, mul (elementwise with numpy
broadcasting), matmul, tanh, exp, log, clip, sum/mean (full or per-axis),
reshape, 1-D slicing, concat, row gather, softmax and log-softmax.
Anything outside this list is rejected, which keeps every backward rule
in this file individually checkable against finite differences.

Graphs are built eagerly from ``Var`` nodes holding float64 numpy arrays.
Calling ``backward()`` on a scalar node accumulates ``grad`` on every
node that contributed to it.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Var",
    "as_var",
    "matmul",
    "tanh",
    "exp",
    "log",
    "clip",
    "vsum",
    "vmean",
    "reshape",
    "slice1d",
    "slice_cols",
    "concat",
    "gather_rows",
    "softmax",
    "log_softmax",
]


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum gradient over axes that numpy broadcasting introduced."""
    if grad.shape == shape:
        return grad
    # collapse extra leading axes
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


class Var:
    """One node of the expression graph."""

    __slots__ = ("value", "grad", "_parents", "_backward")

    # make ndarray <op> Var dispatch to the reflected Var operator
    __array_ufunc__ = None

    def __init__(self, value, parents=(), backward=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self._parents = parents
        self._backward = backward

    @property
    def shape(self):
        return self.value.shape

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        self.grad += g

    def backward(self) -> None:
        """Accumulate gradients of this scalar into the whole graph."""
        if self.value.shape != ():
            raise ValueError(
                f"backward() requires a scalar loss, got shape {self.value.shape}"
            )
        topo: list[Var] = []
        seen: set[int] = set()
        stack: list[tuple[Var, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self._accumulate(np.ones_like(self.value))
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)

    # -- arithmetic ---------------------------------------------------

    def __add__(self, other):
        other = as_var(other)
        out_value = self.value + other.value

        def bwd(g):
            self._accumulate(_unbroadcast(g, self.value.shape))
            other._accumulate(_unbroadcast(g, other.value.shape))

        return Var(out_value, (self, other), bwd)

    __radd__ = __add__

    def __neg__(self):
        def bwd(g):
            self._accumulate(-g)

        return Var(-self.value, (self,), bwd)

    def __sub__(self, other):
        return self + (-as_var(other))

    def __rsub__(self, other):
        return as_var(other) + (-self)

    def __mul__(self, other):
        other = as_var(other)
        out_value = self.value * other.value

        def bwd(g):
            self._accumulate(_unbroadcast(g * other.value, self.value.shape))
            other._accumulate(_unbroadcast(g * self.value, other.value.shape))

        return Var(out_value, (self, other), bwd)

    __rmul__ = __mul__

    def sum(self, axis=None):
        return vsum(self, axis=axis)

    def mean(self, axis=None):
        return vmean(self, axis=axis)


def as_var(x) -> Var:
    """Lift scalars and arrays into constant graph nodes."""
    if isinstance(x, Var):
        return x
    if isinstance(x, (int, float, np.floating, np.integer, np.ndarray, list, tuple)):
        return Var(x)
    raise TypeError(f"unsupported operand for Var graph: {type(x).__name__}")


def matmul(a: Var, b: Var) -> Var:
    a, b = as_var(a), as_var(b)
    if a.value.ndim != 2 or b.value.ndim != 2:
        raise ValueError("matmul supports 2-D operands only")
    out_value = a.value @ b.value

    def bwd(g):
        a._accumulate(g @ b.value.T)
        b._accumulate(a.value.T @ g)

    return Var(out_value, (a, b), bwd)


def tanh(x: Var) -> Var:
    x = as_var(x)
    t = np.tanh(x.value)

    def bwd(g):
        x._accumulate(g * (1.0 - t * t))

    return Var(t, (x,), bwd)


def exp(x: Var) -> Var:
    x = as_var(x)
    e = np.exp(x.value)

    def bwd(g):
        x._accumulate(g * e)

    return Var(e, (x,), bwd)


def log(x: Var) -> Var:
    x = as_var(x)

    def bwd(g):
        x._accumulate(g / x.value)

    return Var(np.log(x.value), (x,), bwd)


def clip(x: Var, lo: float, hi: float) -> Var:
    """Clamp values; gradient passes through only where not saturated."""
    x = as_var(x)
    inside = (x.value >= lo) & (x.value <= hi)

    def bwd(g):
        x._accumulate(g * inside)

    return Var(np.clip(x.value, lo, hi), (x,), bwd)


def vsum(x: Var, axis=None) -> Var:
    x = as_var(x)
    out_value = x.value.sum(axis=axis)

    def bwd(g):
        if axis is None:
            x._accumulate(np.full_like(x.value, 1.0) * g)
        else:
            x._accumulate(np.broadcast_to(np.expand_dims(g, axis), x.value.shape).copy())

    return Var(out_value, (x,), bwd)


def vmean(x: Var, axis=None) -> Var:
    x = as_var(x)
    n = x.value.size if axis is None else x.value.shape[axis]
    return vsum(x, axis=axis) * (1.0 / n)


def reshape(x: Var, shape) -> Var:
    x = as_var(x)

    def bwd(g):
        x._accumulate(g.reshape(x.value.shape))

    return Var(x.value.reshape(shape), (x,), bwd)


def slice1d(x: Var, start: int, stop: int) -> Var:
    """Contiguous slice of a 1-D node (used to unpack flat parameters)."""
    x = as_var(x)
    if x.value.ndim != 1:
        raise ValueError("slice1d expects a 1-D node")

    def bwd(g):
        full = np.zeros_like(x.value)
        full[start:stop] = g
        x._accumulate(full)

    return Var(x.value[start:stop], (x,), bwd)


def slice_cols(x: Var, start: int, stop: int) -> Var:
    """Contiguous column slice of a 2-D node."""
    x = as_var(x)
    if x.value.ndim != 2:
        raise ValueError("slice_cols expects a 2-D node")

    def bwd(g):
        full = np.zeros_like(x.value)
        full[:, start:stop] = g
        x._accumulate(full)

    return Var(x.value[:, start:stop], (x,), bwd)


def concat(parts, axis: int = 1) -> Var:
    parts = [as_var(p) for p in parts]
    out_value = np.concatenate([p.value for p in parts], axis=axis)
    sizes = [p.value.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            p._accumulate(g[tuple(idx)])

    return Var(out_value, tuple(parts), bwd)


def gather_rows(m: Var, idx: np.ndarray) -> Var:
    """out[i] = m[i, idx[i]] for a 2-D node and integer index vector."""
    m = as_var(m)
    idx = np.asarray(idx, dtype=np.intp)
    rows = np.arange(m.value.shape[0])

    def bwd(g):
        full = np.zeros_like(m.value)
        np.add.at(full, (rows, idx), g)
        m._accumulate(full)

    return Var(m.value[rows, idx], (m,), bwd)


def softmax(x: Var, axis: int = 1) -> Var:
    x = as_var(x)
    z = x.value - x.value.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        inner = (g * p).sum(axis=axis, keepdims=True)
        x._accumulate(p * (g - inner))

    return Var(p, (x,), bwd)


def log_softmax(x: Var, axis: int = 1) -> Var:
    x = as_var(x)
    z = x.value - x.value.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    logp = z - lse
    p = np.exp(logp)

    def bwd(g):
        x._accumulate(g - p * g.sum(axis=axis, keepdims=True))

    return Var(logp, (x,), bwd)

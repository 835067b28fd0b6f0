"""Reverse-mode automatic differentiation over numpy arrays.

Small tape-based engine: every op builds a Tensor holding the result plus a
vector-Jacobian closure over its parents. ``backward()`` on a scalar walks the
tape in reverse topological order and accumulates gradients into leaf tensors
(those constructed directly, e.g. parameters and inputs).

Broadcasting follows numpy; gradients are summed back down to the parent
shape. Matmul operands must be at least 2-d.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np

_GRAD_ENABLED = True


@contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False):
        if not isinstance(data, np.ndarray):
            if isinstance(data, np.generic):
                data = np.asarray(data)  # numpy scalar keeps its dtype
            else:
                data = np.asarray(data, dtype=np.float32)
        self.data = data
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    # ---- basic introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, grad={self.requires_grad})"

    # ---- backward ------------------------------------------------------------

    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a gradient needs a scalar")
            grad = np.ones_like(self.data)
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        grads: dict[int, np.ndarray] = {id(self): grad}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._vjp is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for p, pg in zip(node._parents, node._vjp(g)):
                if pg is None or not p.requires_grad:
                    continue
                k = id(p)
                if k in grads:
                    grads[k] = grads[k] + pg
                else:
                    grads[k] = pg

    # ---- operator overloads ----------------------------------------------------

    def __add__(self, other):
        if isinstance(other, (int, float)):
            return add_scalar(self, other)
        return add(self, _wrap(other))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, (int, float)):
            return add_scalar(self, -other)
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        if isinstance(other, (int, float)):
            return rsub_scalar(other, self)
        return sub(_wrap(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return mul_scalar(self, other)
        return mul(self, _wrap(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return div_scalar(self, other)
        return div(self, _wrap(other))

    def __rtruediv__(self, other):
        if isinstance(other, (int, float)):
            return rdiv_scalar(other, self)
        return div(_wrap(other), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, _wrap(other))

    def __getitem__(self, idx):
        return getitem(self, idx)

    # ---- method sugar ----------------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def swapaxes(self, a, b):
        return swapaxes(self, a, b)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_op(data: np.ndarray, parents: Sequence[Tensor], vjp) -> Tensor:
    """Assemble an op result; drops the tape when grad is off or no parent needs it."""
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---- arithmetic -----------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    return make_op(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)),
    )


def sub(a: Tensor, b: Tensor) -> Tensor:
    return make_op(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)),
    )


def mul(a: Tensor, b: Tensor) -> Tensor:
    return make_op(
        a.data * b.data,
        (a, b),
        lambda g: (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        ),
    )


def div(a: Tensor, b: Tensor) -> Tensor:
    inv = 1.0 / b.data
    out = a.data * inv
    return make_op(
        out,
        (a, b),
        lambda g: (
            _unbroadcast(g * inv, a.data.shape),
            _unbroadcast(-g * out * inv, b.data.shape),
        ),
    )


def neg(a: Tensor) -> Tensor:
    return make_op(-a.data, (a,), lambda g: (-g,))


# Python scalars stay raw so numpy's weak promotion applies: a float32 graph
# is not promoted, and a float64 graph keeps the constant at full precision.


def add_scalar(a: Tensor, s) -> Tensor:
    return make_op(a.data + s, (a,), lambda g: (g,))


def rsub_scalar(s, a: Tensor) -> Tensor:
    return make_op(s - a.data, (a,), lambda g: (-g,))


def mul_scalar(a: Tensor, s) -> Tensor:
    return make_op(a.data * s, (a,), lambda g: (g * s,))


def div_scalar(a: Tensor, s) -> Tensor:
    return make_op(a.data / s, (a,), lambda g: (g / s,))


def rdiv_scalar(s, a: Tensor) -> Tensor:
    out = s / a.data
    return make_op(out, (a,), lambda g: (-g * out / a.data,))


def power(a: Tensor, p: float) -> Tensor:
    d = a.data ** p
    return make_op(d, (a,), lambda g: (g * p * a.data ** (p - 1),))


def exp(a: Tensor) -> Tensor:
    d = np.exp(a.data)
    return make_op(d, (a,), lambda g: (g * d,))


def log(a: Tensor) -> Tensor:
    return make_op(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    d = np.sqrt(a.data)
    return make_op(d, (a,), lambda g: (g * (0.5 / d),))


def tanh(a: Tensor) -> Tensor:
    d = np.tanh(a.data)
    return make_op(d, (a,), lambda g: (g * (1.0 - d * d),))


def sigmoid(a: Tensor) -> Tensor:
    d = _sigmoid_np(a.data)
    return make_op(d, (a,), lambda g: (g * d * (1.0 - d),))


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def absolute(a: Tensor) -> Tensor:
    return make_op(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def clamp_min(a: Tensor, lo: float) -> Tensor:
    d = np.maximum(a.data, lo)
    mask = a.data >= lo
    return make_op(d, (a,), lambda g: (g * mask,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return make_op(a.data * mask, (a,), lambda g: (g * mask,))


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    mask = a.data > 0
    scale = np.where(mask, 1.0, slope).astype(a.data.dtype)
    return make_op(a.data * scale, (a,), lambda g: (g * scale,))


def silu(a: Tensor) -> Tensor:
    s = _sigmoid_np(a.data)
    d = a.data * s
    return make_op(d, (a,), lambda g: (g * (s + d * (1.0 - s)),))


# ---- shape ops ------------------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    old = a.data.shape
    return make_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return make_op(
        np.ascontiguousarray(a.data.transpose(axes)),
        (a,),
        lambda g: (g.transpose(inv),),
    )


def swapaxes(a: Tensor, ax1: int, ax2: int) -> Tensor:
    return make_op(
        np.ascontiguousarray(a.data.swapaxes(ax1, ax2)),
        (a,),
        lambda g: (g.swapaxes(ax1, ax2),),
    )


def flip(a: Tensor, axis: int) -> Tensor:
    return make_op(
        np.ascontiguousarray(np.flip(a.data, axis)),
        (a,),
        lambda g: (np.flip(g, axis),),
    )


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return make_op(np.concatenate([t.data for t in tensors], axis=axis), tensors, vjp)


def getitem(a: Tensor, idx) -> Tensor:
    d = a.data[idx]
    if d.ndim:
        d = np.ascontiguousarray(d)

    def vjp(g):
        out = np.zeros_like(a.data)
        out[idx] = g
        return (out,)

    return make_op(d, (a,), vjp)


def pad_constant(a: Tensor, widths) -> Tensor:
    """Zero padding; widths is the np.pad spec (per-axis (before, after))."""
    widths = tuple((int(b), int(e)) for b, e in widths)
    sl = tuple(slice(b, b + s) for (b, _), s in zip(widths, a.data.shape))
    return make_op(np.pad(a.data, widths), (a,), lambda g: (g[sl],))


def cast(a: Tensor, dtype) -> Tensor:
    src = a.data.dtype
    return make_op(a.data.astype(dtype), (a,), lambda g: (g.astype(src),))


# ---- reductions -----------------------------------------------------------------


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.data.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return make_op(a.data.sum(axis=axis, keepdims=keepdims), (a,), vjp)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.data.shape
    if axis is None:
        n = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = 1
        for ax in axes:
            n *= shape[ax]

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape) / n,)

    return make_op(a.data.mean(axis=axis, keepdims=keepdims), (a,), vjp)


# ---- linear algebra --------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ValueError("matmul operands must be at least 2-d")

    def vjp(g):
        ga = g @ b.data.swapaxes(-1, -2)
        gb = a.data.swapaxes(-1, -2) @ g
        return (_unbroadcast(ga, a.data.shape), _unbroadcast(gb, b.data.shape))

    return make_op(a.data @ b.data, (a, b), vjp)


# ---- fused nonlinearities ---------------------------------------------------------


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    m = a.data.max(axis=axis, keepdims=True)
    e = np.exp(a.data - m)
    d = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        tmp = g * d
        return (tmp - d * tmp.sum(axis=axis, keepdims=True),)

    return make_op(d, (a,), vjp)


def glu(a: Tensor, axis: int = 1) -> Tensor:
    """Gated linear unit: split in two along axis, first half gated by sigmoid of second."""
    n = a.data.shape[axis]
    half = n // 2
    sl_a = [slice(None)] * a.data.ndim
    sl_b = [slice(None)] * a.data.ndim
    sl_a[axis] = slice(0, half)
    sl_b[axis] = slice(half, n)
    return mul(getitem(a, tuple(sl_a)), sigmoid(getitem(a, tuple(sl_b))))

"""Dense-tensor reverse-mode automatic differentiation.

Values are contiguous 64-bit floats backed by numpy. Each operation
records a backward closure that accumulates exact analytic gradients
into its parents; ``backward`` on a scalar loss walks the graph in
reverse topological order. Broadcasting is restricted to leading-batch
alignment: two operands are compatible when their shapes are equal or
one shape is a trailing suffix of the other (scalars included).
Anything else raises ``DimensionError`` instead of silently
broadcasting.
"""

from __future__ import annotations

import math

import numpy as np

from ..errors import DimensionError, ValidationError

__all__ = [
    "Tensor",
    "param",
    "const",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "concat_last",
    "concat_rows",
    "slice_axis",
    "tsum",
    "tmean",
    "softmax",
    "layer_norm",
    "relu",
    "softplus",
    "exp",
    "log",
    "gather_rows",
    "scatter_add_rows",
    "transpose",
    "reshape",
    "expand_leading",
    "backward",
]


class Tensor:
    """N-dimensional float64 array with an optional backward-graph record."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # operator sugar; constants are wrapped as gradient-free tensors
    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __truediv__(self, other):
        return div(self, _wrap(other))

    def __matmul__(self, other):
        return matmul(self, _wrap(other))

    def __neg__(self):
        return neg(self)


def param(data, rng=None, shape=None):
    """Trainable leaf tensor. With ``rng`` and ``shape``, draws uniform(-1/sqrt(fan_in), 1/sqrt(fan_in))."""
    if data is None:
        fan_in = shape[0] if len(shape) > 1 else max(1, shape[0])
        bound = 1.0 / math.sqrt(fan_in)
        data = rng.uniform(-bound, bound, size=shape)
    return Tensor(data, requires_grad=True)


def const(data):
    """Gradient-free tensor wrapping a value."""
    return Tensor(data, requires_grad=False)


def _wrap(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _tracked(t: Tensor) -> bool:
    return t.requires_grad or t._backward is not None


def _make(data, parents, backward_fn):
    out = Tensor(data)
    if any(_tracked(p) for p in parents):
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _accum(t: Tensor, g: np.ndarray):
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad = t.grad + g


def _reduce_to(g: np.ndarray, shape) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape`` (leading axes only)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _check_suffix(a: Tensor, b: Tensor, opname: str):
    sa, sb = a.data.shape, b.data.shape
    small, large = (sa, sb) if len(sa) <= len(sb) else (sb, sa)
    if small != large[len(large) - len(small):]:
        raise DimensionError(f"{opname}: shapes {sa} and {sb} do not align on trailing axes")


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_suffix(a, b, "add")

    def bw(g):
        if _tracked(a):
            _accum(a, _reduce_to(g, a.data.shape))
        if _tracked(b):
            _accum(b, _reduce_to(g, b.data.shape))

    return _make(a.data + b.data, (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_suffix(a, b, "sub")

    def bw(g):
        if _tracked(a):
            _accum(a, _reduce_to(g, a.data.shape))
        if _tracked(b):
            _accum(b, _reduce_to(-g, b.data.shape))

    return _make(a.data - b.data, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_suffix(a, b, "mul")

    def bw(g):
        if _tracked(a):
            _accum(a, _reduce_to(g * b.data, a.data.shape))
        if _tracked(b):
            _accum(b, _reduce_to(g * a.data, b.data.shape))

    return _make(a.data * b.data, (a, b), bw)


def div(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_suffix(a, b, "div")

    def bw(g):
        if _tracked(a):
            _accum(a, _reduce_to(g / b.data, a.data.shape))
        if _tracked(b):
            _accum(b, _reduce_to(-g * a.data / (b.data * b.data), b.data.shape))

    return _make(a.data / b.data, (a, b), bw)


def neg(a: Tensor) -> Tensor:
    def bw(g):
        if _tracked(a):
            _accum(a, -g)

    return _make(-a.data, (a,), bw)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise DimensionError(f"matmul: operands must be at least 2-D, got {a.data.shape} and {b.data.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise DimensionError(f"matmul: inner dimensions differ for shapes {a.data.shape} and {b.data.shape}")

    def bw(g):
        if _tracked(a):
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            _accum(a, _reduce_to(ga, a.data.shape))
        if _tracked(b):
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            _accum(b, _reduce_to(gb, b.data.shape))

    return _make(np.matmul(a.data, b.data), (a, b), bw)


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def bw(g):
        if _tracked(a):
            _accum(a, np.transpose(g, inv))

    return _make(np.transpose(a.data, axes), (a,), bw)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)

    def bw(g):
        if _tracked(a):
            _accum(a, g.reshape(a.data.shape))

    return _make(a.data.reshape(shape), (a,), bw)


def expand_leading(a: Tensor, n: int) -> Tensor:
    """Tile ``a`` along a new leading axis of length ``n``; backward sums over it."""

    def bw(g):
        if _tracked(a):
            _accum(a, g.sum(axis=0))

    data = np.broadcast_to(a.data, (n,) + a.data.shape).copy()
    return _make(data, (a,), bw)


# ---------------------------------------------------------------------------
# shape surgery


def concat_last(parts) -> Tensor:
    parts = [_wrap(p) for p in parts]
    sizes = [p.data.shape[-1] for p in parts]

    def bw(g):
        off = 0
        for p, s in zip(parts, sizes):
            if _tracked(p):
                _accum(p, g[..., off:off + s])
            off += s

    return _make(np.concatenate([p.data for p in parts], axis=-1), parts, bw)


def concat_rows(parts) -> Tensor:
    parts = [_wrap(p) for p in parts]
    nonempty = [p for p in parts if p.data.shape[0] > 0]
    parts = nonempty if nonempty else parts[:1]
    sizes = [p.data.shape[0] for p in parts]

    def bw(g):
        off = 0
        for p, s in zip(parts, sizes):
            if _tracked(p):
                _accum(p, g[off:off + s])
            off += s

    return _make(np.concatenate([p.data for p in parts], axis=0), parts, bw)


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)

    def bw(g):
        if _tracked(a):
            full = np.zeros_like(a.data)
            full[idx] = g
            _accum(a, full)

    return _make(a.data[idx].copy(), (a,), bw)


def gather_rows(a: Tensor, indices) -> Tensor:
    indices = np.asarray(indices, dtype=np.int64)

    def bw(g):
        if _tracked(a):
            full = np.zeros_like(a.data)
            np.add.at(full, indices, g)
            _accum(a, full)

    return _make(a.data[indices], (a,), bw)


def scatter_add_rows(a: Tensor, indices, n_rows: int) -> Tensor:
    """out[i] = sum of a[j] over j with indices[j] == i; rows never hit stay zero."""
    indices = np.asarray(indices, dtype=np.int64)
    if len(indices) != a.data.shape[0]:
        raise DimensionError(
            f"scatter_add_rows: {len(indices)} indices for input with shape {a.data.shape}")

    def bw(g):
        if _tracked(a):
            _accum(a, g[indices])

    out = np.zeros((n_rows,) + a.data.shape[1:], dtype=np.float64)
    np.add.at(out, indices, a.data)
    return _make(out, (a,), bw)


# ---------------------------------------------------------------------------
# reductions


def tsum(a: Tensor, axis=None) -> Tensor:
    def bw(g):
        if not _tracked(a):
            return
        if axis is None:
            _accum(a, np.broadcast_to(g, a.data.shape).copy())
        else:
            _accum(a, np.broadcast_to(np.expand_dims(g, axis), a.data.shape).copy())

    return _make(a.data.sum(axis=axis), (a,), bw)


def tmean(a: Tensor, axis=None) -> Tensor:
    count = a.data.size if axis is None else a.data.shape[axis]

    def bw(g):
        if not _tracked(a):
            return
        if axis is None:
            _accum(a, np.broadcast_to(g / count, a.data.shape).copy())
        else:
            _accum(a, np.broadcast_to(np.expand_dims(g, axis) / count, a.data.shape).copy())

    return _make(a.data.mean(axis=axis), (a,), bw)


# ---------------------------------------------------------------------------
# nonlinearities


def relu(a: Tensor) -> Tensor:
    def bw(g):
        if _tracked(a):
            _accum(a, g * (a.data > 0.0))

    return _make(np.maximum(a.data, 0.0), (a,), bw)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softplus(a: Tensor) -> Tensor:
    def bw(g):
        if _tracked(a):
            _accum(a, g * _sigmoid(a.data))

    return _make(np.logaddexp(0.0, a.data), (a,), bw)


def exp(a: Tensor) -> Tensor:
    data = np.exp(a.data)

    def bw(g):
        if _tracked(a):
            _accum(a, g * data)

    return _make(data, (a,), bw)


def log(a: Tensor) -> Tensor:
    def bw(g):
        if _tracked(a):
            _accum(a, g / a.data)

    return _make(np.log(a.data), (a,), bw)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        if _tracked(a):
            dot = (g * y).sum(axis=axis, keepdims=True)
            _accum(a, y * (g - dot))

    return _make(y, (a,), bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last dimension, then scale and shift."""
    d = x.data.shape[-1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise DimensionError(
            f"layer_norm: gain/bias shapes {gain.data.shape}/{bias.data.shape} do not match last dim {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def bw(g):
        if _tracked(bias):
            _accum(bias, g.reshape(-1, d).sum(axis=0))
        if _tracked(gain):
            _accum(gain, (g * xhat).reshape(-1, d).sum(axis=0))
        if _tracked(x):
            dxhat = g * gain.data
            m1 = dxhat.mean(axis=-1, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
            _accum(x, inv * (dxhat - m1 - xhat * m2))

    return _make(xhat * gain.data + bias.data, (x, gain, bias), bw)


# ---------------------------------------------------------------------------
# graph traversal


def _topo_order(root: Tensor):
    order = []
    seen = set()
    stack = [(root, False)]
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
            if id(p) not in seen and (p._backward is not None or p.requires_grad):
                stack.append((p, False))
    return order


def backward(loss: Tensor):
    """Populate ``grad`` on every tracked tensor reachable from the scalar ``loss``."""
    if loss.data.size != 1:
        raise ValidationError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    order = _topo_order(loss)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)

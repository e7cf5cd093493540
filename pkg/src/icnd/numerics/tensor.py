"""Small reverse-mode differentiation engine over numpy arrays.

Only the operators the detector and classifier need are provided. Every
operator broadcasts like numpy and reduces gradients back to operand shapes.
"""
from __future__ import annotations

import numpy as np

from ..errors import DegenerateInputError, DimensionError, InvalidInputError

_GELU_C = np.sqrt(2.0 / np.pi)


class Tensor:
    """An array node in a differentiation graph."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __array__(self, dtype=None, copy=None):
        return self.data if dtype is None else self.data.astype(dtype)

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self, seed=None):
        """Accumulate d(self)/d(leaf) into ``.grad`` of every reachable leaf."""
        if seed is None:
            if self.data.size != 1:
                raise DimensionError("backward() without a seed needs a scalar output")
            seed = np.ones_like(self.data)
        order = []
        seen = set()
        stack = [(self, False)]
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
        grads = {id(self): np.asarray(seed, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return take(self, index)

    @property
    def T(self):
        return swapaxes(self, -1, -2)


def lift(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents, backward):
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a, b):
    a, b = lift(a), lift(b)
    sa, sb = a.shape, b.shape
    return _node(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    a, b = lift(a), lift(b)
    sa, sb = a.shape, b.shape
    return _node(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b):
    a, b = lift(a), lift(b)
    sa, sb = a.shape, b.shape
    av, bv = a.data, b.data
    return _node(av * bv, (a, b),
                 lambda g: (_unbroadcast(g * bv, sa), _unbroadcast(g * av, sb)))


def matmul(a, b):
    """Matrix product over the last two axes, leading axes broadcast."""
    a, b = lift(a), lift(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shapes {a.shape} and {b.shape} are incompatible")
    av, bv = a.data, b.data

    def backward(g):
        ga = np.matmul(g, np.swapaxes(bv, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(av, -1, -2), g) if b.requires_grad else None
        return (None if ga is None else _unbroadcast(ga, av.shape),
                None if gb is None else _unbroadcast(gb, bv.shape))

    return _node(np.matmul(av, bv), (a, b), backward)


def swapaxes(x, i, j):
    x = lift(x)
    return _node(np.swapaxes(x.data, i, j), (x,), lambda g: (np.swapaxes(g, i, j),))


def reshape(x, shape):
    x = lift(x)
    old = x.shape
    return _node(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def take(x, index):
    """Basic or integer-array indexing; the gradient scatters back with add.at."""
    x = lift(x)
    shape = x.shape

    def backward(g):
        out = np.zeros(shape)
        np.add.at(out, index, g)
        return (out,)

    return _node(x.data[index], (x,), backward)


def concat(xs, axis=0):
    xs = [lift(x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    cuts = np.cumsum(sizes)[:-1]
    return _node(np.concatenate([x.data for x in xs], axis=axis), xs,
                 lambda g: tuple(np.split(g, cuts, axis=axis)))


def sum(x, axis=None, keepdims=False):
    x = lift(x)
    shape = x.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _node(x.data.sum(axis=axis, keepdims=keepdims), (x,), backward)


def mean(x, axis=None, keepdims=False):
    x = lift(x)
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def amin(x, axis=-1):
    """Minimum along one axis; the gradient goes to the first minimiser."""
    x = lift(x)
    idx = np.argmin(x.data, axis=axis)
    idx_e = np.expand_dims(idx, axis)
    shape = x.shape

    def backward(g):
        out = np.zeros(shape)
        np.put_along_axis(out, idx_e, np.expand_dims(g, axis), axis=axis)
        return (out,)

    return _node(np.take_along_axis(x.data, idx_e, axis=axis).squeeze(axis), (x,), backward)


def relu(x):
    x = lift(x)
    on = x.data > 0
    return _node(np.where(on, x.data, 0.0), (x,), lambda g: (g * on,))


def gelu(x):
    """tanh approximation of GELU."""
    x = lift(x)
    v = x.data
    t = np.tanh(_GELU_C * (v + 0.044715 * v * v * v))

    def backward(g):
        dt = (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * v * v)
        return (g * (0.5 * (1.0 + t) + 0.5 * v * dt),)

    return _node(0.5 * v * (1.0 + t), (x,), backward)


def _check_finite(v, what):
    if not np.all(np.isfinite(v)):
        raise InvalidInputError(f"{what} contains non-finite values")


def softmax(x, bias=None):
    """Softmax along the last axis of ``x + bias`` with max subtraction.

    ``bias`` may carry ``-inf`` entries to exclude positions.
    """
    x = lift(x)
    if np.isnan(x.data).any():
        raise InvalidInputError("softmax input contains NaN")
    z = x if bias is None else add(x, bias)
    zv = z.data
    m = np.max(zv, axis=-1, keepdims=True)
    e = np.exp(zv - m)
    p = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _node(p, (z,), backward)


def log_softmax(x):
    x = lift(x)
    if np.isnan(x.data).any():
        raise InvalidInputError("log_softmax input contains NaN")
    v = x.data
    m = np.max(v, axis=-1, keepdims=True)
    s = v - m
    lse = np.log(np.exp(s).sum(axis=-1, keepdims=True))
    out = s - lse
    p = np.exp(out)

    def backward(g):
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return _node(out, (x,), backward)


def l2_normalize(x, eps=0.0):
    """Scale vectors along the last axis to unit length."""
    x = lift(x)
    v = x.data
    n = np.sqrt((v * v).sum(axis=-1, keepdims=True))
    if eps == 0.0 and np.any(n == 0):
        raise DegenerateInputError("cannot normalise a zero vector")
    n = np.maximum(n, eps) if eps else n
    u = v / n

    def backward(g):
        return ((g - u * (g * u).sum(axis=-1, keepdims=True)) / n,)

    return _node(u, (x,), backward)


def layer_norm(x, eps=1e-6):
    """Zero-mean, unit-variance normalisation along the last axis (no affine)."""
    x = lift(x)
    v = x.data
    mu = v.mean(axis=-1, keepdims=True)
    c = v - mu
    var = (c * c).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = c * inv

    def backward(g):
        gm = g.mean(axis=-1, keepdims=True)
        gy = (g * y).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - y * gy),)

    return _node(y, (x,), backward)


def grad_scale(x, w):
    """Identity on the forward pass; multiplies the incoming gradient by ``w``."""
    x = lift(x)
    w = np.asarray(w, dtype=np.float64)
    if np.any(w < 0) or np.isnan(w).any():
        raise InvalidInputError("grad_scale weights must be nonnegative")
    try:
        np.broadcast_shapes(w.shape, x.shape)
    except ValueError:
        raise DimensionError(f"weight shape {w.shape} does not match {x.shape}") from None
    shape = x.shape
    return _node(x.data, (x,), lambda g: (_unbroadcast(g * w, shape),))


def stop_gradient(x):
    return Tensor(lift(x).data)

"""Attention primitives, distances and the residual MLP built on :mod:`tensor`."""
from __future__ import annotations

import numpy as np

from ..errors import DegenerateInputError, DimensionError
from . import tensor as T
from .tensor import Tensor, lift


class Param(Tensor):
    """A trainable leaf tensor with a name."""

    __slots__ = ()

    def __init__(self, value, name=None, trainable=True):
        super().__init__(np.array(value, dtype=np.float64), requires_grad=trainable, name=name)


def uniform_init(rng, fan_in, shape):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def matmul(a, b):
    return T.matmul(a, b)


def softmax_rows(m, bias=None):
    return T.softmax(m, bias)


def _check_qkv(q, k, v):
    q, k, v = lift(q), lift(k), lift(v)
    if q.shape[-1] != k.shape[-1]:
        raise DimensionError(f"query width {q.shape[-1]} != key width {k.shape[-1]}")
    if k.shape[-2] != v.shape[-2]:
        raise DimensionError(f"{k.shape[-2]} keys but {v.shape[-2]} values")
    return q, k, v


def attention(q, k, v, bias=None):
    """softmax(q kᵀ / √C + bias) v with ``bias`` shared by every query row."""
    q, k, v = _check_qkv(q, k, v)
    if bias is not None:
        b = np.asarray(bias.data if isinstance(bias, Tensor) else bias)
        if b.shape[-1] != k.shape[-2]:
            raise DimensionError(f"bias length {b.shape[-1]} != {k.shape[-2]} keys")
    return T.matmul(attention_probs(q, k, bias), v)


def attention_probs(q, k, bias=None):
    """Row-stochastic weights softmax(q kᵀ / √C + bias).

    A 1-D (or lower-rank) bias is repeated across query rows; a bias with
    the same rank as the score tensor is added as given.
    """
    q, k = lift(q), lift(k)
    scores = T.mul(T.matmul(q, k.T), 1.0 / np.sqrt(q.shape[-1]))
    if bias is not None:
        if not isinstance(bias, Tensor):
            bias = np.asarray(bias, dtype=np.float64)
            if bias.ndim < scores.ndim:
                bias = np.expand_dims(bias, -2)
        scores = T.add(scores, bias)
    return T.softmax(scores)


def relu_attention(q, k, v):
    """ReLU(q kᵀ) v, unnormalised and unscaled."""
    q, k, v = _check_qkv(q, k, v)
    return T.matmul(T.relu(T.matmul(q, k.T)), v)


def _norms_ok(*xs):
    for x in xs:
        if np.any(np.sqrt((x.data * x.data).sum(axis=-1)) == 0):
            raise DegenerateInputError("cosine distance of a zero vector")


def cosine_distance(a, b):
    """1 − cos(a, b) along the last axis (broadcasting leading axes)."""
    a, b = lift(a), lift(b)
    if a.shape[-1] != b.shape[-1]:
        raise DimensionError(f"vector lengths {a.shape[-1]} and {b.shape[-1]} differ")
    _norms_ok(a, b)
    return T.sub(1.0, T.sum(T.mul(T.l2_normalize(a), T.l2_normalize(b)), axis=-1))


def pairwise_cosine_distance(a, b):
    """Matrix of 1 − cos between rows of ``a`` (…×N×C) and rows of ``b`` (…×M×C)."""
    a, b = lift(a), lift(b)
    _norms_ok(a, b)
    return T.sub(1.0, T.matmul(T.l2_normalize(a), T.l2_normalize(b).T))


class MLP:
    """x + W2·gelu(W1·x + b1) + b2, hidden width fixed at construction."""

    def __init__(self, dim, hidden, rng, name="mlp", trainable=True):
        self.dim = dim
        self.w1 = Param(uniform_init(rng, dim, (dim, hidden)), f"{name}.w1", trainable)
        self.b1 = Param(np.zeros(hidden), f"{name}.b1", trainable)
        self.w2 = Param(uniform_init(rng, hidden, (hidden, dim)), f"{name}.w2", trainable)
        self.b2 = Param(np.zeros(dim), f"{name}.b2", trainable)

    def params(self):
        return [self.w1, self.b1, self.w2, self.b2]

    def __call__(self, x):
        return mlp_forward(x, self.params())


def mlp_forward(x, params):
    w1, b1, w2, b2 = params
    x = lift(x)
    if x.shape[-1] != w1.shape[0]:
        raise DimensionError(f"input width {x.shape[-1]} != MLP width {w1.shape[0]}")
    h = T.gelu(T.add(T.matmul(x, w1), b1))
    return T.add(x, T.add(T.matmul(h, w2), b2))

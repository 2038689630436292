"""Multi-head attention, wired either as self- or cross-attention.

Projections map the model width ``N`` to ``heads * head_size`` and the output
projection maps back to ``N``. Logits are scaled by ``1/sqrt(head_size)``. No
masking is applied: every query attends to every key. Dropout, when enabled,
acts once on the projected output, not on the attention probabilities.
"""
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError
from .tensor import Tensor


@dataclass
class MhaParams:
    w_q: Tensor
    b_q: Tensor
    w_k: Tensor
    b_k: Tensor
    w_v: Tensor
    b_v: Tensor
    w_o: Tensor
    b_o: Tensor
    heads: int
    head_size: int

    def __post_init__(self):
        if self.heads < 1 or self.head_size < 1:
            raise ConfigError(f"heads and head_size must be >= 1, got {self.heads}, {self.head_size}")
        n, inner = self.w_q.shape[0], self.heads * self.head_size
        for name in ("w_q", "w_k", "w_v"):
            if getattr(self, name).shape != (n, inner):
                raise ConfigError(f"{name} has shape {list(getattr(self, name).shape)}, "
                                  f"expected {[n, inner]}")
        if self.w_o.shape != (inner, n):
            raise ConfigError(f"w_o has shape {list(self.w_o.shape)}, expected {[inner, n]}")

    @property
    def width(self):
        return self.w_q.shape[0]

    def named_parameters(self, prefix=""):
        for name in ("w_q", "b_q", "w_k", "b_k", "w_v", "b_v", "w_o", "b_o"):
            yield prefix + name, getattr(self, name)


def mha_shapes(width, heads, head_size):
    """Ordered ``(name, shape)`` pairs of an :class:`MhaParams`."""
    inner = heads * head_size
    return [("w_q", (width, inner)), ("b_q", (inner,)), ("w_k", (width, inner)), ("b_k", (inner,)),
            ("w_v", (width, inner)), ("b_v", (inner,)), ("w_o", (inner, width)), ("b_o", (width,))]


def init_mha(width, heads, head_size, rng_for):
    """Uniform(+-sqrt(1/fan_in)) weights and zero biases.

    ``rng_for(name)`` must return the generator to use for parameter ``name``.
    """
    if heads < 1 or head_size < 1 or width < 1:
        raise ConfigError(f"width, heads and head_size must be >= 1, got {width}, {heads}, {head_size}")
    values = {}
    for name, shape in mha_shapes(width, heads, head_size):
        if name.startswith("b_"):
            values[name] = Tensor(np.zeros(shape), requires_grad=True)
        else:
            bound = np.sqrt(1.0 / shape[0])
            values[name] = Tensor(rng_for(name).uniform(-bound, bound, shape), requires_grad=True)
    return MhaParams(heads=heads, head_size=head_size, **values)


def _split_heads(x, heads, head_size):
    b, length, _ = x.shape
    return x.reshape(b, length, heads, head_size).transpose(0, 2, 1, 3)


def attention_weights(params, query, key):
    """Row-normalised attention probabilities ``[B, h, Lq, Lk]``."""
    q = _split_heads(T.linear(query, params.w_q, params.b_q), params.heads, params.head_size)
    k = _split_heads(T.linear(key, params.w_k, params.b_k), params.heads, params.head_size)
    logits = T.matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(params.head_size))
    return T.softmax(logits, axis=-1)


def multi_head_attention(params, query, key, value, dropout_p=0.0, training=False, rng=None):
    """Attend ``query [B, Lq, N]`` over ``key``/``value [B, Lk, N]``; returns ``[B, Lq, N]``."""
    query, key, value = T.as_tensor(query), T.as_tensor(key), T.as_tensor(value)
    for name, t in (("query", query), ("key", key), ("value", value)):
        if t.ndim != 3:
            raise DimensionError(f"{name} must be [B, L, N], got {list(t.shape)}")
    if key.shape != value.shape:
        raise DimensionError(f"key {list(key.shape)} and value {list(value.shape)} differ")
    if query.shape[0] != key.shape[0] or query.shape[2] != key.shape[2]:
        raise DimensionError(f"query {list(query.shape)} does not share batch/width with "
                             f"key {list(key.shape)}")
    if query.shape[2] != params.width:
        raise DimensionError(f"inputs have width {query.shape[2]}, projections expect {params.width}")

    b, lq, _ = query.shape
    weights = attention_weights(params, query, key)
    v = _split_heads(T.linear(value, params.w_v, params.b_v), params.heads, params.head_size)
    heads = T.matmul(weights, v).transpose(0, 2, 1, 3).reshape(b, lq, params.heads * params.head_size)
    out = T.linear(heads, params.w_o, params.b_o)
    return T.dropout(out, dropout_p, training, rng)


def self_attention(params, x, dropout_p=0.0, training=False, rng=None):
    return multi_head_attention(params, x, x, x, dropout_p, training, rng)

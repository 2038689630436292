"""Pre-norm transformer encoder block and stack.

One block computes::

    X' = X + Dropout(MHSA(LayerNorm(X)))
    Y  = X' + FFN(LayerNorm(X'))

with ``FFN = linear -> ReLU -> dropout -> linear``. The feed-forward width may
be smaller than the model width.
"""
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .attention import MhaParams, init_mha, mha_shapes, self_attention
from .errors import ConfigError, DimensionError
from .tensor import Tensor


@dataclass
class EncoderBlockParams:
    norm1_gamma: Tensor
    norm1_beta: Tensor
    mha: MhaParams
    norm2_gamma: Tensor
    norm2_beta: Tensor
    ffn_w1: Tensor
    ffn_b1: Tensor
    ffn_w2: Tensor
    ffn_b2: Tensor
    dropout_p: float = 0.0
    use_layer_norm: bool = True
    eps: float = 1e-5

    def __post_init__(self):
        n = self.mha.width
        if self.ffn_w1.ndim != 2 or self.ffn_w1.shape[0] != n or self.ffn_w1.shape[1] < 1:
            raise ConfigError(f"ffn_w1 {list(self.ffn_w1.shape)} must be [{n}, d_ff >= 1]")
        if self.ffn_w2.shape != (self.ffn_w1.shape[1], n):
            raise ConfigError(f"ffn_w2 {list(self.ffn_w2.shape)} must be [{self.ffn_w1.shape[1]}, {n}]")

    @property
    def width(self):
        return self.mha.width

    def named_parameters(self, prefix=""):
        yield prefix + "norm1.gamma", self.norm1_gamma
        yield prefix + "norm1.beta", self.norm1_beta
        yield from self.mha.named_parameters(prefix + "mha.")
        yield prefix + "norm2.gamma", self.norm2_gamma
        yield prefix + "norm2.beta", self.norm2_beta
        yield prefix + "ffn.w1", self.ffn_w1
        yield prefix + "ffn.b1", self.ffn_b1
        yield prefix + "ffn.w2", self.ffn_w2
        yield prefix + "ffn.b2", self.ffn_b2


def block_shapes(width, heads, head_size, ff_dim):
    shapes = [("norm1.gamma", (width,)), ("norm1.beta", (width,))]
    shapes += [("mha." + name, s) for name, s in mha_shapes(width, heads, head_size)]
    shapes += [("norm2.gamma", (width,)), ("norm2.beta", (width,)),
               ("ffn.w1", (width, ff_dim)), ("ffn.b1", (ff_dim,)),
               ("ffn.w2", (ff_dim, width)), ("ffn.b2", (width,))]
    return shapes


def init_block(width, heads, head_size, ff_dim, rng_for, dropout_p=0.0, use_layer_norm=True,
               eps=1e-5):
    def uniform(name, shape):
        bound = np.sqrt(1.0 / shape[0])
        return Tensor(rng_for(name).uniform(-bound, bound, shape), requires_grad=True)

    def const(value, shape):
        return Tensor(np.full(shape, value), requires_grad=True)

    return EncoderBlockParams(
        norm1_gamma=const(1.0, (width,)), norm1_beta=const(0.0, (width,)),
        mha=init_mha(width, heads, head_size, lambda name: rng_for("mha." + name)),
        norm2_gamma=const(1.0, (width,)), norm2_beta=const(0.0, (width,)),
        ffn_w1=uniform("ffn.w1", (width, ff_dim)), ffn_b1=const(0.0, (ff_dim,)),
        ffn_w2=uniform("ffn.w2", (ff_dim, width)), ffn_b2=const(0.0, (width,)),
        dropout_p=dropout_p, use_layer_norm=use_layer_norm, eps=eps,
    )


def encoder_block_forward(params, x, training=False, rng=None):
    """Apply one encoder block to ``x [B, S, N]``; output has the same shape."""
    x = T.as_tensor(x)
    if x.ndim != 3 or x.shape[-1] != params.width:
        raise DimensionError(f"encoder block of width {params.width} got input {list(x.shape)}")
    p = params.dropout_p

    h = T.layer_norm(x, params.norm1_gamma, params.norm1_beta, params.eps) if params.use_layer_norm else x
    x = x + self_attention(params.mha, h, p, training, rng)

    h = T.layer_norm(x, params.norm2_gamma, params.norm2_beta, params.eps) if params.use_layer_norm else x
    h = T.relu(T.linear(h, params.ffn_w1, params.ffn_b1))
    h = T.dropout(h, p, training, rng)
    return x + T.linear(h, params.ffn_w2, params.ffn_b2)


def encoder_stack_forward(blocks, x, training=False, rng=None):
    if not blocks:
        raise ConfigError("encoder stack needs at least one block")
    for block in blocks:
        x = encoder_block_forward(block, x, training, rng)
    return x

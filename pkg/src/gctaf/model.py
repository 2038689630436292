"""The GCTAF classifier and its ablation variants.

Forward pass for ``x [B, tau, N]``::

    tokens   = expand(global_tokens [1, G, N], B)              # [B, G, N]
    attended = MHA(Q=tokens, K=x, V=x)                         # [B, G, N]
    seq      = concat(x, attended, time axis)                  # [B, tau+G, N]
    seq      = encoder blocks 1..L (seq)
    v_local  = mean over time of seq[:, :tau]                  # [B, N]
    v_global = mean over tokens of seq[:, tau:]                # [B, N]
    logits   = Linear(MLP(concat(v_local, v_global)))          # [B, C]

Ablations:

* ``no_global_tokens``: the encoder runs on ``x`` alone and the fused vector
  is ``[v_local, v_local]`` so the head keeps its ``2N`` input width. This is
  the plain transformer (TR) baseline, see :func:`tr_forward`.
* ``no_cross_attention``: the raw expanded tokens are concatenated.
* ``no_layer_norm``: both LayerNorms in every block become the identity.

Parameter count (``h`` heads of width ``d``, ``I = h*d``)::

    mha(N)   = 4*N*I + 3*I + N
    block    = 4*N + mha(N) + 2*N*d_ff + d_ff + N
    head     = sum_i (u_{i-1} + 1) * u_i + (u_last + 1) * C,   u_0 = 2N
    total    = G*N + mha(N) + L*block + head

minus ``G*N`` for ``no_global_tokens`` and minus ``mha(N)`` for both
``no_global_tokens`` and ``no_cross_attention``.
"""
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import tensor as T
from .attention import MhaParams, init_mha, multi_head_attention
from .encoder import EncoderBlockParams, encoder_stack_forward, init_block
from .errors import ConfigError, DimensionError
from .rng import stream
from .tensor import Tensor

ABLATIONS = ("none", "no_global_tokens", "no_cross_attention", "no_layer_norm")

ABLATION_LABELS = {
    "none": "GCTAF",
    "no_global_tokens": "no global tokens",
    "no_cross_attention": "no cross-attention",
    "no_layer_norm": "no layer normalization",
}


@dataclass(frozen=True)
class ModelConfig:
    tau: int = 60
    n_features: int = 24
    num_classes: int = 2
    global_tokens: int = 4
    num_blocks: int = 1
    heads: int = 4
    head_size: int = 256
    ff_dim: int = 4
    mlp_units: tuple = (128, 64)
    dropout: float = 0.1
    ablation: str = "none"
    positional_encoding: bool = False
    layer_norm_eps: float = 1e-5
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "mlp_units", tuple(int(u) for u in self.mlp_units))
        if self.ablation not in ABLATIONS:
            raise ConfigError(f"unknown ablation {self.ablation!r}; expected one of {ABLATIONS}")
        for name in ("tau", "n_features", "num_blocks", "heads", "head_size", "ff_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.global_tokens < 1 and self.ablation != "no_global_tokens":
            raise ConfigError(f"global_tokens must be >= 1, got {self.global_tokens}")
        if not self.mlp_units or min(self.mlp_units) < 1:
            raise ConfigError(f"mlp_units must be a non-empty list of positive widths, got {self.mlp_units}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.layer_norm_eps <= 0:
            raise ConfigError("layer_norm_eps must be positive")

    @property
    def effective_tokens(self):
        return 0 if self.ablation == "no_global_tokens" else self.global_tokens

    def to_dict(self):
        d = asdict(self)
        d["mlp_units"] = list(self.mlp_units)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def replace(self, **changes):
        d = self.to_dict()
        d.update(changes)
        return ModelConfig.from_dict(d)


@dataclass
class GctafParams:
    blocks: list
    mlp: list  # [(w [in, out], b [out]), ...]
    output_layer: tuple  # (w [u_last, C], b [C])
    global_tokens: Tensor = None  # [1, G, N]
    cross_attn: MhaParams = None

    def named_parameters(self):
        """All learnable tensors under stable dotted names, in a fixed order."""
        if self.global_tokens is not None:
            yield "global_tokens", self.global_tokens
        if self.cross_attn is not None:
            yield from self.cross_attn.named_parameters("cross_attn.")
        for i, block in enumerate(self.blocks):
            yield from block.named_parameters(f"blocks.{i}.")
        for i, (w, b) in enumerate(self.mlp):
            yield f"mlp.{i}.w", w
            yield f"mlp.{i}.b", b
        yield "out.w", self.output_layer[0]
        yield "out.b", self.output_layer[1]

    def parameters(self):
        return [t for _, t in self.named_parameters()]

    def zero_grad(self):
        for t in self.parameters():
            t.zero_grad()

    def state(self):
        """Copies of every parameter array, keyed by name."""
        return {name: t.data.copy() for name, t in self.named_parameters()}

    def load_state(self, state):
        for name, t in self.named_parameters():
            if state[name].shape != t.shape:
                raise DimensionError(f"{name}: stored shape {list(state[name].shape)} "
                                     f"!= parameter shape {list(t.shape)}")
            t.data = np.array(state[name], dtype=np.float64)


def parameter_count(cfg):
    n, inner, d_ff = cfg.n_features, cfg.heads * cfg.head_size, cfg.ff_dim
    mha = 4 * n * inner + 3 * inner + n
    block = 4 * n + mha + 2 * n * d_ff + d_ff + n
    head, width = 0, 2 * n
    for units in cfg.mlp_units:
        head += (width + 1) * units
        width = units
    head += (width + 1) * cfg.num_classes
    total = cfg.num_blocks * block + head
    if cfg.ablation != "no_global_tokens":
        total += cfg.global_tokens * n
    if cfg.ablation not in ("no_global_tokens", "no_cross_attention"):
        total += mha
    return total


def _uniform(rng, shape):
    bound = np.sqrt(1.0 / shape[0])
    return Tensor(rng.uniform(-bound, bound, shape), requires_grad=True)


def init_params(cfg, seed=None):
    """Fresh parameters; each tensor draws from its own named stream of ``seed``."""
    seed = cfg.seed if seed is None else seed

    def rng_for(name):
        return stream(seed, "init", name)

    n = cfg.n_features
    use_ln = cfg.ablation != "no_layer_norm"
    blocks = [
        init_block(n, cfg.heads, cfg.head_size, cfg.ff_dim,
                   lambda name, i=i: rng_for(f"blocks.{i}.{name}"),
                   dropout_p=cfg.dropout, use_layer_norm=use_ln, eps=cfg.layer_norm_eps)
        for i in range(cfg.num_blocks)
    ]
    mlp, width = [], 2 * n
    for i, units in enumerate(cfg.mlp_units):
        mlp.append((_uniform(rng_for(f"mlp.{i}.w"), (width, units)),
                    Tensor(np.zeros(units), requires_grad=True)))
        width = units
    output_layer = (_uniform(rng_for("out.w"), (width, cfg.num_classes)),
                    Tensor(np.zeros(cfg.num_classes), requires_grad=True))

    tokens = cross = None
    if cfg.ablation != "no_global_tokens":
        bound = np.sqrt(1.0 / n)
        tokens = Tensor(rng_for("global_tokens").uniform(-bound, bound, (1, cfg.global_tokens, n)),
                        requires_grad=True)
    if cfg.ablation not in ("no_global_tokens", "no_cross_attention"):
        cross = init_mha(n, cfg.heads, cfg.head_size, lambda name: rng_for("cross_attn." + name))
    return GctafParams(blocks=blocks, mlp=mlp, output_layer=output_layer,
                       global_tokens=tokens, cross_attn=cross)


def check_params(params, cfg):
    """Raise :class:`ConfigError` if ``params`` do not fit ``cfg``'s architecture."""
    want_tokens = cfg.ablation != "no_global_tokens"
    want_cross = cfg.ablation not in ("no_global_tokens", "no_cross_attention")
    if (params.global_tokens is not None) != want_tokens:
        raise ConfigError(f"ablation {cfg.ablation!r} is inconsistent with global token parameters")
    if (params.cross_attn is not None) != want_cross:
        raise ConfigError(f"ablation {cfg.ablation!r} is inconsistent with cross-attention parameters")
    if len(params.blocks) != cfg.num_blocks:
        raise ConfigError(f"config wants {cfg.num_blocks} encoder blocks, params have {len(params.blocks)}")
    if want_tokens and params.global_tokens.shape != (1, cfg.global_tokens, cfg.n_features):
        raise ConfigError(f"global tokens have shape {list(params.global_tokens.shape)}, expected "
                          f"{[1, cfg.global_tokens, cfg.n_features]}")
    if len(params.mlp) != len(cfg.mlp_units):
        raise ConfigError("MLP depth does not match mlp_units")
    use_ln = cfg.ablation != "no_layer_norm"
    for block in params.blocks:
        if block.use_layer_norm != use_ln:
            raise ConfigError(f"block layer-norm flag does not match ablation {cfg.ablation!r}")


def mlp_head(mlp, output_layer, v, dropout_p=0.0, training=False, rng=None):
    """``(linear -> ReLU -> dropout)`` per hidden width, then the output linear."""
    for w, b in mlp:
        v = T.dropout(T.relu(T.linear(v, w, b)), dropout_p, training, rng)
    return T.linear(v, *output_layer)


def _record(trace, name, t):
    if trace is not None:
        trace[name] = t


def _check_input(cfg, x):
    x = T.as_tensor(x)
    if x.ndim != 3 or x.shape[1:] != (cfg.tau, cfg.n_features):
        raise DimensionError(f"expected input [B, {cfg.tau}, {cfg.n_features}], got {list(x.shape)}")
    if cfg.positional_encoding:
        x = x + T.sinusoidal_encoding(cfg.tau, cfg.n_features)
    return x


def _run(params, cfg, x, training, rng, trace):
    check_params(params, cfg)
    x = _check_input(cfg, x)
    tau = cfg.tau
    p = cfg.dropout
    _record(trace, "input", x)

    if cfg.ablation == "no_global_tokens":
        seq = x
    else:
        tokens = T.broadcast_to(params.global_tokens, (x.shape[0], cfg.global_tokens, cfg.n_features))
        _record(trace, "expanded_tokens", tokens)
        if cfg.ablation == "no_cross_attention":
            attended = tokens
        else:
            attended = multi_head_attention(params.cross_attn, tokens, x, x, p, training, rng)
        _record(trace, "cross_attention", attended)
        seq = T.concat([x, attended], axis=1)
    _record(trace, "concat", seq)

    seq = encoder_stack_forward(params.blocks, seq, training, rng)
    _record(trace, "encoded", seq)

    if cfg.ablation == "no_global_tokens":
        local = seq
        _record(trace, "local", local)
        v_local = T.mean(local, axis=1)
        v_global = v_local
    else:
        local = T.slice_(seq, 1, 0, tau)
        global_ = T.slice_(seq, 1, tau, tau + cfg.global_tokens)
        _record(trace, "local", local)
        _record(trace, "global", global_)
        v_local = T.mean(local, axis=1)
        v_global = T.mean(global_, axis=1)
    _record(trace, "v_local", v_local)
    _record(trace, "v_global", v_global)

    fused = T.concat([v_local, v_global], axis=1)
    _record(trace, "fused", fused)
    logits = mlp_head(params.mlp, params.output_layer, fused, p, training, rng)
    _record(trace, "logits", logits)
    return logits


def forward(params, cfg, x, training=False, rng=None, trace=None):
    """Logits ``[B, C]`` for ``x [B, tau, N]``.

    Dispatches to :func:`forward_ablated` when ``cfg.ablation`` is set. Pass a
    dict as ``trace`` to receive every intermediate tensor by stage name.
    """
    if cfg.ablation != "none":
        return forward_ablated(params, cfg, x, training, rng, trace)
    return _run(params, cfg, x, training, rng, trace)


def forward_ablated(params, cfg, x, training=False, rng=None, trace=None):
    if cfg.ablation == "none":
        raise ConfigError("forward_ablated needs an ablation other than 'none'")
    return _run(params, cfg, x, training, rng, trace)


def tr_forward(blocks, mlp, output_layer, x, dropout_p=0.0, training=False, rng=None):
    """Plain transformer classifier: encoder stack, time average, the pooled
    vector duplicated to width ``2N``, MLP head."""
    h = encoder_stack_forward(blocks, T.as_tensor(x), training, rng)
    pooled = T.mean(h, axis=1)
    return mlp_head(mlp, output_layer, T.concat([pooled, pooled], axis=1), dropout_p, training, rng)


def predict(params, cfg, x, batch_size=256):
    """Class ids by argmax over logits (ties resolve to class 0, NF)."""
    x = np.asarray(x, dtype=np.float64)
    out = []
    for i in range(0, len(x), batch_size):
        logits = forward(params, cfg, x[i:i + batch_size]).data
        out.append(np.argmax(logits, axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=int)

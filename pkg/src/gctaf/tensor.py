"""Dense float64 tensors with reverse-mode automatic differentiation.

Each differentiable op returns a :class:`Tensor` whose ``node`` records the
op name, the parent tensors and a closure mapping the output gradient to one
gradient per parent. :func:`backward` walks the graph once in reverse
topological order. Gradients of intermediate tensors exist only for the
duration of a backward call; leaf tensors created with ``requires_grad=True``
accumulate into ``.grad`` until :meth:`Tensor.zero_grad` is called.

Elementwise ops follow numpy broadcasting and reduce gradients back to each
parent's shape. ``matmul`` broadcasts leading (batch) extents only.
"""
import contextlib

import numpy as np

from .errors import ContractError, DimensionError, NonFiniteError

_anomaly = False


@contextlib.contextmanager
def detect_anomaly(enabled=True):
    """Fail fast with :class:`NonFiniteError` on any non-finite op output."""
    global _anomaly
    prev, _anomaly = _anomaly, enabled
    try:
        yield
    finally:
        _anomaly = prev


class Node:
    """Back-reference from an op output into the computation graph."""

    __slots__ = ("op", "parents", "backward_fn")

    def __init__(self, op, parents, backward_fn):
        self.op = op
        self.parents = parents
        self.backward_fn = backward_fn

    def __repr__(self):
        return f"Node({self.op}, parents={len(self.parents)})"


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node")
    __array_priority__ = 1000  # make ndarray <op> Tensor defer to Tensor

    def __init__(self, data, requires_grad=False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self.node = None

    @classmethod
    def _result(cls, data, op, parents, backward_fn):
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.requires_grad = any(p.requires_grad for p in parents)
        out.node = Node(op, parents, backward_fn) if out.requires_grad else None
        if _anomaly and not np.all(np.isfinite(data)):
            raise NonFiniteError(f"non-finite values produced by {op}")
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={list(self.shape)}{flag})"

    def __len__(self):
        return len(self.data)

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(o, self)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(o, self)
    __truediv__ = lambda self, o: div(self, o)
    __rtruediv__ = lambda self, o: div(o, self)
    __neg__ = lambda self: neg(self)
    __matmul__ = lambda self, o: matmul(self, o)
    __rmatmul__ = lambda self, o: matmul(o, self)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(op, *shapes):
    try:
        return np.broadcast_shapes(*shapes)
    except ValueError:
        raise DimensionError(f"{op}: shapes {' and '.join(str(list(s)) for s in shapes)} "
                             "cannot be broadcast") from None


def _norm_axis(axis, ndim, op):
    if not -ndim <= axis < ndim:
        raise DimensionError(f"{op}: axis {axis} out of range for rank {ndim}")
    return axis % ndim


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return Tensor._result(a.data + b.data, "add", (a, b),
                          lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return Tensor._result(a.data - b.data, "sub", (a, b),
                          lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a.shape, b.shape)
    ad, bd = a.data, b.data
    return Tensor._result(ad * bd, "mul", (a, b),
                          lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a.shape, b.shape)
    ad, bd = a.data, b.data
    out = ad / bd
    return Tensor._result(out, "div", (a, b),
                          lambda g: (_unbroadcast(g / bd, ad.shape),
                                     _unbroadcast(-g * out / bd, bd.shape)))


def neg(a):
    return Tensor._result(-a.data, "neg", (a,), lambda g: (-g,))


def exp(a):
    out = np.exp(a.data)
    return Tensor._result(out, "exp", (a,), lambda g: (g * out,))


def log(a):
    ad = a.data
    return Tensor._result(np.log(ad), "log", (a,), lambda g: (g / ad,))


def relu(a):
    a = as_tensor(a)
    mask = a.data > 0
    # np.maximum propagates NaN, so bad inputs stay visible to the loss guard
    return Tensor._result(np.maximum(a.data, 0.0), "relu", (a,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a, b):
    """Batched matrix product ``[.., m, k] @ [.., k, n] -> [.., m, n]``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: incompatible shapes {list(a.shape)} and {list(b.shape)}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise DimensionError(f"matmul: batch extents of {list(a.shape)} and {list(b.shape)} "
                             "are not broadcastable") from None
    ad, bd = a.data, b.data

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return Tensor._result(ad @ bd, "matmul", (a, b), backward)


def linear(x, w, b=None):
    """``x @ w + b`` over the last axis of ``x``; ``w`` is ``[in, out]``."""
    x = as_tensor(x)
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise DimensionError(f"linear: input {list(x.shape)} does not match weight {list(w.shape)}")
    if b is not None and b.shape != (w.shape[1],):
        raise DimensionError(f"linear: bias {list(b.shape)} does not match weight {list(w.shape)}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, w.shape[0])
    out = x2 @ w.data
    if b is not None:
        out = out + b.data
    wd = w.data

    def backward(g):
        g2 = g.reshape(-1, wd.shape[1])
        grads = [(g2 @ wd.T).reshape(x.shape), x2.T @ g2]
        if b is not None:
            grads.append(g2.sum(axis=0))
        return tuple(grads)

    parents = (x, w) if b is None else (x, w, b)
    return Tensor._result(out.reshape(lead + (wd.shape[1],)), "linear", parents, backward)


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------

def _expand_reduced(g, shape, axis, keepdims):
    if axis is not None and not keepdims:
        axes = (axis,) if isinstance(axis, int) else axis
        g = np.expand_dims(g, tuple(a % len(shape) for a in axes))
    return np.broadcast_to(g, shape)


def sum_(a, axis=None, keepdims=False):
    shape = a.shape
    return Tensor._result(np.sum(a.data, axis=axis, keepdims=keepdims), "sum", (a,),
                          lambda g: (np.array(_expand_reduced(g, shape, axis, keepdims)),))


def mean(a, axis=None, keepdims=False):
    """Arithmetic mean over ``axis`` (all axes when ``None``)."""
    a = as_tensor(a)
    if isinstance(axis, int):
        _norm_axis(axis, a.ndim, "mean")
    shape = a.shape
    out = np.mean(a.data, axis=axis, keepdims=keepdims)
    count = a.size // out.size
    return Tensor._result(out, "mean", (a,),
                          lambda g: (np.array(_expand_reduced(g, shape, axis, keepdims)) / count,))


def reshape(a, shape):
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {list(old)} as {list(shape)}") from None
    return Tensor._result(out, "reshape", (a,), lambda g: (g.reshape(old),))


def transpose(a, axes=None):
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return Tensor._result(np.transpose(a.data, axes), "transpose", (a,),
                          lambda g: (np.transpose(g, inv),))


def broadcast_to(a, shape):
    """Expand ``a`` to ``shape`` without copying (e.g. ``[1,G,N] -> [B,G,N]``)."""
    shape = tuple(shape)
    if _broadcast_shape("broadcast_to", a.shape, shape) != shape:
        raise DimensionError(f"broadcast_to: {list(a.shape)} cannot expand to {list(shape)}")
    old = a.shape
    return Tensor._result(np.broadcast_to(a.data, shape), "broadcast_to", (a,),
                          lambda g: (_unbroadcast(g, old),))


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise DimensionError("concat: no tensors given")
    ndim = tensors[0].ndim
    ax = _norm_axis(axis, ndim, "concat")
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != ndim or any(t.shape[i] != ref[i] for i in range(ndim) if i != ax):
            raise DimensionError(f"concat: shape {list(t.shape)} does not match {list(ref)} "
                                 f"outside axis {axis}")
    splits = np.cumsum([t.shape[ax] for t in tensors])[:-1]
    return Tensor._result(np.concatenate([t.data for t in tensors], axis=ax), "concat",
                          tuple(tensors), lambda g: tuple(np.split(g, splits, axis=ax)))


def slice_(a, axis, start, stop):
    """Rows ``start:stop`` of ``a`` along ``axis`` (negative indices allowed)."""
    ax = _norm_axis(axis, a.ndim, "slice")
    n = a.shape[ax]
    lo = start + n if start < 0 else start
    hi = stop + n if stop is not None and stop < 0 else (n if stop is None else stop)
    if not 0 <= lo < hi <= n:
        raise DimensionError(f"slice: range {start}:{stop} invalid for extent {n} on axis {axis}")
    idx = (slice(None),) * ax + (slice(lo, hi),)
    shape = a.shape

    def backward(g):
        full = np.zeros(shape)
        full[idx] = g
        return (full,)

    return Tensor._result(a.data[idx], "slice", (a,), backward)


# ---------------------------------------------------------------------------
# normalisers
# ---------------------------------------------------------------------------

def softmax(a, axis=-1):
    a = as_tensor(a)
    _norm_axis(axis, a.ndim, "softmax")
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)
    return Tensor._result(out, "softmax", (a,),
                          lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),))


def log_softmax(a, axis=-1):
    a = as_tensor(a)
    _norm_axis(axis, a.ndim, "log_softmax")
    z = a.data - a.data.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))
    return Tensor._result(out, "log_softmax", (a,),
                          lambda g: (g - np.exp(out) * g.sum(axis=axis, keepdims=True),))


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalise over the last axis, then apply ``gamma * xhat + beta``."""
    x = as_tensor(x)
    n = x.shape[-1]
    if gamma.shape != (n,) or beta.shape != (n,):
        raise DimensionError(f"layer_norm: affine shapes {list(gamma.shape)}, {list(beta.shape)} "
                             f"do not match last extent of {list(x.shape)}")
    if eps <= 0:
        raise ValueError("layer_norm: eps must be positive")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gd = gamma.data
    lead = tuple(range(x.ndim - 1))

    def backward(g):
        dxhat = g * gd
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return Tensor._result(xhat * gd + beta.data, "layer_norm", (x, gamma, beta), backward)


def dropout(x, p, training, rng=None):
    """Inverted dropout: zero with probability ``p`` and rescale by ``1/(1-p)``.

    Identity (the same object) when not training or when ``p == 0``.
    """
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must lie in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ContractError("dropout in training mode needs an rng")
    mask = (rng.random(x.shape) >= p) / (1.0 - p)
    return Tensor._result(x.data * mask, "dropout", (x,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

def _topo_order(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t.node is not None:
            for p in t.node.parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
    return order


def backward(loss):
    """Accumulate d(loss)/d(leaf) into the ``.grad`` of every reachable leaf."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {list(loss.shape)}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor with requires_grad")
    grads = {id(loss): np.ones_like(loss.data)}
    for t in reversed(_topo_order(loss)):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t.node is None:
            t.grad = t.grad + g if t.grad is not None else np.array(g)
            continue
        for p, pg in zip(t.node.parents, t.node.backward_fn(g)):
            if not p.requires_grad:
                continue
            key = id(p)
            grads[key] = grads[key] + pg if key in grads else pg


def sinusoidal_encoding(length, width):
    """Standard sine/cosine positional table of shape ``[length, width]``."""
    pos = np.arange(length)[:, None]
    i = np.arange(width)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / max(width, 1))
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


__all__ = [
    "Tensor", "Node", "detect_anomaly", "as_tensor", "add", "sub", "mul", "div", "neg",
    "exp", "log", "relu", "matmul", "linear", "sum_", "mean", "reshape", "transpose",
    "broadcast_to", "concat", "slice_", "softmax", "log_softmax", "layer_norm", "dropout",
    "backward", "sinusoidal_encoding",
]

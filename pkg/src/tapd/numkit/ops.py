"""Differentiable operations: the primitive registry plus composite ops.

The primitive set is exactly what the forecasting models need. Each primitive
validates its shape rule, computes the forward value, and registers a
vector-Jacobian product closure. Composite ops (layer_norm, the two losses,
detach) are single tape nodes with hand-derived VJPs; everything else is
built from primitives.
"""

from __future__ import annotations

import math

import numpy as np

from .tensor import (
    ShapeError,
    Tensor,
    UnknownPrimitiveError,
    record,
)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient down to the shape of a broadcast operand."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: inputs must be at least 2-D, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ ({a.shape} @ {b.shape})")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: batch dimensions incompatible ({a.shape} @ {b.shape})")
    out = np.matmul(a.data, b.data)

    def vjp(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return record("matmul", (a, b), out, vjp)


def _broadcast_check(op, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes not broadcastable ({a.shape} vs {b.shape})")


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_check("add", a, b)
    out = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return record("add", (a, b), out, vjp)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_check("mul", a, b)
    out = a.data * b.data

    def vjp(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return record("mul", (a, b), out, vjp)


def concat(tensors, axis: int) -> Tensor:
    ts = tuple(tensors)
    if not ts:
        raise ShapeError("concat-along-axis: empty input list")
    nd = ts[0].ndim
    if axis < 0:
        axis += nd
    if not 0 <= axis < nd:
        raise ShapeError(f"concat-along-axis: axis {axis} out of range for ndim {nd}")
    ref = list(ts[0].shape)
    for t in ts[1:]:
        if t.ndim != nd or any(
            i != axis and t.shape[i] != ref[i] for i in range(nd)
        ):
            raise ShapeError(
                f"concat-along-axis: shapes {[t.shape for t in ts]} differ off axis {axis}"
            )
    out = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.shape[axis] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        return tuple(
            g[tuple(slice(None) if i != axis else slice(offsets[j], offsets[j + 1]) for i in range(nd))]
            for j in range(len(ts))
        )

    return record("concat-along-axis", ts, out, vjp)


def _normalize_key(key, shape):
    if not isinstance(key, tuple):
        key = (key,)
    if len(key) > len(shape):
        raise ShapeError(f"slice: too many indices for shape {shape}")
    norm = []
    for i, s in enumerate(shape):
        if i < len(key):
            k = key[i]
            if not isinstance(k, slice):
                raise ShapeError("slice: only slice indices are supported")
            if k.step not in (None, 1):
                raise ShapeError("slice: step must be 1")
            start, stop, _ = k.indices(s)
            if stop < start:
                stop = start
            if stop == start:
                raise ShapeError(f"slice: empty result along axis {i} of shape {shape}")
            norm.append(slice(start, stop))
        else:
            norm.append(slice(0, s))
    return tuple(norm)


def slice_(x: Tensor, key) -> Tensor:
    nk = _normalize_key(key, x.shape)
    out = np.ascontiguousarray(x.data[nk])

    def vjp(g):
        gx = np.zeros_like(x.data)
        gx[nk] = g
        return (gx,)

    return record("slice", (x,), out, vjp)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != x.size or any(s <= 0 for s in shape):
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}")
    out = x.data.reshape(shape).copy()

    def vjp(g):
        return (g.reshape(x.shape),)

    return record("reshape", (x,), out, vjp)


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0.0)

    def vjp(g):
        return (g * (x.data > 0.0),)

    return record("relu", (x,), out, vjp)


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)

    def vjp(g):
        return (g * (1.0 - out * out),)

    return record("tanh", (x,), out, vjp)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return record("softmax-along-axis", (x,), out, vjp)


def _reduction(op, x, axis, keepdims, denom):
    if axis is not None and not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"{op}: axis {axis} out of range for shape {x.shape}")
    fn = np.mean if op == "mean" else np.sum
    out = np.asarray(fn(x.data, axis=axis, keepdims=keepdims))

    def vjp(g):
        if axis is None:
            expanded = np.broadcast_to(g.reshape((1,) * x.ndim), x.shape)
        else:
            if not keepdims:
                g = np.expand_dims(g, axis=axis)
            expanded = np.broadcast_to(g, x.shape)
        return (expanded / denom,)

    return record(op, (x,), out, vjp)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.size if axis is None else x.shape[axis]
    return _reduction("mean", x, axis, keepdims, float(n))


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    return _reduction("sum", x, axis, keepdims, 1.0)


def sdpa(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """Single-head scaled dot-product attention: softmax(q kᵀ / √d) v."""
    if q.ndim < 2 or q.ndim != k.ndim or q.ndim != v.ndim:
        raise ShapeError(
            f"scaled-dot-product-attention: ranks differ ({q.shape}, {k.shape}, {v.shape})"
        )
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise ShapeError(
            f"scaled-dot-product-attention: incompatible shapes ({q.shape}, {k.shape}, {v.shape})"
        )
    if q.shape[:-2] != k.shape[:-2] or q.shape[:-2] != v.shape[:-2]:
        raise ShapeError(
            f"scaled-dot-product-attention: batch dims differ ({q.shape}, {k.shape}, {v.shape})"
        )
    scale = 1.0 / math.sqrt(q.shape[-1])
    scores = np.matmul(q.data, np.swapaxes(k.data, -1, -2)) * scale
    scores -= scores.max(axis=-1, keepdims=True)
    e = np.exp(scores)
    attn = e / e.sum(axis=-1, keepdims=True)
    out = np.matmul(attn, v.data)

    def vjp(g):
        gv = np.matmul(np.swapaxes(attn, -1, -2), g)
        ga = np.matmul(g, np.swapaxes(v.data, -1, -2))
        gs = attn * (ga - (ga * attn).sum(axis=-1, keepdims=True))
        gq = np.matmul(gs, k.data) * scale
        gk = np.matmul(np.swapaxes(gs, -1, -2), q.data) * scale
        return gq, gk, gv

    return record("scaled-dot-product-attention", (q, k, v), out, vjp)


_PRIMITIVES = {
    "matmul": lambda inputs, **kw: matmul(*inputs, **kw),
    "add": lambda inputs, **kw: add(*inputs, **kw),
    "mul": lambda inputs, **kw: mul(*inputs, **kw),
    "concat-along-axis": lambda inputs, **kw: concat(inputs, **kw),
    "slice": lambda inputs, **kw: slice_(*inputs, **kw),
    "reshape": lambda inputs, **kw: reshape(*inputs, **kw),
    "relu": lambda inputs, **kw: relu(*inputs, **kw),
    "tanh": lambda inputs, **kw: tanh(*inputs, **kw),
    "softmax-along-axis": lambda inputs, **kw: softmax(*inputs, **kw),
    "mean": lambda inputs, **kw: mean(*inputs, **kw),
    "sum": lambda inputs, **kw: sum_(*inputs, **kw),
    "scaled-dot-product-attention": lambda inputs, **kw: sdpa(*inputs, **kw),
}


def apply_primitive(op: str, inputs, **attrs) -> Tensor:
    """Apply a primitive by id. Unknown ids are rejected."""
    builder = _PRIMITIVES.get(op)
    if builder is None:
        raise UnknownPrimitiveError(f"unknown primitive '{op}'")
    return builder(tuple(inputs), **attrs)


def primitive_ids() -> tuple:
    return tuple(_PRIMITIVES)


# ---------------------------------------------------------------------------
# composite ops (single tape node, hand-derived VJP)
# ---------------------------------------------------------------------------


def detach(x: Tensor) -> Tensor:
    """A gradient wall: same values, no gradient flows through or past it."""
    out_arr = x.data.copy()

    def vjp(g):
        return (None,)

    return record("detach", (x,), out_arr, vjp, requires_grad=False)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Zero-mean unit-variance normalization over the last axis, then affine.

    gamma/beta must have the same trailing dimension as x; extra leading axes
    of size 1 are allowed so per-length parameter stacks can broadcast.
    """
    if eps <= 0:
        raise ValueError(f"layer_norm: eps must be positive, got {eps}")
    if gamma.shape[-1] != x.shape[-1] or beta.shape[-1] != x.shape[-1]:
        raise ShapeError(
            f"layer_norm: gamma/beta trailing dim must be {x.shape[-1]}, "
            f"got {gamma.shape} and {beta.shape}"
        )
    _broadcast_check("layer_norm", x, gamma)
    _broadcast_check("layer_norm", x, beta)
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = gamma.data * xhat + beta.data

    def vjp(g):
        dgamma = _unbroadcast(g * xhat, gamma.shape)
        dbeta = _unbroadcast(g, beta.shape)
        dxhat = g * gamma.data
        dx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return dx, dgamma, dbeta

    return record("layer-norm", (x, gamma, beta), out, vjp)


def smooth_l1_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean Huber loss with unit transition: 0.5 d² inside |d|<1, |d|−0.5 outside."""
    if pred.shape != target.shape:
        raise ShapeError(f"smooth_l1_loss: shapes differ ({pred.shape} vs {target.shape})")
    d = pred.data - target.data
    ad = np.abs(d)
    per = np.where(ad < 1.0, 0.5 * d * d, ad - 0.5)
    out = np.asarray(per.mean())
    n = float(d.size)

    def vjp(g):
        w = np.clip(d, -1.0, 1.0) * (float(g) / n)
        return w, -w

    return record("smooth-l1", (pred, target), out, vjp)


def cross_entropy_loss(logits: Tensor, target_index) -> Tensor:
    """−log softmax(logits)[target], mean over rows for stacked logits.

    logits is (K,) with an int target, or (..., K) with an int array of
    matching leading shape. Uses the log-sum-exp shift for stability.
    """
    idx = np.asarray(target_index, dtype=np.int64)
    k = logits.shape[-1]
    lead = logits.shape[:-1]
    if idx.shape != lead:
        raise ShapeError(
            f"cross_entropy_loss: index shape {idx.shape} does not match logits {logits.shape}"
        )
    if idx.size and (idx.min() < 0 or idx.max() >= k):
        raise IndexError(f"cross_entropy_loss: target index out of range [0, {k})")
    flat = logits.data.reshape(-1, k)
    fidx = idx.reshape(-1)
    rows = np.arange(flat.shape[0])
    shifted = flat - flat.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1))
    losses = lse - shifted[rows, fidx]
    out = np.asarray(losses.mean())
    n = float(flat.shape[0])

    def vjp(g):
        p = np.exp(shifted - lse[:, None])
        p[rows, fidx] -= 1.0
        return ((float(g) / n) * p.reshape(logits.shape),)

    return record("cross-entropy", (logits,), out, vjp)


# ---------------------------------------------------------------------------
# helpers built from primitives
# ---------------------------------------------------------------------------

_NEG_ONE = Tensor(-1.0)


def neg(x: Tensor) -> Tensor:
    return mul(x, _NEG_ONE)


def maximum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise max via a + relu(b − a)."""
    return add(a, relu(add(b, neg(a))))


def amax(x: Tensor, axis: int) -> Tensor:
    """Max-reduce one axis by a pairwise tree of elementwise maxima."""
    if axis < 0:
        axis += x.ndim
    cur = x
    while cur.shape[axis] > 1:
        n = cur.shape[axis]
        half = n // 2
        key_a = tuple(slice(0, half) if i == axis else slice(None) for i in range(cur.ndim))
        key_b = tuple(slice(half, 2 * half) if i == axis else slice(None) for i in range(cur.ndim))
        m = maximum(slice_(cur, key_a), slice_(cur, key_b))
        if n % 2:
            key_r = tuple(slice(2 * half, n) if i == axis else slice(None) for i in range(cur.ndim))
            cur = concat((m, slice_(cur, key_r)), axis=axis)
        else:
            cur = m
    return cur


def abs_(x: Tensor) -> Tensor:
    return add(relu(x), relu(neg(x)))


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return add(matmul(x, w), b)


_CUMSUM_MATS: dict = {}


def cumsum_steps(x: Tensor) -> Tensor:
    """Cumulative sum over the second-to-last axis (the time axis of offsets)."""
    t = x.shape[-2]
    lower = _CUMSUM_MATS.get(t)
    if lower is None:
        lower = Tensor(np.tril(np.ones((t, t))))
        _CUMSUM_MATS[t] = lower
    return matmul(lower, x)


def scalar(x: Tensor) -> Tensor:
    """Reduce a size-1 tensor to shape ()."""
    if x.size != 1:
        raise ShapeError(f"scalar: tensor has {x.size} elements")
    return reshape(x, ())

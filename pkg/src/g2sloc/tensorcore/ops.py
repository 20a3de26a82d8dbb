"""Differentiable primitives: elementwise math, linear algebra, conv,
pooling, normalization, softmax and multi-head attention.

Every op takes :class:`~g2sloc.tensorcore.tape.Tensor` inputs (scalars and
plain arrays are treated as constants), computes the float64 forward value
eagerly and records an analytic backward closure on the owning tape.  All
gradients here are checked against central finite differences in the test
suite, so keep closures exact rather than approximate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..errors import ConfigError, ShapeError
from .tape import Parameter, Tensor


def _tape_of(*values):
    for v in values:
        if isinstance(v, Tensor):
            return v.tape
    raise TypeError("at least one operand must be a Tensor")


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _binary(a, b, forward, grad_a, grad_b):
    tape = _tape_of(a, b)
    a_data = a.data if isinstance(a, Tensor) else np.asarray(a, dtype=np.float64)
    b_data = b.data if isinstance(b, Tensor) else np.asarray(b, dtype=np.float64)
    out = forward(a_data, b_data)

    def backward(grad_out, accumulate):
        if isinstance(a, Tensor):
            accumulate(a, _unbroadcast(grad_a(grad_out, a_data, b_data), a_data.shape))
        if isinstance(b, Tensor):
            accumulate(b, _unbroadcast(grad_b(grad_out, a_data, b_data), b_data.shape))

    inputs = tuple(t for t in (a, b) if isinstance(t, Tensor))
    return tape.record(out, inputs, backward)


def add(a, b):
    return _binary(a, b, lambda x, y: x + y, lambda g, x, y: g, lambda g, x, y: g)


def sub(a, b):
    return _binary(a, b, lambda x, y: x - y, lambda g, x, y: g, lambda g, x, y: -g)


def mul(a, b):
    return _binary(a, b, lambda x, y: x * y, lambda g, x, y: g * y, lambda g, x, y: g * x)


def div(a, b):
    return _binary(
        a,
        b,
        lambda x, y: x / y,
        lambda g, x, y: g / y,
        lambda g, x, y: -g * x / (y * y),
    )


def neg(a: Tensor):
    return a.tape.record(-a.data, (a,), lambda g, acc: acc(a, -g))


def _unary(a: Tensor, out_data, grad_fn):
    def backward(grad_out, accumulate):
        accumulate(a, grad_fn(grad_out))

    return a.tape.record(out_data, (a,), backward)


def exp(a: Tensor):
    out = np.exp(a.data)
    return _unary(a, out, lambda g: g * out)


def log(a: Tensor):
    return _unary(a, np.log(a.data), lambda g: g / a.data)


def tanh(a: Tensor):
    out = np.tanh(a.data)
    return _unary(a, out, lambda g: g * (1.0 - out * out))


def sigmoid(a: Tensor):
    out = 1.0 / (1.0 + np.exp(-np.abs(a.data)))
    out = np.where(a.data >= 0, out, 1.0 - out)
    return _unary(a, out, lambda g: g * out * (1.0 - out))


def silu(a: Tensor):
    """x * sigmoid(x); smooth activation used throughout the encoders."""
    s = 1.0 / (1.0 + np.exp(-np.abs(a.data)))
    s = np.where(a.data >= 0, s, 1.0 - s)
    out = a.data * s
    return _unary(a, out, lambda g: g * (s + a.data * s * (1.0 - s)))


def softplus(a: Tensor):
    """log(1 + e^x), computed in the overflow-safe split form."""
    out = np.logaddexp(0.0, a.data)
    s = 1.0 / (1.0 + np.exp(-np.abs(a.data)))
    s = np.where(a.data >= 0, s, 1.0 - s)
    return _unary(a, out, lambda g: g * s)


def absolute(a: Tensor):
    sign = np.sign(a.data)
    return _unary(a, np.abs(a.data), lambda g: g * sign)


def clamp(a: Tensor, lo: float, hi: float):
    """Clip values to [lo, hi]; gradient is zero outside the interval."""
    inside = (a.data > lo) & (a.data < hi)
    return _unary(a, np.clip(a.data, lo, hi), lambda g: g * inside)


def reshape(a: Tensor, shape):
    shape = tuple(shape)
    return _unary(a, a.data.reshape(shape), lambda g: g.reshape(a.data.shape))


def transpose(a: Tensor, axes):
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _unary(a, a.data.transpose(axes), lambda g: g.transpose(inverse))


def sum_all(a: Tensor):
    return _unary(a, np.sum(a.data), lambda g: np.broadcast_to(g, a.data.shape).copy())


def mean_all(a: Tensor):
    n = a.data.size
    return _unary(a, np.mean(a.data), lambda g: np.broadcast_to(g / n, a.data.shape).copy())


def sum_axis(a: Tensor, axis: int):
    out = np.sum(a.data, axis=axis)

    def backward(grad_out, accumulate):
        accumulate(a, np.broadcast_to(np.expand_dims(grad_out, axis), a.data.shape).copy())

    return a.tape.record(out, (a,), backward)


def concat(parts, axis: int = 0):
    tape = _tape_of(*parts)
    datas = [p.data for p in parts]
    out = np.concatenate(datas, axis=axis)
    sizes = [d.shape[axis] for d in datas]
    offsets = np.cumsum([0] + sizes)

    def backward(grad_out, accumulate):
        for part, start, stop in zip(parts, offsets[:-1], offsets[1:]):
            index = [slice(None)] * grad_out.ndim
            index[axis] = slice(start, stop)
            accumulate(part, grad_out[tuple(index)])

    return tape.record(out, tuple(parts), backward)


def matmul(a: Tensor, b: Tensor):
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError("matmul operands", a.data.shape, (b.data.shape,))
    out = a.data @ b.data

    def backward(grad_out, accumulate):
        accumulate(a, grad_out @ b.data.T)
        accumulate(b, a.data.T @ grad_out)

    return _tape_of(a, b).record(out, (a, b), backward)


def bmm(a: Tensor, b: Tensor):
    """Batched matmul: (B, n, k) @ (B, k, m) -> (B, n, m)."""
    if a.data.ndim != 3 or b.data.ndim != 3 or a.data.shape[2] != b.data.shape[1]:
        raise ShapeError("bmm operands", a.data.shape, b.data.shape)
    out = a.data @ b.data

    def backward(grad_out, accumulate):
        accumulate(a, grad_out @ b.data.transpose(0, 2, 1))
        accumulate(b, a.data.transpose(0, 2, 1) @ grad_out)

    return _tape_of(a, b).record(out, (a, b), backward)


def crop2d(a: Tensor, r0: int, c0: int, height: int, width: int):
    """Spatial crop of a (C, H, W) tensor; gradient zero-pads back."""
    out = a.data[:, r0 : r0 + height, c0 : c0 + width]
    if out.shape[1:] != (height, width):
        raise ShapeError("crop outside tensor", a.data.shape, (r0 + height, c0 + width))

    def backward(grad_out, accumulate):
        grad = np.zeros_like(a.data)
        grad[:, r0 : r0 + height, c0 : c0 + width] = grad_out
        accumulate(a, grad)

    return a.tape.record(out.copy(), (a,), backward)


def roll2d(a: Tensor, dy: int, dx: int):
    """Cyclic shift of the first two axes (tokens laid out as H x W x D)."""
    out = np.roll(a.data, (dy, dx), axis=(0, 1))

    def backward(grad_out, accumulate):
        accumulate(a, np.roll(grad_out, (-dy, -dx), axis=(0, 1)))

    return a.tape.record(out, (a,), backward)


def take_scalar(a: Tensor, index: int):
    """Extract one element of a 1-D tensor as a scalar tensor."""
    out = np.asarray(a.data.reshape(-1)[index])

    def backward(grad_out, accumulate):
        grad = np.zeros_like(a.data)
        grad.reshape(-1)[index] = grad_out
        accumulate(a, grad)

    return a.tape.record(out, (a,), backward)


def mean_rows(a: Tensor):
    """Mean over the first axis of an (N, D) tensor -> (D,)."""
    n = a.data.shape[0]
    out = a.data.mean(axis=0)

    def backward(grad_out, accumulate):
        accumulate(a, np.broadcast_to(grad_out / n, a.data.shape).copy())

    return a.tape.record(out, (a,), backward)


def gather_rows(a: Tensor, index: np.ndarray):
    """Index rows of an (N, D) tensor; gradient scatter-adds duplicates."""
    index = np.asarray(index)
    out = a.data[index]

    def backward(grad_out, accumulate):
        grad = np.zeros_like(a.data)
        np.add.at(grad, index.reshape(-1), grad_out.reshape(-1, a.data.shape[-1]))
        accumulate(a, grad)

    return a.tape.record(out, (a,), backward)


def linear(x: Tensor, weight, bias=None):
    """x @ W (+ b) over the last axis; leading axes are batch-like."""
    w = weight if isinstance(weight, Tensor) else x.tape.watch(weight)
    b = None
    if bias is not None:
        b = bias if isinstance(bias, Tensor) else x.tape.watch(bias)
    if x.data.shape[-1] != w.data.shape[0]:
        raise ShapeError("linear input vs weight", x.data.shape, w.data.shape)
    flat_x = x.data.reshape(-1, w.data.shape[0]) if x.data.ndim != 2 else x.data
    out = flat_x @ w.data
    if b is not None:
        out += b.data
    if x.data.ndim != 2:
        out = out.reshape(x.data.shape[:-1] + (w.data.shape[1],))

    def backward(grad_out, accumulate):
        flat_g = grad_out.reshape(-1, w.data.shape[1]) if grad_out.ndim != 2 else grad_out
        dx = flat_g @ w.data.T
        accumulate(x, dx if x.data.ndim == 2 else dx.reshape(x.data.shape))
        accumulate(w, flat_x.T @ flat_g)
        if b is not None:
            accumulate(b, flat_g.sum(axis=0))

    inputs = (x, w) if b is None else (x, w, b)
    return x.tape.record(out, inputs, backward)


def layer_norm(x: Tensor, eps: float = 1e-6):
    """Normalize the last axis to zero mean / unit variance (no affine).

    A constant vector normalizes to exactly zero.
    """
    mean = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    out = centered * inv_std
    n = x.data.shape[-1]

    def backward(grad_out, accumulate):
        g_centered = grad_out * inv_std
        g_mean = g_centered.mean(axis=-1, keepdims=True)
        g_var = (grad_out * centered).sum(axis=-1, keepdims=True) * (-0.5) * inv_std**3
        accumulate(x, g_centered - g_mean + g_var * 2.0 * centered / n)

    return x.tape.record(out, (x,), backward)


def _softmax_forward(scores: np.ndarray, allow: np.ndarray | None):
    if allow is None:
        shifted = scores - scores.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
        return e / e.sum(axis=-1, keepdims=True)
    any_allowed = allow.any(axis=-1, keepdims=True)
    masked = np.where(allow, scores, -np.inf)
    peak = np.where(any_allowed, masked.max(axis=-1, keepdims=True), 0.0)
    e = np.where(allow, np.exp(masked - peak), 0.0)
    total = e.sum(axis=-1, keepdims=True)
    return np.where(any_allowed, e / np.where(any_allowed, total, 1.0), 0.0)


def softmax(x: Tensor, axis: int = -1):
    """Softmax along an axis; rows sum to one."""
    moved = np.moveaxis(x.data, axis, -1)
    probs_last = _softmax_forward(moved, None)
    probs = np.moveaxis(probs_last, -1, axis)

    def backward(grad_out, accumulate):
        g = np.moveaxis(grad_out, axis, -1)
        dot = (g * probs_last).sum(axis=-1, keepdims=True)
        accumulate(x, np.moveaxis(probs_last * (g - dot), -1, axis))

    return x.tape.record(probs, (x,), backward)


def masked_softmax(scores: Tensor, allow: np.ndarray):
    """Softmax over the last axis restricted to ``allow`` == True entries.

    Rows with no allowed entry produce an all-zero distribution (and zero
    gradient), which is how attention over an empty candidate pool is
    defined downstream.
    """
    allow = np.broadcast_to(np.asarray(allow, dtype=bool), scores.data.shape)
    probs = _softmax_forward(scores.data, allow)

    def backward(grad_out, accumulate):
        dot = (grad_out * probs).sum(axis=-1, keepdims=True)
        accumulate(scores, probs * (grad_out - dot))

    return scores.tape.record(probs, (scores,), backward)


def _im2col(x_pad: np.ndarray, kh: int, kw: int, stride: int, h_out: int, w_out: int):
    c = x_pad.shape[0]
    s0, s1, s2 = x_pad.strides
    shape = (c, kh, kw, h_out, w_out)
    strides = (s0, s1, s2, s1 * stride, s2 * stride)
    cols = np.lib.stride_tricks.as_strided(x_pad, shape=shape, strides=strides)
    return cols.reshape(c * kh * kw, h_out * w_out)


def conv2d(x: Tensor, weight, bias=None, stride: int = 1, pad: int = 0):
    """2-D convolution on a (C, H, W) tensor with an (O, C, kh, kw) kernel."""
    w = weight if isinstance(weight, Tensor) else x.tape.watch(weight)
    b = None
    if bias is not None:
        b = bias if isinstance(bias, Tensor) else x.tape.watch(bias)
    c_in, height, width = x.data.shape
    c_out, c_in_k, kh, kw = w.data.shape
    if c_in != c_in_k:
        raise ShapeError("conv2d input channels vs kernel", x.data.shape, w.data.shape)
    h_out = (height + 2 * pad - kh) // stride + 1
    w_out = (width + 2 * pad - kw) // stride + 1
    if h_out <= 0 or w_out <= 0:
        raise ShapeError("conv2d output", (c_out, h_out, w_out), ("C", ">0", ">0"))

    x_pad = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad))) if pad else x.data
    cols = _im2col(x_pad, kh, kw, stride, h_out, w_out)
    w_mat = w.data.reshape(c_out, -1)
    out = (w_mat @ cols).reshape(c_out, h_out, w_out)
    if b is not None:
        out = out + b.data[:, None, None]

    def backward(grad_out, accumulate):
        g_mat = grad_out.reshape(c_out, -1)
        accumulate(w, (g_mat @ cols.T).reshape(w.data.shape))
        if b is not None:
            accumulate(b, grad_out.sum(axis=(1, 2)))
        g_cols = (w_mat.T @ g_mat).reshape(c_in, kh, kw, h_out, w_out)
        g_pad = np.zeros_like(x_pad)
        for i in range(kh):
            for j in range(kw):
                g_pad[:, i : i + stride * h_out : stride, j : j + stride * w_out : stride] += g_cols[
                    :, i, j
                ]
        g_x = g_pad[:, pad : pad + height, pad : pad + width] if pad else g_pad
        accumulate(x, g_x)

    inputs = (x, w) if b is None else (x, w, b)
    return x.tape.record(out, inputs, backward)


def upsample2x(x: Tensor):
    """Nearest-neighbour 2x upsampling of a (C, H, W) tensor."""
    out = x.data.repeat(2, axis=1).repeat(2, axis=2)

    def backward(grad_out, accumulate):
        c, h2, w2 = grad_out.shape
        accumulate(x, grad_out.reshape(c, h2 // 2, 2, w2 // 2, 2).sum(axis=(2, 4)))

    return x.tape.record(out, (x,), backward)


def global_avg_pool(x: Tensor):
    """Spatial mean of a (C, H, W) tensor -> (C,) vector."""
    _, h, w = x.data.shape
    out = x.data.mean(axis=(1, 2))

    def backward(grad_out, accumulate):
        accumulate(x, np.broadcast_to(grad_out[:, None, None] / (h * w), x.data.shape).copy())

    return x.tape.record(out, (x,), backward)


@dataclass
class AttentionParams:
    """Projection weights for one multi-head attention block."""

    w_q: Parameter
    b_q: Parameter
    w_k: Parameter
    b_k: Parameter
    w_v: Parameter
    b_v: Parameter
    w_o: Parameter
    b_o: Parameter
    heads: int

    def __post_init__(self):
        dim = self.w_q.data.shape[0]
        if dim % self.heads:
            raise ConfigError(f"model dim {dim} not divisible by {self.heads} heads")

    @property
    def dim(self) -> int:
        return self.w_q.data.shape[0]

    def parameters(self):
        return [self.w_q, self.b_q, self.w_k, self.b_k, self.w_v, self.b_v, self.w_o, self.b_o]


def split_heads(x: Tensor, heads: int):
    """(n, D) -> (heads, n, D/heads)."""
    n, dim = x.data.shape
    return transpose(reshape(x, (n, heads, dim // heads)), (1, 0, 2))


def merge_heads(x: Tensor):
    """(heads, n, d) -> (n, heads*d)."""
    heads, n, d = x.data.shape
    return reshape(transpose(x, (1, 0, 2)), (n, heads * d))


def mha(query_tokens: Tensor, key_tokens: Tensor, value_tokens: Tensor,
        params: AttentionParams, mask: np.ndarray | None = None):
    """Multi-head scaled dot-product attention.

    ``mask`` is an optional (n_query, n_key) boolean array marking allowed
    pairs; queries with an empty allowed set yield a zero output row.
    Scores are scaled by 1/sqrt(d_head).
    """
    if key_tokens.data.shape[0] != value_tokens.data.shape[0]:
        raise ShapeError("key vs value token counts", key_tokens.data.shape, value_tokens.data.shape)
    if mask is not None:
        expected = (query_tokens.data.shape[0], key_tokens.data.shape[0])
        if tuple(np.asarray(mask).shape) != expected:
            raise ShapeError("attention mask", np.asarray(mask).shape, expected)

    d_head = params.dim // params.heads
    q = split_heads(linear(query_tokens, params.w_q, params.b_q), params.heads)
    k = split_heads(linear(key_tokens, params.w_k, params.b_k), params.heads)
    v = split_heads(linear(value_tokens, params.w_v, params.b_v), params.heads)

    scores = mul(bmm(q, transpose(k, (0, 2, 1))), 1.0 / math.sqrt(d_head))
    if mask is None:
        weights = softmax(scores, axis=-1)
    else:
        weights = masked_softmax(scores, np.broadcast_to(mask, scores.data.shape))
    context = merge_heads(bmm(weights, v))
    return linear(context, params.w_o, params.b_o)

"""Differentiable primitives on :class:`~t4t.tensor.Tensor`.

Shapes are unbatched: images are ``[C, H, W]``, token sequences ``[N, C]``.
Broadcasting is limited to python scalars and explicit bias adds.
"""

from __future__ import annotations

import math
from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, make_result, record_macs


class DimensionError(ValueError):
    """Operand shapes are incompatible with the requested op."""


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


# -- elementwise ------------------------------------------------------------

def add(a, b) -> Tensor:
    a = _t(a)
    if not isinstance(b, Tensor):
        c = float(b)
        return make_result(a.data + a.data.dtype.type(c), [a], "add_scalar", lambda g: (g,))
    _same_shape(a, b, "add")
    return make_result(a.data + b.data, [a, b], "add", lambda g: (g, g))


def sub(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        return add(a, -float(b))
    return add(a, neg(b))


def neg(a: Tensor) -> Tensor:
    return make_result(-a.data, [a], "neg", lambda g: (-g,))


def mul(a, b) -> Tensor:
    a = _t(a)
    if not isinstance(b, Tensor):
        c = a.data.dtype.type(float(b))
        return make_result(a.data * c, [a], "scale", lambda g: (g * c,))
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return make_result(ad * bd, [a, b], "mul", lambda g: (g * bd, g * ad))


def add_bias(x: Tensor, bias: Tensor, axis: int = -1) -> Tensor:
    """Add a per-channel vector along ``axis`` (last axis for tokens, 0 for maps)."""
    axis = axis % x.ndim
    if bias.ndim != 1 or bias.shape[0] != x.shape[axis]:
        raise DimensionError(f"add_bias: bias {bias.shape} does not match axis {axis} of {x.shape}")
    shape = [1] * x.ndim
    shape[axis] = -1
    other = tuple(i for i in range(x.ndim) if i != axis)

    def rule(g):
        return g, g.sum(axis=other)

    return make_result(x.data + bias.data.reshape(shape), [x, bias], "add_bias", rule)


def gelu(x: Tensor) -> Tensor:
    """Tanh-approximated GELU."""
    xd = x.data
    k = xd.dtype.type(math.sqrt(2.0 / math.pi))
    c = xd.dtype.type(0.044715)
    inner = k * (xd + c * xd ** 3)
    th = np.tanh(inner)
    out = 0.5 * xd * (1.0 + th)

    def rule(g):
        d = 0.5 * (1.0 + th) + 0.5 * xd * (1.0 - th * th) * k * (1.0 + 3.0 * c * xd * xd)
        return (g * d,)

    return make_result(out.astype(xd.dtype, copy=False), [x], "gelu", rule)


# -- shape ------------------------------------------------------------------

def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    out = x.data.reshape(tuple(shape))
    return make_result(out, [x], "reshape", lambda g: (g.reshape(src),))


def transpose(x: Tensor, perm: Optional[Sequence[int]] = None) -> Tensor:
    if perm is None:
        perm = tuple(reversed(range(x.ndim)))
    perm = tuple(perm)
    inv = tuple(np.argsort(perm))
    out = np.ascontiguousarray(x.data.transpose(perm))
    return make_result(out, [x], "transpose", lambda g: (g.transpose(inv),))


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not xs:
        raise DimensionError("concat: empty input list")
    axis = axis % xs[0].ndim
    for t in xs[1:]:
        if t.ndim != xs[0].ndim or any(
            t.shape[i] != xs[0].shape[i] for i in range(t.ndim) if i != axis
        ):
            raise DimensionError(f"concat: shapes {xs[0].shape} and {t.shape} disagree off axis {axis}")
    sizes = [t.shape[axis] for t in xs]
    splits = np.cumsum(sizes)[:-1]

    def rule(g):
        return tuple(np.split(g, splits, axis=axis))

    return make_result(np.concatenate([t.data for t in xs], axis=axis), list(xs), "concat", rule)


def tokens_to_map(x: Tensor, h: int, w: int) -> Tensor:
    """``[N, C]`` tokens in row-major spatial order to a ``[C, h, w]`` map."""
    if x.ndim != 2 or x.shape[0] != h * w:
        raise DimensionError(f"tokens_to_map: {x.shape} cannot form a {h}x{w} grid")
    return reshape(transpose(x, (1, 0)), (x.shape[1], h, w))


def map_to_tokens(x: Tensor) -> Tensor:
    c, h, w = x.shape
    return transpose(reshape(x, (c, h * w)), (1, 0))


# -- reductions ---------------------------------------------------------------

def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = x.shape
    dtype = x.dtype
    return make_result(np.asarray(x.data.sum(), dtype=dtype), [x], "sum",
                       lambda g: (np.full(shape, g, dtype=dtype),))


def mean(x: Tensor) -> Tensor:
    n = x.size
    shape = x.shape
    dtype = x.dtype
    return make_result(np.asarray(x.data.mean(), dtype=dtype), [x], "mean",
                       lambda g: (np.full(shape, g / n, dtype=dtype),))


# -- linear algebra -----------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` for 2-D operands, or stacks with identical leading dims."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    m, k = a.shape[-2:]
    n = b.shape[-1]
    record_macs(int(np.prod(a.shape[:-2], dtype=np.int64)) * m * k * n)
    ad, bd = a.data, b.data

    def rule(g):
        return g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g

    return make_result(ad @ bd, [a, b], "matmul", rule)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Tokens ``[N, in]`` times ``weight [in, out]`` plus optional bias."""
    y = matmul(x, weight)
    return add_bias(y, bias, axis=-1) if bias is not None else y


def _out_size(n: int, k: int, stride: int, pad: int, op: str) -> int:
    if stride < 1:
        raise DimensionError(f"{op}: stride must be >= 1, got {stride}")
    if n + 2 * pad < k:
        raise DimensionError(f"{op}: kernel {k} larger than padded input {n + 2 * pad}")
    return (n + 2 * pad - k) // stride + 1


def _pad(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (pad, pad), (pad, pad)))


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """View of shape ``[C, ho, wo, kh, kw]`` over the padded input."""
    v = sliding_window_view(xp, (kh, kw), axis=(1, 2))
    return v[:, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1, pad: int = 0) -> Tensor:
    """Zero-padded 2-D cross-correlation of ``x [Cin,H,W]`` with ``weight [Cout,Cin,kh,kw]``."""
    if x.ndim != 3 or weight.ndim != 4 or weight.shape[1] != x.shape[0]:
        raise DimensionError(f"conv2d: input {x.shape} incompatible with weight {weight.shape}")
    cin, h, w = x.shape
    cout, _, kh, kw = weight.shape
    ho = _out_size(h, kh, stride, pad, "conv2d")
    wo = _out_size(w, kw, stride, pad, "conv2d")
    record_macs(cout * cin * kh * kw * ho * wo)
    xp = _pad(x.data, pad)
    cols = _windows(xp, kh, kw, stride, ho, wo)
    wd = weight.data
    out = np.tensordot(wd, cols, axes=([1, 2, 3], [0, 3, 4]))

    def rule(g):
        dw = np.tensordot(g, cols, axes=([1, 2], [1, 2]))
        dcols = np.tensordot(wd, g, axes=([0], [0]))  # Cin, kh, kw, ho, wo
        dxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                dxp[:, i : i + (ho - 1) * stride + 1 : stride, j : j + (wo - 1) * stride + 1 : stride] += dcols[:, i, j]
        dx = dxp[:, pad : pad + h, pad : pad + w] if pad else dxp
        return dx, dw

    y = make_result(out, [x, weight], "conv2d", rule)
    return add_bias(y, bias, axis=0) if bias is not None else y


def depthwise_conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1, pad: int = 0) -> Tensor:
    """Per-channel convolution with ``weight [C,1,kh,kw]``; no cross-channel mixing."""
    if x.ndim != 3 or weight.ndim != 4 or weight.shape[1] != 1 or weight.shape[0] != x.shape[0]:
        raise DimensionError(f"depthwise_conv2d: input {x.shape} incompatible with weight {weight.shape}")
    c, h, w = x.shape
    _, _, kh, kw = weight.shape
    ho = _out_size(h, kh, stride, pad, "depthwise_conv2d")
    wo = _out_size(w, kw, stride, pad, "depthwise_conv2d")
    record_macs(c * kh * kw * ho * wo)
    xp = _pad(x.data, pad)
    wd = weight.data[:, 0]
    out = np.zeros((c, ho, wo), dtype=np.result_type(x.data, wd))

    def patch(arr, i, j):
        return arr[:, i : i + (ho - 1) * stride + 1 : stride, j : j + (wo - 1) * stride + 1 : stride]

    for i in range(kh):
        for j in range(kw):
            out += wd[:, i, j, None, None] * patch(xp, i, j)

    def rule(g):
        dw = np.empty_like(wd)
        dxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                dw[:, i, j] = np.einsum("chw,chw->c", g, patch(xp, i, j))
                patch(dxp, i, j)[...] += wd[:, i, j, None, None] * g
        dx = dxp[:, pad : pad + h, pad : pad + w] if pad else dxp
        return dx, dw[:, None]

    y = make_result(out, [x, weight], "depthwise_conv2d", rule)
    return add_bias(y, bias, axis=0) if bias is not None else y


# -- normalisation and probabilities -------------------------------------------

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise IndexError(f"softmax: axis {axis} out of range for shape {x.shape}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def rule(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return make_result(y, [x], "softmax", rule)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalise over the last axis, then scale and shift per channel."""
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"layer_norm: gamma {gamma.shape} / beta {beta.shape} vs channels {c}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + xd.dtype.type(eps))
    xhat = xc * rstd
    gd = gamma.data
    out = xhat * gd + beta.data
    lead = tuple(range(xd.ndim - 1))

    def rule(g):
        dxhat = g * gd
        dx = rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                     - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return make_result(out, [x, gamma, beta], "layer_norm", rule)


# -- resampling ----------------------------------------------------------------

def bilinear_weights(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    """``[n_out, n_in]`` interpolation matrix, half-pixel centres (align_corners=False)."""
    m = np.zeros((n_out, n_in), dtype=dtype)
    scale = n_in / n_out
    for o in range(n_out):
        src = max((o + 0.5) * scale - 0.5, 0.0)
        i0 = min(int(math.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        frac = src - i0
        m[o, i0] += 1.0 - frac
        m[o, i1] += frac
    return m


def bilinear_resize(x: Tensor, h2: int, w2: int) -> Tensor:
    if h2 < 1 or w2 < 1:
        raise DimensionError(f"bilinear_resize: target {h2}x{w2} must be positive")
    if x.ndim != 3:
        raise DimensionError(f"bilinear_resize: expected [C,H,W], got {x.shape}")
    _, h, w = x.shape
    if (h, w) == (h2, w2):
        return reshape(x, x.shape)
    ry = bilinear_weights(h, h2, x.dtype)
    rx = bilinear_weights(w, w2, x.dtype)
    out = np.matmul(np.matmul(ry, x.data), rx.T)

    def rule(g):
        return (np.matmul(np.matmul(ry.T, g), rx),)

    return make_result(out, [x], "bilinear_resize", rule)


# -- loss ------------------------------------------------------------------------

def cross_entropy(logits: Tensor, target, ignore_index: int = 255) -> Tensor:
    """Mean pixel-wise negative log-likelihood of ``target`` under ``softmax(logits)``."""
    target = np.asarray(target)
    if logits.ndim != 3 or target.shape != logits.shape[1:]:
        raise DimensionError(f"cross_entropy: logits {logits.shape} vs target {target.shape}")
    k = logits.shape[0]
    valid = target != ignore_index
    bad = valid & ((target < 0) | (target >= k))
    if bad.any():
        raise ValueError(f"cross_entropy: class index out of range [0,{k}): {np.unique(target[bad])}")
    ld = logits.data
    z = ld - ld.max(axis=0, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=0, keepdims=True))
    logp = z - lse
    n = int(valid.sum())
    tgt = np.where(valid, target, 0).astype(np.int64)
    picked = np.take_along_axis(logp, tgt[None], axis=0)[0]
    loss = -(picked * valid).sum() / max(n, 1)

    def rule(g):
        p = np.exp(logp)
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, tgt[None], 1.0, axis=0)
        d = (p - onehot) * valid[None] * (g / max(n, 1))
        return (d.astype(ld.dtype, copy=False),)

    return make_result(np.asarray(loss, dtype=ld.dtype), [logits], "cross_entropy", rule)

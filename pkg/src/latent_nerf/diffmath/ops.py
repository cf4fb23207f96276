"""Differentiable layer operations used by the field and the autoencoder.

Image tensors are channel-first (``C x H x W`` or batched ``N x C x H x W``)
unless an op says otherwise; ``conv2d_nhwc`` and the ``channels_last`` paths
of ``instance_norm`` and ``bilinear_resize`` take ``N x H x W x C``. Convolution is cross-correlation (no kernel flip).
Bilinear resizing follows the align-corners-false (half-pixel) convention:
output pixel ``i`` samples the input at ``(i + 0.5) / factor - 0.5``,
clamped to the valid range.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import DimensionError
from .tensor import Tensor, as_tensor


def matmul(a, b):
    """Matrix product of 2-D tensors (or a batch of rows against a matrix)."""
    a = as_tensor(a)
    b = as_tensor(b, dtype=a.dtype)
    if a.ndim < 1 or b.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    x, w = a.data, b.data

    def bw(g):
        ga = g @ w.T if a.requires_grad else None
        gb = None
        if b.requires_grad:
            gb = x.reshape(-1, x.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return ga, gb

    return Tensor._make(x @ w, (a, b), bw)


def linear(x, weight, bias=None):
    """``x @ weight + bias`` with ``weight`` stored as ``in x out``."""
    if bias is None:
        return matmul(x, weight)
    x = as_tensor(x)
    weight = as_tensor(weight, dtype=x.dtype)
    bias = as_tensor(bias, dtype=x.dtype)
    if x.ndim < 1 or weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise DimensionError(f"linear shape mismatch: {x.shape} @ {weight.shape}")
    if bias.shape != (weight.shape[1],):
        raise DimensionError(f"bias shape {bias.shape} does not match {weight.shape[1]} outputs")
    xd, wd = x.data, weight.data
    out = xd @ wd
    out += bias.data

    def bw(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = g @ wd.T if x.requires_grad else None
        gw = xd.reshape(-1, xd.shape[-1]).T @ g2 if weight.requires_grad else None
        gb = g2.sum(axis=0) if bias.requires_grad else None
        return gx, gw, gb

    return Tensor._make(out, (x, weight, bias), bw)


def relu(x):
    out = np.maximum(x.data, 0)
    return Tensor._make(out, (x,), lambda g: (g * (out > 0),))


def elu(x):
    """ELU with alpha = 1: ``x`` for positive inputs, ``exp(x) - 1`` otherwise."""
    a = x.data
    neg = np.expm1(np.minimum(a, 0))
    out = np.maximum(a, 0) + neg
    # derivative is 1 for x > 0 and exp(x) = neg + 1 otherwise; neg is 0 for x > 0
    return Tensor._make(out, (x,), lambda g: (g * (neg + 1),))


def _sigmoid_array(a):
    e = np.exp(-np.abs(a))
    r = 1 / (1 + e)
    return np.where(a >= 0, r, e * r)


def sigmoid(x):
    out = _sigmoid_array(x.data)
    return Tensor._make(out, (x,), lambda g: (g * out * (1 - out),))


def softplus(x):
    """Numerically stable ``log(1 + exp(x))``."""
    a = x.data
    out = np.logaddexp(0, a).astype(a.dtype, copy=False)
    return Tensor._make(out, (x,), lambda g: (g * _sigmoid_array(a),))


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor._make(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw)


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return Tensor._make(np.stack([t.data for t in tensors], axis=axis), tensors, bw)


def mse(pred, target):
    """Mean squared error; ``target`` is treated as a constant unless it is a tracked tensor."""
    pred = as_tensor(pred)
    target = as_tensor(target, dtype=pred.dtype)
    diff = pred - target
    return (diff * diff).mean()


def _as_batch(x):
    if x.ndim == 3:
        return x.reshape(1, *x.shape), True
    if x.ndim == 4:
        return x, False
    raise DimensionError(f"expected C x H x W or N x C x H x W, got {x.shape}")


def conv2d(x, weight, bias=None, stride=1, pad=0):
    """2-D cross-correlation on channel-first input.

    Args:
        x: ``C_in x H x W`` or ``N x C_in x H x W`` input.
        weight: ``C_out x C_in x k x k`` kernel.
        bias: optional ``C_out`` bias.
        stride: output stride.
        pad: zero padding applied on every side.

    Returns:
        ``C_out x H' x W'`` (or batched), ``H' = (H + 2 pad - k) / stride + 1``.
    """
    x = as_tensor(x)
    weight = as_tensor(weight, dtype=x.dtype)
    if bias is not None:
        bias = as_tensor(bias, dtype=x.dtype)
    if x.ndim == 3:
        return conv2d(x.reshape(1, *x.shape), weight, bias, stride, pad).reshape(
            weight.shape[0], *_out_size(x.shape[1:], weight.shape[-1], stride, pad))
    if x.ndim != 4:
        raise DimensionError(f"expected C x H x W or N x C x H x W, got {x.shape}")
    if weight.shape[1] != x.shape[1]:
        raise DimensionError(f"conv2d weight {weight.shape} incompatible with input {x.shape}")
    _out_size(x.shape[2:], weight.shape[-1], stride, pad)
    if stride == 1:
        y = conv2d_nhwc(x.transpose(0, 2, 3, 1), weight, bias, pad)
        return y.transpose(0, 3, 1, 2)
    return _conv2d_im2col(x, weight, bias, stride, pad)


def _out_size(hw, k, stride, pad):
    h, w = hw
    if (h + 2 * pad - k) % stride or (w + 2 * pad - k) % stride:
        raise DimensionError(
            f"conv2d output size not integral for H={h}, W={w}, k={k}, stride={stride}, pad={pad}"
        )
    h_out = (h + 2 * pad - k) // stride + 1
    w_out = (w + 2 * pad - k) // stride + 1
    if h_out < 1 or w_out < 1:
        raise DimensionError("conv2d kernel larger than padded input")
    return h_out, w_out


def conv2d_nhwc(x, weight, bias=None, pad=0):
    """Stride-1 cross-correlation on channel-last ``N x H x W x C_in`` input.

    Each kernel tap is one GEMM over a contiguous shifted view of the padded
    input flattened to ``(N * Hp * Wp) x C_in``; outputs that straddle a row
    or image boundary are computed and discarded.
    """
    x = as_tensor(x)
    weight = as_tensor(weight, dtype=x.dtype)
    if bias is not None:
        bias = as_tensor(bias, dtype=x.dtype)
    n, h, w, c_in = x.shape
    c_out, c_w, k, k2 = weight.shape
    if c_w != c_in or k != k2:
        raise DimensionError(f"conv2d weight {weight.shape} incompatible with input {x.shape}")
    h_out, w_out = _out_size((h, w), k, 1, pad)
    dtype = x.dtype
    wt = np.ascontiguousarray(weight.data.transpose(2, 3, 1, 0))  # k, k, C_in, C_out

    if k == 1 and pad == 0:
        xf = x.data.reshape(-1, c_in)
        out = xf @ wt[0, 0]
        if bias is not None:
            out += bias.data
        out = out.reshape(n, h, w, c_out)

        def bw1(g):
            gf = g.reshape(-1, c_out)
            gx = (gf @ wt[0, 0].T).reshape(x.shape)
            gw = (xf.T @ gf).T.reshape(c_out, c_in, 1, 1)
            gb = gf.sum(axis=0) if bias is not None else None
            return gx, gw, gb

        parents = (x, weight) if bias is None else (x, weight, bias)
        return Tensor._make(out, parents, bw1)

    hp, wp = h + 2 * pad, w + 2 * pad
    length = n * hp * wp
    tail = (k - 1) * (wp + 1)
    xf = np.zeros((length + tail, c_in), dtype=dtype)
    xf[:length].reshape(n, hp, wp, c_in)[:, pad:pad + h, pad:pad + w] = x.data
    out_full = np.zeros((length, c_out), dtype=dtype)
    for i in range(k):
        for j in range(k):
            off = i * wp + j
            out_full += xf[off:off + length] @ wt[i, j]
    out = np.ascontiguousarray(out_full.reshape(n, hp, wp, c_out)[:, :h_out, :w_out])
    if bias is not None:
        out += bias.data

    def bw(g):
        g_full = np.zeros((length, c_out), dtype=dtype)
        g_full.reshape(n, hp, wp, c_out)[:, :h_out, :w_out] = g
        gxf = np.zeros_like(xf)
        gwt = np.empty_like(wt)
        for i in range(k):
            for j in range(k):
                off = i * wp + j
                gwt[i, j] = xf[off:off + length].T @ g_full
                gxf[off:off + length] += g_full @ wt[i, j].T
        gx = np.ascontiguousarray(gxf[:length].reshape(n, hp, wp, c_in)[:, pad:pad + h, pad:pad + w])
        gw = np.ascontiguousarray(gwt.transpose(3, 2, 0, 1))
        gb = g.sum(axis=(0, 1, 2)) if bias is not None else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._make(out, parents, bw)


def _conv2d_im2col(x, weight, bias, stride, pad):
    n, c_in, h, w = x.shape
    c_out, _, k, _ = weight.shape
    h_out, w_out = _out_size((h, w), k, stride, pad)
    data = x.data
    nhwc = np.ascontiguousarray(data.transpose(0, 2, 3, 1))
    if pad:
        nhwc = np.pad(nhwc, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    win = sliding_window_view(nhwc, (k, k), axis=(1, 2))[:, ::stride, ::stride]
    cols = win.reshape(n * h_out * w_out, c_in * k * k)
    wmat = weight.data.reshape(c_out, c_in * k * k)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.reshape(n, h_out, w_out, c_out).transpose(0, 3, 1, 2))
    padded_shape = (n, h + 2 * pad, w + 2 * pad, c_in)

    def bw(g):
        gmat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, c_out)
        gw = (gmat.T @ cols).reshape(weight.shape)
        gb = gmat.sum(axis=0) if bias is not None else None
        gcols = (gmat @ wmat).reshape(n, h_out, w_out, c_in, k, k)
        gpad = np.zeros(padded_shape, dtype=data.dtype)
        hs = (h_out - 1) * stride + 1
        ws = (w_out - 1) * stride + 1
        for i in range(k):
            for j in range(k):
                gpad[:, i:i + hs:stride, j:j + ws:stride, :] += gcols[..., i, j]
        if pad:
            gpad = gpad[:, pad:-pad, pad:-pad, :]
        return np.ascontiguousarray(gpad.transpose(0, 3, 1, 2)), gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._make(out, parents, bw)


def instance_norm(x, scale=None, shift=None, eps=1e-5, channels_last=False):
    """Per-sample, per-channel normalization with population variance, then affine.

    Accepts ``[N x] C x H x W`` (or ``[N x] H x W x C`` with ``channels_last``).
    """
    x = as_tensor(x)
    if x.ndim == 3:
        return instance_norm(x.reshape(1, *x.shape), scale, shift, eps, channels_last).reshape(x.shape)
    if x.ndim != 4:
        raise DimensionError(f"instance_norm expects a 3-D or 4-D input, got {x.shape}")
    a = x.data
    axes = (1, 2) if channels_last else (2, 3)
    c = a.shape[3] if channels_last else a.shape[1]
    bshape = (1, 1, 1, c) if channels_last else (1, c, 1, 1)
    mu = a.mean(axis=axes, keepdims=True)
    xc = a - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    inv = (1.0 / np.sqrt(var + eps)).astype(a.dtype)
    xhat = xc * inv
    s = np.ones(c, dtype=a.dtype) if scale is None else as_tensor(scale).data
    b = np.zeros(c, dtype=a.dtype) if shift is None else as_tensor(shift).data
    out = xhat * s.reshape(bshape) + b.reshape(bshape)
    red = (0,) + axes

    def bw(g):
        gs = (g * xhat).sum(axis=red)
        gb = g.sum(axis=red)
        gx_hat = g * s.reshape(bshape)
        gx = inv * (
            gx_hat
            - gx_hat.mean(axis=axes, keepdims=True)
            - xhat * (gx_hat * xhat).mean(axis=axes, keepdims=True)
        )
        return gx, gs, gb

    parents = [x]
    parents.append(as_tensor(scale) if scale is not None else Tensor(s))
    parents.append(as_tensor(shift) if shift is not None else Tensor(b))
    return Tensor._make(out, parents, bw)


def _resize_matrix(n_in, factor, dtype):
    n_out = int(round(n_in * factor))
    m = np.zeros((n_out, n_in), dtype=np.float64)
    for i in range(n_out):
        src = (i + 0.5) / factor - 0.5
        src = min(max(src, 0.0), n_in - 1)
        lo = int(np.floor(src))
        hi = min(lo + 1, n_in - 1)
        frac = src - lo
        m[i, lo] += 1.0 - frac
        m[i, hi] += frac
    return m.astype(dtype)


_RESIZE_CACHE = {}


def resize_matrix(n_in, factor, dtype=np.float32):
    """1-D bilinear interpolation matrix (``n_out x n_in``) for ``factor``."""
    key = (n_in, float(factor), np.dtype(dtype).str)
    if key not in _RESIZE_CACHE:
        _RESIZE_CACHE[key] = _resize_matrix(n_in, factor, dtype)
    return _RESIZE_CACHE[key]


def bilinear_resize(x, factor, channels_last=False):
    """Bilinear halving (``factor=0.5``) or doubling (``factor=2.0``).

    Halving requires even height and width and reduces to 2x2 averaging under
    the half-pixel convention.
    """
    x = as_tensor(x)
    if factor not in (0.5, 2.0):
        raise DimensionError(f"resize factor must be 0.5 or 2.0, got {factor}")
    h, w = x.shape[-3:-1] if channels_last else x.shape[-2:]
    if factor == 0.5 and (h % 2 or w % 2):
        raise DimensionError(f"halving needs even height and width, got {h}x{w}")
    mh = resize_matrix(h, factor, x.dtype)
    mw = resize_matrix(w, factor, x.dtype)
    if not channels_last:
        out = mh @ x.data @ mw.T

        def bw(g):
            return (mh.T @ g @ mw,)

        return Tensor._make(out, (x,), bw)

    a = x.data
    lead = a.shape[:-3]
    c = a.shape[-1]
    # rows: (H' x H) @ (H x W*C); columns: (W' x W) @ (W x C) per output row
    rows = (mh @ a.reshape(-1, h, w * c)).reshape(*lead, len(mh), w, c)
    out = np.matmul(mw, rows)

    def bw_cl(g):
        g_rows = np.matmul(mw.T, g)
        ga = mh.T @ g_rows.reshape(-1, len(mh), w * c)
        return (ga.reshape(a.shape),)

    return Tensor._make(out, (x,), bw_cl)

"""Vectorized numpy implementations of the hot kernels (fallback backend)."""
import numpy as np


def composite_forward(sigma, delta):
    """Alpha-compositing weights along each ray.

    Args:
        sigma, delta: ``R x N`` densities and interval lengths.

    Returns:
        ``(weights, trans)`` where ``trans[:, k]`` is the transmittance before
        sample ``k`` and ``weights = trans * (1 - exp(-sigma * delta))``.
    """
    tau = sigma * delta
    cum = np.cumsum(tau, axis=1)
    trans = np.exp(-(cum - tau))
    weights = trans * -np.expm1(-tau)
    return weights.astype(sigma.dtype), trans.astype(sigma.dtype)


def composite_backward(grad_w, sigma, delta, weights, trans):
    tau = sigma * delta
    trans_next = trans * np.exp(-tau)
    gw = grad_w * weights
    suffix = gw.sum(axis=1, keepdims=True) - np.cumsum(gw, axis=1)
    return ((grad_w * trans_next - suffix) * delta).astype(sigma.dtype)


def distortion_forward(w, s, ds):
    """Per-ray distortion ``sum_ij w_i w_j |s_i - s_j| + 1/3 sum_i w_i^2 ds_i``.

    ``s`` must be sorted along each row.
    """
    ws = w * s
    w_lt = np.cumsum(w, axis=1) - w
    s_lt = np.cumsum(ws, axis=1) - ws
    pair = 2.0 * (w * (s * w_lt - s_lt)).sum(axis=1)
    self_term = (w * w * ds).sum(axis=1) / 3.0
    return (pair + self_term).astype(w.dtype)


def distortion_backward(grad, w, s, ds):
    ws = w * s
    cw = np.cumsum(w, axis=1)
    cws = np.cumsum(ws, axis=1)
    w_lt, s_lt = cw - w, cws - ws
    w_gt = cw[:, -1:] - cw
    s_gt = cws[:, -1:] - cws
    dist = s * w_lt - s_lt + s_gt - s * w_gt
    return (grad[:, None] * (2.0 * dist + (2.0 / 3.0) * w * ds)).astype(w.dtype)


def splat_bilinear(values, u, v, height, width):
    """Forward-splat ``values`` (``M x C``) at continuous pixel coords.

    ``u`` is the column and ``v`` the row coordinate, with pixel centres at
    integers. Returns ``(accum H x W x C, weight H x W)`` in float64.
    """
    values = np.asarray(values, dtype=np.float64)
    c = values.shape[1]
    x0 = np.floor(u).astype(np.int64)
    y0 = np.floor(v).astype(np.int64)
    fx = u - x0
    fy = v - y0
    acc = np.zeros((height * width, c))
    wsum = np.zeros(height * width)
    for dy, dx, wt in (
        (0, 0, (1 - fx) * (1 - fy)),
        (0, 1, fx * (1 - fy)),
        (1, 0, (1 - fx) * fy),
        (1, 1, fx * fy),
    ):
        xi, yi = x0 + dx, y0 + dy
        ok = (xi >= 0) & (xi < width) & (yi >= 0) & (yi < height) & (wt > 0)
        flat = yi[ok] * width + xi[ok]
        wk = wt[ok]
        wsum += np.bincount(flat, weights=wk, minlength=height * width)
        for ch in range(c):
            acc[:, ch] += np.bincount(flat, weights=wk * values[ok, ch], minlength=height * width)
    return acc.reshape(height, width, c), wsum.reshape(height, width)

# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled loop kernels; same contracts as ``_pykernels``."""
import numpy as np
cimport cython
from libc.math cimport exp, expm1, floor

ctypedef fused real:
    float
    double


def composite_forward(real[:, ::1] sigma, real[:, ::1] delta):
    cdef Py_ssize_t R = sigma.shape[0], N = sigma.shape[1], r, k
    dtype = np.float32 if real is float else np.float64
    weights = np.empty((R, N), dtype=dtype)
    trans = np.empty((R, N), dtype=dtype)
    cdef real[:, ::1] w = weights
    cdef real[:, ::1] t = trans
    cdef double T, tau
    with nogil:
        for r in range(R):
            T = 1.0
            for k in range(N):
                tau = sigma[r, k] * delta[r, k]
                t[r, k] = <real>T
                w[r, k] = <real>(T * -expm1(-tau))
                T = T * exp(-tau)
    return weights, trans


def composite_backward(real[:, ::1] grad_w, real[:, ::1] sigma, real[:, ::1] delta,
                       real[:, ::1] weights, real[:, ::1] trans):
    cdef Py_ssize_t R = sigma.shape[0], N = sigma.shape[1], r, k
    dtype = np.float32 if real is float else np.float64
    out = np.empty((R, N), dtype=dtype)
    cdef real[:, ::1] gs = out
    cdef double suffix, tau
    with nogil:
        for r in range(R):
            suffix = 0.0
            for k in range(N - 1, -1, -1):
                tau = sigma[r, k] * delta[r, k]
                gs[r, k] = <real>((grad_w[r, k] * trans[r, k] * exp(-tau) - suffix) * delta[r, k])
                suffix += grad_w[r, k] * weights[r, k]
    return out


def distortion_forward(real[:, ::1] w, real[:, ::1] s, real[:, ::1] ds):
    cdef Py_ssize_t R = w.shape[0], N = w.shape[1], r, k
    dtype = np.float32 if real is float else np.float64
    loss = np.empty(R, dtype=dtype)
    cdef real[::1] out = loss
    cdef double w_lt, s_lt, acc
    with nogil:
        for r in range(R):
            w_lt = 0.0
            s_lt = 0.0
            acc = 0.0
            for k in range(N):
                acc += 2.0 * w[r, k] * (s[r, k] * w_lt - s_lt) + w[r, k] * w[r, k] * ds[r, k] / 3.0
                w_lt += w[r, k]
                s_lt += w[r, k] * s[r, k]
            out[r] = <real>acc
    return loss


def distortion_backward(real[::1] grad, real[:, ::1] w, real[:, ::1] s, real[:, ::1] ds):
    cdef Py_ssize_t R = w.shape[0], N = w.shape[1], r, k
    dtype = np.float32 if real is float else np.float64
    out = np.empty((R, N), dtype=dtype)
    cdef real[:, ::1] gw = out
    cdef double w_tot, s_tot, w_lt, s_lt, w_gt, s_gt
    with nogil:
        for r in range(R):
            w_tot = 0.0
            s_tot = 0.0
            for k in range(N):
                w_tot += w[r, k]
                s_tot += w[r, k] * s[r, k]
            w_lt = 0.0
            s_lt = 0.0
            for k in range(N):
                w_gt = w_tot - w_lt - w[r, k]
                s_gt = s_tot - s_lt - w[r, k] * s[r, k]
                gw[r, k] = <real>(grad[r] * (2.0 * (s[r, k] * w_lt - s_lt + s_gt - s[r, k] * w_gt)
                                             + (2.0 / 3.0) * w[r, k] * ds[r, k]))
                w_lt += w[r, k]
                s_lt += w[r, k] * s[r, k]
    return out


def splat_bilinear(values, u, v, int height, int width):
    cdef double[:, ::1] val = np.ascontiguousarray(values, dtype=np.float64)
    cdef double[::1] uu = np.ascontiguousarray(u, dtype=np.float64)
    cdef double[::1] vv = np.ascontiguousarray(v, dtype=np.float64)
    cdef Py_ssize_t M = val.shape[0], C = val.shape[1], m, ch
    acc_arr = np.zeros((height, width, C))
    w_arr = np.zeros((height, width))
    cdef double[:, :, ::1] acc = acc_arr
    cdef double[:, ::1] wsum = w_arr
    cdef long x0, y0, xi, yi
    cdef int dx, dy
    cdef double fx, fy, wt
    with nogil:
        for m in range(M):
            x0 = <long>floor(uu[m])
            y0 = <long>floor(vv[m])
            fx = uu[m] - x0
            fy = vv[m] - y0
            for dy in range(2):
                for dx in range(2):
                    xi = x0 + dx
                    yi = y0 + dy
                    if xi < 0 or xi >= width or yi < 0 or yi >= height:
                        continue
                    wt = (fx if dx else 1.0 - fx) * (fy if dy else 1.0 - fy)
                    if wt <= 0:
                        continue
                    wsum[yi, xi] += wt
                    for ch in range(C):
                        acc[yi, xi, ch] += wt * val[m, ch]
    return acc_arr, w_arr

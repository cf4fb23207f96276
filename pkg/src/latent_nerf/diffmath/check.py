"""Finite-difference gradient checking."""
from __future__ import annotations

import numpy as np


def numerical_gradient(f, theta, h=1e-4, indices=None):
    """Central differences of scalar ``f()`` with respect to ``theta.data``.

    ``f`` is called with no arguments and must read ``theta`` by reference.
    Only the flat ``indices`` are perturbed when given.
    """
    flat = theta.data.reshape(-1)
    idx = range(flat.size) if indices is None else indices
    out = np.zeros(len(idx), dtype=np.float64)
    for n, i in enumerate(idx):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f())
        flat[i] = orig - h
        fm = float(f())
        flat[i] = orig
        out[n] = (fp - fm) / (2 * h)
    return out


def relative_error(analytic, numeric):
    """Max absolute discrepancy normalized by the larger gradient's max magnitude."""
    analytic = np.asarray(analytic, dtype=np.float64).ravel()
    numeric = np.asarray(numeric, dtype=np.float64).ravel()
    scale = max(np.abs(analytic).max(initial=0), np.abs(numeric).max(initial=0))
    if scale == 0:
        return 0.0
    return float(np.abs(analytic - numeric).max() / scale)


def grad_check(f, theta, h=1e-4, indices=None):
    """Compare the tape gradient of ``f`` at ``theta`` against central differences.

    Args:
        f: zero-argument callable returning a scalar :class:`Tensor`.
        theta: leaf tensor with ``requires_grad=True``.
        h: finite-difference step.
        indices: optional flat indices to check (all by default).

    Returns:
        Max relative error, see :func:`relative_error`.
    """
    theta.grad = None
    f().backward()
    analytic = theta.grad.reshape(-1)
    if indices is not None:
        analytic = analytic[np.asarray(indices)]
    numeric = numerical_gradient(f, theta, h=h, indices=indices)
    theta.grad = None
    return relative_error(analytic, numeric)

"""Hot loop kernels with a compiled backend and a numpy fallback.

The compiled extension is used when it imports; set ``LATENT_NERF_PURE_PYTHON=1``
to force the numpy fallback. ``BACKEND`` names the active implementation.
"""
import os

import numpy as np

from . import _pykernels as python

compiled = None
if not os.environ.get("LATENT_NERF_PURE_PYTHON"):
    try:
        from . import _ckernels as compiled
    except ImportError:  # extension not built
        compiled = None

_impl = compiled if compiled is not None else python
BACKEND = "cython" if compiled is not None else "numpy"


def _c(a, dtype):
    return np.ascontiguousarray(a, dtype=dtype)


def composite_forward(sigma, delta):
    dt = sigma.dtype
    return _impl.composite_forward(_c(sigma, dt), _c(delta, dt))


def composite_backward(grad_w, sigma, delta, weights, trans):
    dt = sigma.dtype
    return _impl.composite_backward(
        _c(grad_w, dt), _c(sigma, dt), _c(delta, dt), _c(weights, dt), _c(trans, dt)
    )


def distortion_forward(w, s, ds):
    dt = w.dtype
    return _impl.distortion_forward(_c(w, dt), _c(s, dt), _c(ds, dt))


def distortion_backward(grad, w, s, ds):
    dt = w.dtype
    return _impl.distortion_backward(_c(grad, dt), _c(w, dt), _c(s, dt), _c(ds, dt))


def splat_bilinear(values, u, v, height, width):
    return _impl.splat_bilinear(values, u, v, int(height), int(width))


__all__ = [
    "BACKEND",
    "composite_backward",
    "composite_forward",
    "compiled",
    "distortion_backward",
    "distortion_forward",
    "python",
    "splat_bilinear",
]

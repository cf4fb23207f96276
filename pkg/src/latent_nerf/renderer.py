"""Rays, stratified sampling and quadrature volume rendering.

The discrete form of the rendering integral is standard alpha compositing:
``T_k = exp(-sum_{j<k} sigma_j delta_j)``, ``w_k = T_k (1 - exp(-sigma_k delta_k))``
with ``delta_k = t_{k+1} - t_k`` and ``delta_N = t_max - t_N``. The same
weights render colour, latent features and expected depth.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from . import diffmath as dm
from .diffmath import Tensor
from .errors import ContractViolation, DimensionError

DEPTH_EPS = 1e-6
OPACITY_THRESHOLD = 0.5
DEFAULT_SAMPLES = 128
LATENT_DOWNSAMPLE = 8


@dataclass
class Rays:
    """A batch of rays with per-ray near/far bounds."""

    origins: np.ndarray
    directions: np.ndarray
    near: np.ndarray
    far: np.ndarray

    def __post_init__(self):
        self.origins = np.atleast_2d(np.asarray(self.origins, dtype=np.float64))
        self.directions = np.atleast_2d(np.asarray(self.directions, dtype=np.float64))
        n = self.origins.shape[0]
        self.near = np.broadcast_to(np.asarray(self.near, dtype=np.float64), (n,)).copy()
        self.far = np.broadcast_to(np.asarray(self.far, dtype=np.float64), (n,)).copy()
        if (self.near >= self.far).any():
            raise ContractViolation("every ray needs t_min < t_max")

    def __len__(self):
        return self.origins.shape[0]

    def __getitem__(self, idx):
        return Rays(self.origins[idx], self.directions[idx], self.near[idx], self.far[idx])

    def point_at(self, t):
        t = np.asarray(t, dtype=np.float64)
        if t.ndim == 1 and len(t) == len(self):
            return self.origins + t[:, None] * self.directions
        return self.origins[:, None, :] + t[..., None] * self.directions[:, None, :]


def generate_ray(camera, pixel, jitter=None, near=0.0, far=1.0):
    """Single ray through the centre of ``pixel = (row, col)`` (plus jitter)."""
    row, col = pixel
    if not (0 <= row < camera.height and 0 <= col < camera.width):
        raise DimensionError(f"pixel {pixel} outside {camera.height}x{camera.width} image")
    d = camera.pixel_directions(np.array([row]), np.array([col]),
                                None if jitter is None else np.asarray(jitter)[None])
    return Rays(camera.position[None], d, near, far)


def generate_rays(camera, rows, cols, near, far, jitter=None):
    rows = np.asarray(rows).reshape(-1)
    cols = np.asarray(cols).reshape(-1)
    d = camera.pixel_directions(rows, cols, jitter)
    o = np.broadcast_to(camera.position, d.shape)
    return Rays(o, d, near, far)


def camera_rays(camera, near, far):
    """All pixel rays of ``camera`` in row-major order."""
    rows, cols = np.meshgrid(np.arange(camera.height), np.arange(camera.width), indexing="ij")
    return generate_rays(camera, rows, cols, near, far)


def sample_stratified(rays, n, rng=None):
    """One sample per stratum of ``[t_min, t_max]``; stratum midpoints when ``rng`` is None."""
    if n < 1:
        raise ValueError("need at least one sample per ray")
    near = rays.near[:, None]
    step = (rays.far - rays.near)[:, None] / n
    k = np.arange(n)[None, :]
    u = 0.5 if rng is None else rng.random((len(rays), n))
    return near + (k + u) * step


def interval_lengths(t, far):
    delta = np.empty_like(t)
    delta[:, :-1] = t[:, 1:] - t[:, :-1]
    delta[:, -1] = np.asarray(far) - t[:, -1]
    return delta


def transmittance_weights(sigma, delta):
    """Compositing weights for ``R x N`` densities, differentiable in ``sigma``.

    Raises:
        ContractViolation: on negative densities.
    """
    sigma = dm.as_tensor(sigma)
    s = sigma.data
    if s.ndim == 1:
        return transmittance_weights(sigma.reshape(1, -1), np.asarray(delta).reshape(1, -1)).reshape(-1)
    if (s < 0).any():
        raise ContractViolation("densities must be non-negative")
    d = np.ascontiguousarray(delta, dtype=s.dtype)
    w, trans = _kernels.composite_forward(s, d)

    def bw(g):
        return (_kernels.composite_backward(g, s, d, w, trans),)

    return Tensor._make(w, (sigma,), bw)


def transmittance(sigma, delta):
    """Transmittance before each sample (no gradient)."""
    s = np.asarray(sigma, dtype=np.float64).reshape(-1, np.shape(sigma)[-1])
    return _kernels.composite_forward(s, np.asarray(delta, dtype=np.float64).reshape(s.shape))[1]


@dataclass
class RenderResult:
    weights: Tensor
    t: np.ndarray
    delta: np.ndarray
    opacity: Tensor
    depth: Tensor
    color: Tensor | None = None
    z: Tensor | None = None


def _depth(weights, t, opacity):
    """Opacity-normalized expected depth ``sum w t / max(sum w, eps)``."""
    wd = weights.data
    num = (wd * t).sum(axis=1)
    den = np.maximum(opacity.data, DEPTH_EPS)
    active = opacity.data > DEPTH_EPS
    out = (num / den).astype(wd.dtype)

    def bw(g):
        gw = (g / den)[:, None] * t
        gw -= np.where(active, g * num / den ** 2, 0)[:, None]
        return (gw.astype(wd.dtype),)

    return Tensor._make(out, (weights,), bw)


def render_rays(field, rays, n, rng=None, color=True, latent=False,
                detach_density=False, background=0.0):
    """Render a ray batch with one shared set of weights.

    Args:
        field: object with an ``eval(x, r, color=, latent=)`` method returning
            ``(sigma, color, z)`` tensors.
        rays: :class:`Rays`.
        n: samples per ray.
        rng: generator for stratified jitter, or None for midpoints.
        color, latent: which quantities to composite.
        detach_density: stop gradients from reaching the density
            (used by the latent patch loss).
        background: colour composited behind the medium (black by default).
    """
    t = sample_stratified(rays, n, rng)
    delta = interval_lengths(t, rays.far)
    pts = rays.point_at(t).reshape(-1, 3)
    dirs = np.repeat(rays.directions, n, axis=0)
    out = field.eval(pts, dirs, color=color, latent=latent)
    r = len(rays)
    sigma = out.sigma.reshape(r, n)
    if detach_density:
        sigma = sigma.detach()
    dtype = sigma.dtype
    w = transmittance_weights(sigma, delta.astype(dtype))
    opacity = w.sum(axis=1)
    depth = _depth(w, t.astype(dtype), opacity)
    res = RenderResult(weights=w, t=t, delta=delta, opacity=opacity, depth=depth)
    w3 = w.reshape(r, n, 1)
    if color:
        c = (w3 * out.color.reshape(r, n, 3)).sum(axis=1)
        if background:
            c = c + (1.0 - opacity).reshape(r, 1) * background
        res.color = c
    if latent and out.z is not None:
        nz = out.z.shape[-1]
        res.z = (w3 * out.z.reshape(r, n, nz)).sum(axis=1)
    return res


def render_color(rays, field, n, rng=None, background=0.0):
    """Returns ``(colour R x 3, depth R, opacity R)`` tensors."""
    res = render_rays(field, rays, n, rng, color=True, latent=False, background=background)
    return res.color, res.depth, res.opacity


def render_feature(rays, field, n, rng=None):
    """Returns ``(z R x n, depth R, opacity R)`` tensors."""
    res = render_rays(field, rays, n, rng, color=False, latent=True)
    return res.z, res.depth, res.opacity


@dataclass
class DepthMap:
    depth: np.ndarray
    valid: np.ndarray

    @classmethod
    def from_opacity(cls, depth, opacity, threshold=OPACITY_THRESHOLD):
        depth = np.asarray(depth, dtype=np.float32)
        valid = np.asarray(opacity) >= threshold
        return cls(depth, valid)


@dataclass
class LatentImage:
    values: np.ndarray
    camera: object

    @property
    def channels(self):
        return self.values.shape[-1]


def _render_image(camera, field, n, near, far, color, latent, chunk, rng=None, background=0.0):
    rays = camera_rays(camera, near, far)
    total = len(rays)
    parts = {"color": [], "z": [], "depth": [], "opacity": []}
    with dm.no_grad():
        for start in range(0, total, chunk):
            res = render_rays(field, rays[start:start + chunk], n, rng, color=color,
                              latent=latent, background=background)
            parts["depth"].append(res.depth.data)
            parts["opacity"].append(res.opacity.data)
            if color:
                parts["color"].append(res.color.data)
            if latent:
                parts["z"].append(res.z.data)
    h, w = camera.height, camera.width
    depth = np.concatenate(parts["depth"]).reshape(h, w)
    opacity = np.concatenate(parts["opacity"]).reshape(h, w)
    img = np.concatenate(parts["color"]).reshape(h, w, 3) if color else None
    z = np.concatenate(parts["z"]).reshape(h, w, -1) if latent else None
    return img, z, depth, opacity


def render_latent_image(camera, field, n=DEFAULT_SAMPLES, near=0.0, far=1.0,
                        chunk=4096, opacity_threshold=OPACITY_THRESHOLD):
    """Latent feature map at 1/8 of the camera resolution (one ray per latent pixel).

    Raises:
        DimensionError: if the camera size is not a multiple of 8.
    """
    lat_cam = camera.latent(LATENT_DOWNSAMPLE)
    _, z, depth, opacity = _render_image(lat_cam, field, n, near, far, False, True, chunk)
    return LatentImage(z, camera), DepthMap.from_opacity(depth, opacity, opacity_threshold)


def render_rgb_image(camera, field, n=DEFAULT_SAMPLES, near=0.0, far=1.0, chunk=4096,
                     opacity_threshold=OPACITY_THRESHOLD, background=0.0):
    """Full-resolution colour render (density and colour heads only)."""
    img, _, depth, opacity = _render_image(camera, field, n, near, far, True, False, chunk,
                                           background=background)
    return img, DepthMap.from_opacity(depth, opacity, opacity_threshold)

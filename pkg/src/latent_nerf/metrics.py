"""Image metrics, depth-based reprojection, RCC, spiral paths and benchmarking.

RCC (reprojective colour consistency) forward-splats every frame into its
successor using the frame's own depth, takes the masked MSE against the
successor, averages the MSE over all adjacent pairs and converts the average
to PSNR once.
"""
from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field as dc_field

import numpy as np

from . import _kernels
from . import diffmath as dm
from . import renderer
from .camera import look_at
from .errors import DimensionError

REPORT_VERSION = 1
PSNR_CAP = 99.0
SPLAT_MIN_WEIGHT = 0.5
OCCLUSION_TOL = 0.05
SNAP_TOL = 1e-6


# -- reference metrics ------------------------------------------------------------

def mse(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"image shapes differ: {a.shape} vs {b.shape}")
    return float(np.mean((a - b) ** 2))


def psnr_from_mse(value, peak=1.0):
    if value == 0:
        return math.inf
    return 10.0 * math.log10(peak * peak / value)


def psnr(a, b, peak=1.0):
    """Peak signal-to-noise ratio in dB; identical images give ``math.inf``.

    Raises:
        DimensionError: if the shapes differ.
        ValueError: if ``peak`` is not positive.
    """
    if peak <= 0:
        raise ValueError("peak must be positive")
    return psnr_from_mse(mse(a, b), peak)


def report_value(db):
    """Finite value for reports: infinity is capped at 99 dB."""
    if db is None or (isinstance(db, float) and math.isnan(db)):
        return None
    return min(float(db), PSNR_CAP)


def metric_record(name, value, frames=None, coverage=None, **extra):
    """A structured metric record (one JSON object per line in reports)."""
    rec = {"version": REPORT_VERSION, "metric": name, "value": report_value(value)}
    if frames is not None:
        rec["frames"] = list(frames)
    if coverage is not None:
        rec["coverage"] = float(coverage)
    rec.update(extra)
    return rec


# -- reprojection ------------------------------------------------------------------

def _depth_arrays(depth):
    if hasattr(depth, "depth"):
        return np.asarray(depth.depth, dtype=np.float64), np.asarray(depth.valid, dtype=bool)
    if isinstance(depth, tuple):
        d, v = depth
        d = np.asarray(d, dtype=np.float64)
        return d, (np.ones(d.shape, bool) if v is None else np.asarray(v, dtype=bool))
    d = np.asarray(depth, dtype=np.float64)
    return d, np.isfinite(d) & (d > 0)


def warp_coordinates(depth, cam_src, cam_dst):
    """Where each source pixel lands in the destination camera.

    Args:
        depth: source ``H x W`` distances along the unit pixel rays.
        cam_src, cam_dst: source and destination cameras.

    Returns:
        ``(col, row, dist)`` arrays of shape ``H x W`` in destination
        pixel coordinates (pixel centres at integers); ``dist <= 0`` marks
        points behind the destination camera.
    """
    d = np.asarray(depth, dtype=np.float64)
    h, w = d.shape
    rows, cols = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    dirs = cam_src.pixel_directions(rows, cols)
    pts = cam_src.position + d[..., None] * dirs
    return cam_dst.project(pts)


def reproject(image, depth, cam_src, cam_dst, target_depth=None,
              occlusion_tol=OCCLUSION_TOL, min_weight=SPLAT_MIN_WEIGHT):
    """Forward-splat ``image`` into ``cam_dst`` using its depth.

    Args:
        image: source ``H x W x 3`` frame.
        depth: source depth as a :class:`~latent_nerf.renderer.DepthMap`,
            a ``(depth, valid)`` pair or a plain array.
        cam_src, cam_dst: cameras of the source and destination frames.
        target_depth: destination depth; when given, pixels whose splatted
            depth differs from it by more than ``occlusion_tol`` (relative)
            are masked out.
        min_weight: accumulated bilinear weight a pixel needs to be valid.

    Returns:
        ``(warped, mask)``: the warped image (zeros where masked) and the
        boolean validity mask in the destination frame.
    """
    img = np.asarray(image, dtype=np.float64)
    d, valid = _depth_arrays(depth)
    h_dst, w_dst = cam_dst.height, cam_dst.width
    u, v, dist = warp_coordinates(np.where(valid, d, 0.0), cam_src, cam_dst)
    # round-off from an identity warp must not turn into bilinear blur
    u = np.where(np.abs(u - np.rint(u)) < SNAP_TOL, np.rint(u), u)
    v = np.where(np.abs(v - np.rint(v)) < SNAP_TOL, np.rint(v), v)
    ok = valid & (dist > 0) & np.isfinite(u) & np.isfinite(v)
    ok &= (u > -1) & (u < w_dst) & (v > -1) & (v < h_dst)
    c = img.shape[-1]
    values = np.concatenate([img[ok], dist[ok][:, None]], axis=1)
    acc, wsum = _kernels.splat_bilinear(values, u[ok], v[ok], h_dst, w_dst)
    mask = wsum >= min_weight
    safe = np.where(mask, wsum, 1.0)[..., None]
    out = acc / safe
    warped = np.where(mask[..., None], out[..., :c], 0.0)
    if target_depth is not None:
        td, tvalid = _depth_arrays(target_depth)
        agree = np.abs(out[..., c] - td) <= occlusion_tol * np.maximum(td, 1e-9)
        mask &= tvalid & agree
        warped = np.where(mask[..., None], warped, 0.0)
    return warped, mask


@dataclass
class RCCResult:
    """RCC in dB (``math.inf`` for a perfect sequence, None when undefined)."""

    value: float | None
    mean_mse: float | None
    pair_mse: list
    coverage: list

    @property
    def defined(self):
        return self.value is not None

    def record(self):
        cov = float(np.mean(self.coverage)) if self.coverage else 0.0
        return metric_record("rcc", self.value, frames=[0, len(self.coverage)], coverage=cov,
                             defined=self.defined)


def rcc(frames, depths, cameras, occlusion_mask=True, occlusion_tol=OCCLUSION_TOL,
        min_weight=SPLAT_MIN_WEIGHT):
    """Reprojective colour consistency of an ordered frame sequence.

    Args:
        frames: ``F`` images ``H x W x 3``.
        depths: ``F`` depth maps of those frames.
        cameras: ``F`` cameras.
        occlusion_mask: mask pixels failing the depth-consistency check
            against the successor's own depth; False gives the literal
            unmasked reprojection.

    Returns:
        :class:`RCCResult`. Pairs with an empty mask are skipped; if every
        pair is empty the value is undefined (None).
    """
    if len(frames) < 2:
        raise ValueError("RCC needs at least two frames")
    if not (len(frames) == len(depths) == len(cameras)):
        raise DimensionError("frames, depths and cameras must have equal lengths")
    pair_mse, coverage = [], []
    for i in range(len(frames) - 1):
        target = np.asarray(frames[i + 1], dtype=np.float64)
        warped, mask = reproject(frames[i], depths[i], cameras[i], cameras[i + 1],
                                 target_depth=depths[i + 1] if occlusion_mask else None,
                                 occlusion_tol=occlusion_tol, min_weight=min_weight)
        coverage.append(float(mask.mean()))
        if mask.any():
            pair_mse.append(float(np.mean((target[mask] - warped[mask]) ** 2)))
    if not pair_mse:
        return RCCResult(None, None, [], coverage)
    mean = float(np.mean(pair_mse))
    return RCCResult(psnr_from_mse(mean), mean, pair_mse, coverage)


# -- spiral paths -------------------------------------------------------------------

def _focus_point(cameras):
    """Least-squares point closest to every optical axis."""
    a = np.zeros((3, 3))
    b = np.zeros(3)
    for cam in cameras:
        d = cam.forward / np.linalg.norm(cam.forward)
        proj = np.eye(3) - np.outer(d, d)
        a += proj
        b += proj @ cam.position
    if np.linalg.matrix_rank(a) < 3:
        cam = cameras[0]
        return cam.position + cam.forward
    return np.linalg.solve(a, b)


def mean_pose(cameras):
    """Mean camera position looking at the common focus point."""
    center = np.mean([c.position for c in cameras], axis=0)
    up = np.mean([c.rotation[:, 1] for c in cameras], axis=0)
    focus = _focus_point(cameras)
    return look_at(center, focus, up), focus


def spiral_path(cameras, frames=120, rotations=2, zrate=0.5, radius_scale=1.0):
    """A closed spiral of cameras around the mean training pose.

    Radii are the 90th percentile of the training positions' offsets from
    their mean, measured in the mean pose's frame. Every pose looks at the
    least-squares focus point of the training optical axes. Angles are
    evenly spaced without repeating the start, so the path is cyclic.

    Args:
        cameras: training cameras (intrinsics are copied from the first).
        frames: number of poses; 1 gives the mean pose and 0 an empty list.
    """
    if not cameras:
        raise ValueError("need at least one camera")
    if frames <= 0:
        return []
    c2w, focus = mean_pose(cameras)
    base = cameras[0]
    if frames == 1:
        return [base.with_pose(c2w)]
    rot = c2w[:3, :3]
    center = c2w[:3, 3]
    offsets = np.stack([c.position - center for c in cameras]) @ rot
    radii = np.percentile(np.abs(offsets), 90, axis=0) * radius_scale
    up = rot[:, 1]
    path = []
    for theta in np.linspace(0.0, 2 * np.pi * rotations, frames, endpoint=False):
        local = np.array([np.cos(theta), -np.sin(theta), -np.sin(theta * zrate)]) * radii
        eye = center + rot @ local
        path.append(base.with_pose(look_at(eye, focus, up)))
    return path


# -- benchmarking ----------------------------------------------------------------------

@dataclass
class BenchReport:
    """Timings and field-query counts of the RGB and latent render paths."""

    frames: int = 0
    width: int = 0
    height: int = 0
    n_samples: int = 0
    rgb_time: float = 0.0
    latent_time: float = 0.0
    latent_render_time: float = 0.0
    decode_time: float = 0.0
    rgb_queries: int = 0
    latent_queries: int = 0
    warmup: bool = True
    backend: str = dc_field(default_factory=lambda: _kernels.BACKEND)

    @property
    def query_ratio(self):
        return self.rgb_queries / self.latent_queries if self.latent_queries else None

    @property
    def speedup(self):
        return self.rgb_time / self.latent_time if self.latent_time > 0 else None

    @property
    def decoder_share(self):
        return self.decode_time / self.latent_time if self.latent_time > 0 else None

    def to_dict(self):
        d = asdict(self)
        d.update(version=REPORT_VERSION, kind="bench", query_ratio=self.query_ratio,
                 speedup=self.speedup, decoder_share=self.decoder_share)
        return d

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)

    def table(self):
        """Plain-text timing table for terminals."""
        if not self.frames:
            return "no frames rendered"
        per = 1.0 / self.frames
        lines = [
            f"{'pipeline':<16}{'time (s)':>10}{'s/frame':>10}{'queries':>14}{'speedup':>9}",
            f"{'RGB':<16}{self.rgb_time:>10.2f}{self.rgb_time * per:>10.3f}"
            f"{self.rgb_queries:>14d}{'1.0x':>9}",
            f"{'latent+decode':<16}{self.latent_time:>10.2f}{self.latent_time * per:>10.3f}"
            f"{self.latent_queries:>14d}{self.speedup:>8.1f}x",
            f"query ratio {self.query_ratio:.1f}:1, decoder share {self.decoder_share:.0%}",
        ]
        return "\n".join(lines)


def bench(field, ae, cameras, n_samples=renderer.DEFAULT_SAMPLES, near=0.0, far=1.0,
          warmup=True, chunk=8192):
    """Time the RGB path against the latent-render-plus-decode path.

    Timing covers rendering and decoding only. With ``warmup`` the first
    camera is rendered once per path before timing and discarded. The RGB
    path evaluates only the density and colour heads.
    """
    cameras = list(cameras)
    report = BenchReport(warmup=warmup, n_samples=n_samples)
    if not cameras:
        return report
    report.frames = len(cameras)
    report.width, report.height = cameras[0].width, cameras[0].height

    def rgb(cam):
        return renderer.render_rgb_image(cam, field, n_samples, near, far, chunk=chunk)

    def latent(cam):
        t0 = time.perf_counter()
        lat, _ = renderer.render_latent_image(cam, field, n_samples, near, far, chunk=chunk)
        t1 = time.perf_counter()
        with dm.no_grad():
            ae.decode(lat.values.astype(np.float32))
        return t1 - t0, time.perf_counter() - t1

    if warmup:
        rgb(cameras[0])
        latent(cameras[0])
    q0 = field.query_count
    t0 = time.perf_counter()
    for cam in cameras:
        rgb(cam)
    report.rgb_time = time.perf_counter() - t0
    report.rgb_queries = field.query_count - q0
    q0 = field.query_count
    for cam in cameras:
        r, d = latent(cam)
        report.latent_render_time += r
        report.decode_time += d
    report.latent_time = report.latent_render_time + report.decode_time
    report.latent_queries = field.query_count - q0
    return report

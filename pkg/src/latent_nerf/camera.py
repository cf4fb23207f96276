"""Pinhole cameras and rigid poses.

Convention (fixed project-wide): right-handed camera frame, x right, y up,
the camera looks down -z. ``camera_to_world`` is a row-major 4x4 rigid
transform. Continuous image coordinates put the top-left image corner at
(0, 0), so pixel ``(row, col)`` has its centre at ``(col + 0.5, row + 0.5)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation, DimensionError

ORTHO_TOL = 1e-6


def look_at(eye, target, up=(0.0, 1.0, 0.0)):
    """Camera-to-world matrix for a camera at ``eye`` looking at ``target``."""
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    forward /= np.linalg.norm(forward)
    right = np.cross(forward, np.asarray(up, dtype=np.float64))
    if np.linalg.norm(right) < 1e-12:
        right = np.cross(forward, np.array([1.0, 0.0, 0.0]))
    right /= np.linalg.norm(right)
    true_up = np.cross(right, forward)
    c2w = np.eye(4)
    c2w[:3, 0] = right
    c2w[:3, 1] = true_up
    c2w[:3, 2] = -forward
    c2w[:3, 3] = eye
    return c2w


def check_rigid(c2w, tol=ORTHO_TOL):
    """Raise if the 4x4 matrix is not a rigid transform within ``tol``."""
    c2w = np.asarray(c2w, dtype=np.float64)
    if c2w.shape != (4, 4):
        raise DimensionError(f"pose must be 4x4, got {c2w.shape}")
    rot = c2w[:3, :3]
    err = np.abs(rot.T @ rot - np.eye(3)).max()
    if err > tol or abs(np.linalg.det(rot) - 1.0) > 10 * tol:
        raise ContractViolation(f"rotation block not orthonormal (error {err:.3g})")
    if np.abs(c2w[3] - np.array([0, 0, 0, 1.0])).max() > tol:
        raise ContractViolation("last pose row must be [0, 0, 0, 1]")
    return c2w


@dataclass(frozen=True, eq=False)
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    camera_to_world: np.ndarray

    def __post_init__(self):
        object.__setattr__(
            self, "camera_to_world", np.array(self.camera_to_world, dtype=np.float64).reshape(4, 4)
        )

    @classmethod
    def from_fov(cls, width, height, fov_deg, c2w):
        f = 0.5 * width / np.tan(0.5 * np.radians(fov_deg))
        return cls(f, f, width / 2.0, height / 2.0, int(width), int(height), c2w)

    @property
    def rotation(self):
        return self.camera_to_world[:3, :3]

    @property
    def position(self):
        return self.camera_to_world[:3, 3]

    @property
    def forward(self):
        return -self.camera_to_world[:3, 2]

    def with_pose(self, c2w):
        return Camera(self.fx, self.fy, self.cx, self.cy, self.width, self.height, c2w)

    def scaled(self, factor):
        """Camera over the same view with resolution multiplied by ``factor``."""
        w, h = self.width * factor, self.height * factor
        if abs(w - round(w)) > 1e-9 or abs(h - round(h)) > 1e-9:
            raise DimensionError(f"{self.width}x{self.height} cannot be scaled by {factor}")
        return Camera(
            self.fx * factor, self.fy * factor, self.cx * factor, self.cy * factor,
            int(round(w)), int(round(h)), self.camera_to_world,
        )

    def latent(self, downsample=8):
        if self.width % downsample or self.height % downsample:
            raise DimensionError(
                f"image size {self.width}x{self.height} is not a multiple of {downsample}"
            )
        return self.scaled(1.0 / downsample)

    def pixel_directions(self, rows, cols, jitter=None):
        """Unit world-frame directions through pixel centres (+ optional jitter)."""
        u = np.asarray(cols, dtype=np.float64) + 0.5
        v = np.asarray(rows, dtype=np.float64) + 0.5
        if jitter is not None:
            jitter = np.asarray(jitter, dtype=np.float64)
            u = u + jitter[..., 0]
            v = v + jitter[..., 1]
        d_cam = np.stack(
            [(u - self.cx) / self.fx, -(v - self.cy) / self.fy, -np.ones_like(u)], axis=-1
        )
        d = d_cam @ self.rotation.T
        return d / np.linalg.norm(d, axis=-1, keepdims=True)

    def project(self, points):
        """World points to continuous pixel coordinates.

        Returns:
            ``(col, row, depth)`` where ``depth`` is the distance from the
            camera centre and ``(col, row)`` follow the integer-pixel-centre
            convention; points at or behind the image plane get ``depth <= 0``.
        """
        p = np.asarray(points, dtype=np.float64)
        cam = (p - self.position) @ self.rotation
        z = -cam[..., 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = self.cx + self.fx * cam[..., 0] / z
            v = self.cy - self.fy * cam[..., 1] / z
        dist = np.linalg.norm(cam, axis=-1)
        dist = np.where(z > 1e-9, dist, -1.0)
        return u - 0.5, v - 0.5, dist

    def to_dict(self):
        return {
            "fx": float(self.fx), "fy": float(self.fy),
            "cx": float(self.cx), "cy": float(self.cy),
            "width": int(self.width), "height": int(self.height),
            "camera_to_world": [[float(x) for x in row] for row in self.camera_to_world],
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["fx"], d["fy"], d["cx"], d["cy"], d["width"], d["height"], d["camera_to_world"])

"""Three-phase fitting: AE pretraining (A), joint field + decoder (B), decoder
distillation from RGB renders (C), and the interpolated-camera distribution.

Phase B minimizes ``L_r + lambda_d L_d + lambda_gr L_gr + L_p``. The patch
loss ``L_p`` renders latent features with a detached density and reads z
from detached trunk features, so its gradient reaches only the z head and
the decoder. Phase C minimizes ``gamma * d(S_I) + (1 - gamma) * d(S~_I)``
over decoder parameters alone, where ``d(S)`` is the mean decoded-image MSE
over a set.
"""
from __future__ import annotations

import hashlib
import json
import time
from dataclasses import asdict, dataclass, field as dc_field

import numpy as np
from scipy.spatial.transform import Rotation

from . import diffmath as dm
from . import renderer
from ._kernels import distortion_backward, distortion_forward
from .autoencoder import AEArchitecture, Autoencoder
from .diffmath import Adam, Tensor
from .errors import AlignmentError, DivergenceError, UsageError
from .camera import Camera
from .field import FieldConfig, NeuralField
from .renderer import LATENT_DOWNSAMPLE, Rays

LOG_VERSION = 1


# -- configuration --------------------------------------------------------------

@dataclass
class TrainConfig:
    """Hyperparameters for all three phases.

    Iteration counts, patch sizes and schedules differ between the ``paper``
    and ``desk`` presets; loss weights are shared.
    """

    preset: str = "desk"
    seed: int = 7
    lambda_d: float = 0.1
    lambda_gr: float = 5e-4
    lambda_p: float = 1.0
    gamma: float = 0.7
    samples: int = 64
    # phase A
    a_iters: int = 300
    a_lr: float = 4e-4
    a_halve_every: int = 100
    a_patch: int = 32
    a_batch: int = 5
    # phase B
    b_iters: int = 2000
    b_rays: int = 1024
    b_depth_rays: int = 512
    b_latent_patch: int = 8
    b_field_lr: float = 1e-2
    b_tau: float = 1000.0
    b_ae_lr: float = 1e-4
    # phase C
    c_iters: int = 600
    c_lr: float = 1e-4
    c_halve_every: int = 150
    c_real_per_batch: int = 1
    c_render_per_batch: int = 2
    render_set_size: int = 64
    log_every: int = 25
    field: dict = dc_field(default_factory=lambda: FieldConfig().to_dict())
    ae: dict = dc_field(default_factory=lambda: AEArchitecture().to_dict())

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")
        for name in ("lambda_d", "lambda_gr", "lambda_p"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.b_latent_patch < 1:
            raise ValueError("latent patch must be at least one latent pixel")
        # canonical nested dicts (tuples, full key set) so JSON round trips compare equal
        self.field = FieldConfig.from_dict(dict(self.field)).to_dict()
        self.ae = AEArchitecture.from_dict(dict(self.ae)).to_dict()

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def replace(self, **overrides):
        d = self.to_dict()
        unknown = set(overrides) - set(d)
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        d.update(overrides)
        return TrainConfig.from_dict(d)


def paper_config(seed=7):
    """Full-scale hyperparameters."""
    return TrainConfig(
        preset="paper", seed=seed, samples=128,
        a_iters=3000, a_lr=4e-4, a_halve_every=500, a_patch=512, a_batch=5,
        b_iters=20000, b_rays=4096, b_depth_rays=4096, b_latent_patch=32,
        b_field_lr=1e-2, b_tau=1e4, b_ae_lr=1e-4,
        c_iters=10000, c_lr=1e-4, c_halve_every=2500, render_set_size=512,
        log_every=100,
    )


def desk_config(seed=7):
    """CPU-minutes hyperparameters for 64x64 synthetic scenes.

    Iteration counts and sizes are scaled from the full-scale values; the
    decoder learning rates are raised because the desk schedules are an
    order of magnitude shorter.
    """
    return TrainConfig(
        preset="desk", seed=seed, samples=64,
        a_iters=300, a_lr=4e-4, a_halve_every=100, a_patch=32, a_batch=5,
        b_iters=2000, b_rays=1024, b_depth_rays=512, b_latent_patch=8,
        b_field_lr=1e-2, b_tau=1000.0, b_ae_lr=1e-3,
        c_iters=1500, c_lr=1e-3, c_halve_every=750, render_set_size=64,
        log_every=25,
        field=FieldConfig(bbox_min=(-2.0, -2.0, -2.0), bbox_max=(2.0, 2.0, 2.0)).to_dict(),
        ae=AEArchitecture().scaled(0.5).to_dict(),
    )


PRESETS = {"paper": paper_config, "desk": desk_config}


def get_preset(name, seed=7):
    try:
        return PRESETS[name](seed)
    except KeyError:
        raise UsageError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None


# -- ray batches and losses ------------------------------------------------------

@dataclass
class RayBatch:
    """Rays with their supervision: colours and (optional) depth."""

    rays: Rays
    colors: np.ndarray
    depth: np.ndarray | None = None
    depth_valid: np.ndarray | None = None

    def __len__(self):
        return len(self.rays)


@dataclass
class LossCounters:
    empty_depth_batches: int = 0


def sample_ray_batch(dataset, n_rays, rng):
    """Uniformly random pixels over all images of ``dataset``."""
    n_img = len(dataset)
    h, w = dataset.images[0].shape[:2]
    img = rng.integers(0, n_img, n_rays)
    row = rng.integers(0, h, n_rays)
    col = rng.integers(0, w, n_rays)
    origins = np.empty((n_rays, 3))
    dirs = np.empty((n_rays, 3))
    colors = np.empty((n_rays, 3), dtype=np.float32)
    depth = np.zeros(n_rays, dtype=np.float32)
    valid = np.zeros(n_rays, dtype=bool)
    for i in np.unique(img):
        sel = img == i
        cam = dataset.cameras[i]
        dirs[sel] = cam.pixel_directions(row[sel], col[sel])
        origins[sel] = cam.position
        colors[sel] = dataset.images[i][row[sel], col[sel]]
        if dataset.depths[i] is not None:
            d, v = dataset.depths[i]
            depth[sel] = d[row[sel], col[sel]]
            valid[sel] = True if v is None else v[row[sel], col[sel]]
    rays = Rays(origins, dirs, dataset.near, dataset.far)
    return RayBatch(rays, colors, depth, valid)


def rgb_loss(batch, field, n_samples, rng=None):
    """Colour MSE of rendered rays against their ground truth.

    Returns:
        ``(loss, render_result)``; the render result carries the weights
        used by the distortion loss.
    """
    res = renderer.render_rays(field, batch.rays, n_samples, rng, color=True, latent=False)
    return dm.mse(res.color, batch.colors), res


def depth_loss(batch, field, n_samples, rng=None, counters=None):
    """Expected-depth MSE over rays with valid supervision.

    A batch with no valid depth returns a zero loss and increments
    ``counters.empty_depth_batches``.
    """
    valid = batch.depth_valid if batch.depth_valid is not None else np.zeros(len(batch), bool)
    if not valid.any():
        if counters is not None:
            counters.empty_depth_batches += 1
        return Tensor(np.zeros((), dtype=dm.default_dtype()))
    idx = np.flatnonzero(valid)
    res = renderer.render_rays(field, batch.rays[idx], n_samples, rng, color=False, latent=False)
    return dm.mse(res.depth, batch.depth[idx])


def normalized_bins(t, delta, near, far):
    """Interval midpoints and lengths mapped to ``[0, 1]`` along each ray."""
    span = (np.asarray(far) - np.asarray(near)).reshape(-1, 1)
    s = (t + 0.5 * delta - np.asarray(near).reshape(-1, 1)) / span
    return s, delta / span


def distortion_loss(weights, s, ds):
    """Ray-averaged ``sum_ij w_i w_j |s_i - s_j| + 1/3 sum_i w_i^2 ds_i``.

    Args:
        weights: ``R x N`` tensor of compositing weights.
        s: ``R x N`` sorted normalized interval midpoints.
        ds: ``R x N`` normalized interval lengths.
    """
    w = dm.as_tensor(weights)
    if w.ndim == 1:
        w = w.reshape(1, -1)
    dtype = w.dtype
    s = np.ascontiguousarray(np.reshape(s, w.shape), dtype=dtype)
    ds = np.ascontiguousarray(np.reshape(ds, w.shape), dtype=dtype)
    per_ray = distortion_forward(w.data, s, ds)
    r = per_ray.shape[0]
    out = np.asarray(per_ray.mean(), dtype=dtype)

    def bw(g):
        gr = np.full(r, g / r, dtype=dtype)
        return (distortion_backward(gr, w.data, s, ds),)

    return Tensor._make(out, (w,), bw)


def extract_patch(image, row, col, size):
    if row % LATENT_DOWNSAMPLE or col % LATENT_DOWNSAMPLE or size % LATENT_DOWNSAMPLE:
        raise AlignmentError(
            f"patch offset ({row}, {col}) and size {size} must be multiples of {LATENT_DOWNSAMPLE}"
        )
    h, w = image.shape[:2]
    if row < 0 or col < 0 or row + size > h or col + size > w:
        raise AlignmentError(f"patch ({row}, {col}, {size}) outside {h}x{w} image")
    return image[row:row + size, col:col + size]


def patch_rays(camera, row, col, size, near, far):
    """Latent-pixel rays covering an aligned RGB patch."""
    lat = camera.latent(LATENT_DOWNSAMPLE)
    r0, c0, s = row // LATENT_DOWNSAMPLE, col // LATENT_DOWNSAMPLE, size // LATENT_DOWNSAMPLE
    rows, cols = np.meshgrid(np.arange(r0, r0 + s), np.arange(c0, c0 + s), indexing="ij")
    return renderer.generate_rays(lat, rows, cols, near, far)


def patch_loss(image, camera, field, decoder, row=0, col=0, size=None, n_samples=64,
               rng=None, near=0.0, far=1.0):
    """MSE between an RGB patch and the decoded latent render of its footprint.

    Args:
        image: ``H x W x 3`` ground truth.
        camera: the full-resolution camera of ``image``.
        field: the neural field.
        decoder: object with a ``decode`` method (the autoencoder).
        row, col, size: patch offset and side in RGB pixels, all multiples
            of 8 (defaults to the whole image).

    Raises:
        AlignmentError: if the patch is not aligned to the latent grid.
    """
    if size is None:
        if image.shape[0] != image.shape[1]:
            raise AlignmentError("default patch needs a square image; pass size")
        size = image.shape[0]
    target = extract_patch(image, row, col, size)
    rays = patch_rays(camera, row, col, size, near, far)
    res = renderer.render_rays(field, rays, n_samples, rng, color=False, latent=True,
                               detach_density=True)
    s = size // LATENT_DOWNSAMPLE
    z = res.z.reshape(s, s, -1)
    return dm.mse(decoder.decode(z), target)


# -- interpolated cameras ----------------------------------------------------------

def average_rotations(rotations, weights, iters=20, tol=1e-12):
    """Weighted Karcher mean of rotation matrices, started from the chordal mean."""
    rots = np.asarray(rotations, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    w = w / w.sum()
    u, _, vt = np.linalg.svd(np.einsum("k,kij->ij", w, rots))
    mean = u @ vt
    if np.linalg.det(mean) < 0:
        u[:, -1] *= -1
        mean = u @ vt
    for _ in range(iters):
        rel = Rotation.from_matrix(np.einsum("ji,kjl->kil", mean, rots))
        step = (w[:, None] * rel.as_rotvec()).sum(axis=0)
        mean = mean @ Rotation.from_rotvec(step).as_matrix()
        if np.linalg.norm(step) < tol:
            break
    return mean


def interpolate_cameras(cameras, weights):
    """Camera at barycentric ``weights`` over ``cameras`` (intrinsics of the first)."""
    w = np.asarray(weights, dtype=np.float64)
    if len(w) != len(cameras) or (w < 0).any() or w.sum() <= 0:
        raise ValueError("weights must be non-negative with a positive sum, one per camera")
    w = w / w.sum()
    nz = np.flatnonzero(w)
    if len(nz) == 1:
        return cameras[nz[0]].with_pose(cameras[nz[0]].camera_to_world.copy())
    rots = [c.rotation for c in cameras]
    if all(np.array_equal(rots[0], r) for r in rots[1:]):
        rot = rots[0].copy()
    else:
        rot = average_rotations(rots, w)
    pos = np.einsum("k,ki->i", w, np.stack([c.position for c in cameras]))
    c2w = np.eye(4)
    c2w[:3, :3] = rot
    c2w[:3, 3] = pos
    return cameras[0].with_pose(c2w)


def sample_interpolated_camera(cameras, rng):
    """Draw from the interpolated-camera distribution over training cameras.

    A uniformly random triplet is combined with Dirichlet(1, 1, 1) weights,
    i.e. uniform on the simplex.
    """
    if len(cameras) < 3:
        raise ValueError("need at least three cameras to interpolate")
    idx = rng.choice(len(cameras), size=3, replace=False)
    weights = rng.dirichlet(np.ones(3))
    return interpolate_cameras([cameras[i] for i in idx], weights)


# -- render sets -------------------------------------------------------------------

@dataclass
class RenderSet:
    """RGB renders (and their latent renders) at interpolated cameras."""

    cameras: list
    images: list
    latents: list

    def __len__(self):
        return len(self.cameras)


def build_render_set(field, cameras, size, seed, n_samples, near, far):
    rng = np.random.default_rng([seed, 3])
    cams = [sample_interpolated_camera(cameras, rng) for _ in range(size)]
    images, latents = [], []
    for cam in cams:
        img, _ = renderer.render_rgb_image(cam, field, n_samples, near, far)
        lat, _ = renderer.render_latent_image(cam, field, n_samples, near, far)
        images.append(img.astype(np.float32))
        latents.append(lat.values.astype(np.float32))
    return RenderSet(cams, images, latents)


# -- training ----------------------------------------------------------------------

def params_digest(params):
    h = hashlib.sha256()
    for name in sorted(params):
        h.update(name.encode())
        h.update(np.ascontiguousarray(params[name].data).tobytes())
    return h.hexdigest()


class Trainer:
    """Runs phases A, B, C on a dataset and owns all mutable training state.

    Args:
        dataset: :class:`~latent_nerf.sceneio.PosedDataset`; only the
            ``train`` split is used for fitting.
        config: :class:`TrainConfig`.
        log_path: optional JSON-lines file receiving one record per
            ``log_every`` steps.
        deterministic: drop wall-clock fields from log records so runs are
            byte-reproducible.
        snapshot_path: where a diagnostic checkpoint is written on divergence.
    """

    PHASES = ("A", "B", "C")

    def __init__(self, dataset, config=None, log_path=None, deterministic=True,
                 snapshot_path=None):
        self.config = config or desk_config()
        self.dataset = dataset
        self.train_set = dataset.train() if any(s == "test" for s in dataset.splits) else dataset
        if len(self.train_set) == 0:
            raise UsageError("dataset has no training frames")
        cfg = self.config
        self.field = NeuralField(FieldConfig.from_dict(cfg.field), seed=cfg.seed)
        self.ae = Autoencoder(AEArchitecture.from_dict(cfg.ae), seed=cfg.seed + 1)
        self.rng = np.random.default_rng(cfg.seed)
        self.progress = {"A": 0, "B": 0, "C": 0}
        self.completed = []
        self.optim = {}
        self.counters = LossCounters()
        self.stopgrad = {"max_sigma": 0.0, "max_color": 0.0, "checked_steps": 0}
        self.log = []
        self.log_path = log_path
        self.deterministic = deterministic
        self.snapshot_path = snapshot_path
        self.render_set = None
        self._real_latents = None
        self._t0 = time.perf_counter()

    # -- logging -------------------------------------------------------------
    def _record(self, phase, it, **values):
        rec = {"version": LOG_VERSION, "phase": phase, "iter": it}
        rec.update({k: (float(v) if isinstance(v, (np.floating, float)) else v)
                    for k, v in values.items()})
        if not self.deterministic:
            rec["wall"] = round(time.perf_counter() - self._t0, 3)
        self.log.append(rec)
        if self.log_path:
            with open(self.log_path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
        return rec

    def _should_log(self, it, total):
        return it % self.config.log_every == 0 or it == total - 1

    def _check_finite(self, phase, it, value):
        if not np.isfinite(value):
            path = None
            if self.snapshot_path:
                from .sceneio import save_checkpoint

                save_checkpoint(self.snapshot_path, *self.state_dict())
                path = self.snapshot_path
            raise DivergenceError(f"non-finite loss in phase {phase} at iteration {it}", path)

    # -- phase A ---------------------------------------------------------------
    def phase_a(self, stop_at=None):
        """Autoencoder reconstruction pretraining on random training-image crops."""
        cfg = self.config
        if "A" not in self.optim:
            self.optim["A"] = Adam(self.ae.params, lr=cfg.a_lr)
        opt = self.optim["A"]
        images = self.train_set.images
        h, w = images[0].shape[:2]
        p = min(cfg.a_patch, h, w)
        end = cfg.a_iters if stop_at is None else min(stop_at, cfg.a_iters)
        while self.progress["A"] < end:
            it = self.progress["A"]
            opt.lr = cfg.a_lr * 0.5 ** (it // cfg.a_halve_every)
            idx = self.rng.integers(0, len(images), cfg.a_batch)
            rows = self.rng.integers(0, h - p + 1, cfg.a_batch)
            cols = self.rng.integers(0, w - p + 1, cfg.a_batch)
            batch = np.stack([images[i][r:r + p, c:c + p] for i, r, c in zip(idx, rows, cols)])
            opt.zero_grad()
            loss = dm.mse(self.ae.reconstruct(batch), batch)
            self._check_finite("A", it, loss.item())
            loss.backward()
            opt.step()
            if self._should_log(it, cfg.a_iters):
                self._record("A", it, loss=loss.item(), lr=opt.lr)
            self.progress["A"] += 1
        return self.ae

    # -- phase B ---------------------------------------------------------------
    def field_lr(self, it):
        cfg = self.config
        return cfg.b_field_lr * 10.0 ** (-it / cfg.b_tau)

    def _stopgrad_probe(self):
        """Largest gradient magnitude L_p left on density and colour parameters."""
        def peak(params):
            vals = [np.abs(p.grad).max() for p in params.values() if p.grad is not None]
            return float(max(vals)) if vals else 0.0

        return peak(self.field.density_params()), peak(self.field.color_params())

    def phase_b_step(self, it):
        cfg = self.config
        f_opt, d_opt = self.optim["B.field"], self.optim["B.decoder"]
        f_opt.lr = self.field_lr(it)
        f_opt.zero_grad()
        d_opt.zero_grad()
        terms = {}
        train = self.train_set
        n = cfg.samples
        near, far = train.near, train.far
        lp_val = 0.0
        if cfg.lambda_p > 0:
            i = int(self.rng.integers(0, len(train)))
            img = train.images[i]
            h, w = img.shape[:2]
            size = min(cfg.b_latent_patch * LATENT_DOWNSAMPLE, h, w)
            row = int(self.rng.integers(0, (h - size) // LATENT_DOWNSAMPLE + 1)) * LATENT_DOWNSAMPLE
            col = int(self.rng.integers(0, (w - size) // LATENT_DOWNSAMPLE + 1)) * LATENT_DOWNSAMPLE
            lp = patch_loss(img, train.cameras[i], self.field, self.ae, row, col, size, n,
                            self.rng, near, far)
            (lp * cfg.lambda_p).backward()
            lp_val = lp.item()
            s_peak, c_peak = self._stopgrad_probe()
            self.stopgrad["max_sigma"] = max(self.stopgrad["max_sigma"], s_peak)
            self.stopgrad["max_color"] = max(self.stopgrad["max_color"], c_peak)
            self.stopgrad["checked_steps"] += 1
            terms["stopgrad_sigma"] = s_peak
            terms["stopgrad_color"] = c_peak
        batch = sample_ray_batch(train, cfg.b_rays, self.rng)
        lr_loss, res = rgb_loss(batch, self.field, n, self.rng)
        total = lr_loss
        lgr_val = 0.0
        if cfg.lambda_gr > 0:
            s, ds = normalized_bins(res.t, res.delta, batch.rays.near, batch.rays.far)
            lgr = distortion_loss(res.weights, s, ds)
            total = total + lgr * cfg.lambda_gr
            lgr_val = lgr.item()
        ld_val = 0.0
        if cfg.lambda_d > 0:
            dbatch = sample_ray_batch(train, cfg.b_depth_rays, self.rng)
            ld = depth_loss(dbatch, self.field, n, self.rng, self.counters)
            total = total + ld * cfg.lambda_d
            ld_val = ld.item()
        value = total.item() + cfg.lambda_p * lp_val
        self._check_finite("B", it, value)
        total.backward()
        f_opt.step()
        d_opt.step()
        terms.update(loss=value, l_r=lr_loss.item(), l_d=ld_val, l_gr=lgr_val, l_p=lp_val,
                     lr=f_opt.lr, lr_ae=d_opt.lr)
        return terms

    def phase_b(self, stop_at=None):
        """Joint optimization of the field and the decoder."""
        cfg = self.config
        if "B.field" not in self.optim:
            self.optim["B.field"] = Adam(self.field.params, lr=cfg.b_field_lr)
            self.optim["B.decoder"] = Adam(self.ae.decoder_params(), lr=cfg.b_ae_lr)
        end = cfg.b_iters if stop_at is None else min(stop_at, cfg.b_iters)
        while self.progress["B"] < end:
            it = self.progress["B"]
            terms = self.phase_b_step(it)
            if self._should_log(it, cfg.b_iters):
                self._record("B", it, **terms)
            self.progress["B"] += 1
        return self.field, self.ae

    # -- phase C ---------------------------------------------------------------
    def prepare_phase_c(self):
        cfg = self.config
        train = self.train_set
        n = cfg.samples
        if self.render_set is None and cfg.gamma < 1.0 and cfg.c_render_per_batch > 0:
            self.render_set = build_render_set(self.field, train.cameras, cfg.render_set_size,
                                               cfg.seed, n, train.near, train.far)
        if self._real_latents is None:
            self._real_latents = [
                renderer.render_latent_image(c, self.field, n, train.near, train.far)[0]
                .values.astype(np.float32)
                for c in train.cameras
            ]

    def phase_c_loss(self, real_idx, render_idx):
        """``gamma * d(S_I) + (1 - gamma) * d(S~_I)`` on one mini-batch."""
        gamma = self.config.gamma
        parts = []
        if gamma > 0 and len(real_idx):
            z = np.stack([self._real_latents[i] for i in real_idx])
            y = np.stack([self.train_set.images[i] for i in real_idx])
            parts.append(dm.mse(self.ae.decode(z), y) * gamma)
        if gamma < 1 and len(render_idx):
            z = np.stack([self.render_set.latents[i] for i in render_idx])
            y = np.stack([self.render_set.images[i] for i in render_idx])
            parts.append(dm.mse(self.ae.decode(z), y) * (1.0 - gamma))
        total = parts[0]
        for p_ in parts[1:]:
            total = total + p_
        return total

    def phase_c(self, stop_at=None):
        """Decoder fine-tuning on real images and RGB renders; the field stays frozen."""
        cfg = self.config
        digest = params_digest(self.field.params)
        self.prepare_phase_c()
        if "C" not in self.optim:
            self.optim["C"] = Adam(self.ae.decoder_params(), lr=cfg.c_lr)
        opt = self.optim["C"]
        end = cfg.c_iters if stop_at is None else min(stop_at, cfg.c_iters)
        n_real = len(self.train_set)
        while self.progress["C"] < end:
            it = self.progress["C"]
            opt.lr = cfg.c_lr * 0.5 ** (it // cfg.c_halve_every)
            real_idx = self.rng.integers(0, n_real, cfg.c_real_per_batch)
            if self.render_set is not None and len(self.render_set):
                render_idx = self.rng.integers(0, len(self.render_set), cfg.c_render_per_batch)
            else:
                render_idx = np.zeros(0, dtype=int)
            opt.zero_grad()
            loss = self.phase_c_loss(real_idx, render_idx)
            self._check_finite("C", it, loss.item())
            loss.backward()
            opt.step()
            if self._should_log(it, cfg.c_iters):
                self._record("C", it, loss=loss.item(), lr=opt.lr)
            self.progress["C"] += 1
        if params_digest(self.field.params) != digest:
            raise AssertionError("phase C modified field parameters")
        return self.ae

    # -- evaluation --------------------------------------------------------------
    def evaluate(self, split="test", latent=True, rgb=True):
        return evaluate(self.dataset.subset(split) if split else self.dataset,
                        self.field, self.ae if latent else None, self.config.samples, rgb=rgb)

    # -- state -------------------------------------------------------------------
    def state_dict(self):
        """``(meta, arrays)`` suitable for :func:`~latent_nerf.sceneio.save_checkpoint`."""
        done = [p for p in self.PHASES if self.progress[p] > 0]
        meta = {
            "kind": "latent-nerf-trainer",
            "config": self.config.to_dict(),
            "progress": dict(self.progress),
            "phase": done[-1] if done else None,
            "completed": list(self.completed),
            "scene": scene_meta(self.dataset),
            "rng": self.rng.bit_generator.state,
            "optim": {k: v.state_meta() for k, v in self.optim.items()},
            "counters": asdict(self.counters),
            "stopgrad": dict(self.stopgrad),
        }
        arrays = {}
        arrays.update(self.field.state_arrays("field"))
        arrays.update(self.ae.state_arrays("ae"))
        for k, opt in self.optim.items():
            arrays.update(opt.state_arrays(f"optim/{k}"))
        return meta, arrays

    def load_state_dict(self, meta, arrays):
        self.config = TrainConfig.from_dict(meta["config"])
        cfg = self.config
        self.field = NeuralField(FieldConfig.from_dict(cfg.field), seed=cfg.seed)
        self.ae = Autoencoder(AEArchitecture.from_dict(cfg.ae), seed=cfg.seed + 1)
        self.field.load_arrays(arrays, "field")
        self.ae.load_arrays(arrays, "ae")
        self.progress = dict(meta["progress"])
        self.completed = list(meta.get("completed", []))
        self.rng = np.random.default_rng()
        self.rng.bit_generator.state = meta["rng"]
        self.counters = LossCounters(**meta["counters"])
        self.stopgrad = dict(meta["stopgrad"])
        groups = {"A": self.ae.params, "B.field": self.field.params,
                  "B.decoder": self.ae.decoder_params(), "C": self.ae.decoder_params()}
        self.optim = {}
        for k, m in meta["optim"].items():
            opt = Adam(groups[k], lr=m["lr"], beta1=m["betas"][0], beta2=m["betas"][1],
                       eps=m["eps"])
            opt.load_state(f"optim/{k}", arrays, m)
            self.optim[k] = opt
        self.render_set = None
        self._real_latents = None

    def mark_completed(self, phase):
        if phase not in self.completed:
            self.completed.append(phase)

    @classmethod
    def from_state(cls, dataset, meta, arrays, **kwargs):
        tr = cls(dataset, TrainConfig.from_dict(meta["config"]), **kwargs)
        tr.load_state_dict(meta, arrays)
        return tr


@dataclass
class LoadedModels:
    field: NeuralField
    ae: Autoencoder
    cameras: list
    ids: list
    splits: list
    near: float
    far: float
    completed: list
    config: TrainConfig


def models_from_checkpoint(meta, arrays):
    """Field, autoencoder and scene cameras stored in a trainer checkpoint."""
    cfg = TrainConfig.from_dict(meta["config"])
    fld = NeuralField(FieldConfig.from_dict(cfg.field), seed=cfg.seed)
    ae = Autoencoder(AEArchitecture.from_dict(cfg.ae), seed=cfg.seed + 1)
    fld.load_arrays(arrays, "field")
    ae.load_arrays(arrays, "ae")
    scene = meta["scene"]
    frames = scene["frames"]
    return LoadedModels(
        fld, ae, [Camera.from_dict(f["camera"]) for f in frames], [f["id"] for f in frames],
        [f["split"] for f in frames], scene["near"], scene["far"],
        list(meta.get("completed", [])), cfg,
    )


def scene_meta(dataset):
    """Cameras, splits and bounds of a dataset, for checkpoints."""
    return {
        "near": float(dataset.near), "far": float(dataset.far),
        "frames": [{"id": fid, "split": sp, "camera": cam.to_dict()}
                   for fid, sp, cam in zip(dataset.ids, dataset.splits, dataset.cameras)],
    }


def evaluate(dataset, field, ae=None, n_samples=64, rgb=True):
    """Per-view PSNR of the RGB path and (when ``ae`` is given) the decoded path."""
    from .metrics import psnr

    out = {"ids": list(dataset.ids)}
    rgb_scores, lat_scores = [], []
    for img, cam in zip(dataset.images, dataset.cameras):
        if rgb:
            pred, _ = renderer.render_rgb_image(cam, field, n_samples, dataset.near, dataset.far)
            rgb_scores.append(psnr(np.clip(pred, 0, 1), img))
        if ae is not None:
            lat, _ = renderer.render_latent_image(cam, field, n_samples, dataset.near, dataset.far)
            with dm.no_grad():
                dec = ae.decode(lat.values.astype(np.float32)).data
            lat_scores.append(psnr(dec, img))
    if rgb:
        out["rgb_psnr"] = rgb_scores
        out["rgb_psnr_mean"] = float(np.mean(rgb_scores)) if rgb_scores else float("nan")
    if ae is not None:
        out["latent_psnr"] = lat_scores
        out["latent_psnr_mean"] = float(np.mean(lat_scores)) if lat_scores else float("nan")
    return out


# -- functional wrappers -----------------------------------------------------------

def phase_a(dataset, ae, config):
    tr = Trainer(dataset, config)
    tr.ae = ae
    return tr.phase_a()


def phase_b(dataset, field, ae, config):
    tr = Trainer(dataset, config)
    tr.field, tr.ae = field, ae
    return tr.phase_b()


def phase_c(dataset, render_set, field, decoder, config):
    tr = Trainer(dataset, config)
    tr.field, tr.ae, tr.render_set = field, decoder, render_set
    return tr.phase_c()


__all__ = [
    "LoadedModels", "LossCounters", "PRESETS", "RayBatch", "RenderSet", "TrainConfig", "Trainer",
    "average_rotations", "build_render_set", "depth_loss", "desk_config", "distortion_loss",
    "evaluate", "extract_patch", "get_preset", "interpolate_cameras", "models_from_checkpoint", "normalized_bins",
    "paper_config", "patch_loss", "patch_rays", "phase_a", "phase_b", "phase_c", "rgb_loss",
    "sample_interpolated_camera", "sample_ray_batch",
]

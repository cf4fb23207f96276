"""Dataset and artifact I/O plus the analytic oracle scene generator.

Stable on-disk formats, each versioned:

* Manifest: JSON object ``{"format": "latent-nerf-manifest", "version": 1,
  "near", "far", "intrinsics", "frames": [...]}``. Each frame has ``id``,
  ``image`` (8-bit PNG path relative to the manifest), ``camera_to_world``
  (4x4 row-major), ``split`` (``train``/``test``) and an optional ``depth``
  path.
* Depth container: ``b"DPTH"``, little-endian ``u32`` width, height, flags,
  then ``width * height`` little-endian float32 values row-major. Flag bit 0
  means a validity bitmask follows (row-major, ``numpy.packbits`` order).
* Checkpoint container: ``b"LNCK"``, ``u32`` version, ``u64`` header length,
  a sorted-key JSON header (metadata and an array table), the raw array
  bytes, then a SHA-256 digest of everything before it.
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import asdict, dataclass, field

import numpy as np
from PIL import Image

from .camera import Camera, check_rigid, look_at
from .errors import ChecksumError, ContractViolation, DimensionError, FormatError, LoadError

MANIFEST_FORMAT = "latent-nerf-manifest"
MANIFEST_VERSION = 1
DEPTH_MAGIC = b"DPTH"
DEPTH_HEADER = struct.Struct("<4sIII")
CKPT_MAGIC = b"LNCK"
CKPT_VERSION = 1
_CKPT_PREFIX = struct.Struct("<4sIQ")
POSE_TOL = 1e-5


# -- datasets ---------------------------------------------------------------

@dataclass
class PosedDataset:
    """Posed images ``{(I_i, Pi_i)}`` with optional exact depth.

    Images are ``H x W x 3`` float32 in ``[0, 1]``. ``depths[i]`` is either
    None or an ``(depth, valid)`` pair of ``H x W`` arrays.
    """

    images: list
    cameras: list
    ids: list
    splits: list
    depths: list = None
    near: float = 0.0
    far: float = 1.0

    def __post_init__(self):
        n = len(self.images)
        if self.depths is None:
            self.depths = [None] * n
        if not (len(self.cameras) == len(self.ids) == len(self.splits) == len(self.depths) == n):
            raise DimensionError("dataset lists must have equal lengths")

    def __len__(self):
        return len(self.images)

    def subset(self, split):
        idx = [i for i, s in enumerate(self.splits) if s == split]
        return PosedDataset(
            [self.images[i] for i in idx], [self.cameras[i] for i in idx],
            [self.ids[i] for i in idx], [self.splits[i] for i in idx],
            [self.depths[i] for i in idx], self.near, self.far,
        )

    def train(self):
        return self.subset("train")

    def test(self):
        return self.subset("test")


def _read_png(path):
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    return arr.astype(np.float32) / 255.0


def _write_png(path, image):
    arr = np.asarray(image)
    if arr.dtype != np.uint8:
        arr = to_uint8(arr)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG", optimize=False)


def to_uint8(image):
    return (np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def write_manifest(path, manifest):
    """Write a manifest dict as deterministic JSON."""
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")


def read_manifest(path):
    try:
        with open(path, encoding="utf-8") as fh:
            manifest = json.load(fh)
    except FileNotFoundError as exc:
        raise LoadError(f"manifest not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise LoadError(f"manifest {path} is not valid JSON: {exc}") from exc
    if manifest.get("format") != MANIFEST_FORMAT:
        raise LoadError(f"{path}: not a {MANIFEST_FORMAT} file")
    if manifest.get("version") != MANIFEST_VERSION:
        raise LoadError(f"{path}: unsupported manifest version {manifest.get('version')}")
    return manifest


def _orthonormalize(c2w):
    """Polar-project a near-rigid pose; poses rigid to round-off are returned unchanged."""
    rot = c2w[:3, :3]
    if np.abs(rot.T @ rot - np.eye(3)).max() <= 1e-12:
        return c2w
    u, _, vt = np.linalg.svd(rot)
    out = c2w.copy()
    out[:3, :3] = u @ vt
    out[3] = (0.0, 0.0, 0.0, 1.0)
    return out


def load_dataset(manifest_path):
    """Load a posed dataset described by a manifest.

    Args:
        manifest_path: path of the manifest JSON file.

    Returns:
        A :class:`PosedDataset` with images in ``[0, 1]``.

    Raises:
        LoadError: on a missing file, a malformed or non-rigid pose, or a
            duplicate frame id.
    """
    manifest = read_manifest(manifest_path)
    root = os.path.dirname(os.path.abspath(manifest_path))
    intr = manifest["intrinsics"]
    images, cameras, ids, splits, depths = [], [], [], [], []
    seen = set()
    for k, frame in enumerate(manifest["frames"]):
        fid = frame.get("id", str(k))
        if fid in seen:
            raise LoadError(f"duplicate frame id {fid!r}")
        seen.add(fid)
        img_path = os.path.join(root, frame["image"])
        if not os.path.exists(img_path):
            raise LoadError(f"frame {fid!r}: image file not found: {img_path}")
        try:
            pose = _orthonormalize(check_rigid(frame["camera_to_world"], POSE_TOL))
        except (ContractViolation, DimensionError, ValueError) as exc:
            raise LoadError(f"frame {fid!r}: malformed pose: {exc}") from exc
        image = _read_png(img_path)
        if image.shape[:2] != (intr["height"], intr["width"]):
            raise LoadError(f"frame {fid!r}: image size {image.shape[:2]} does not match intrinsics")
        depth = None
        if frame.get("depth"):
            d_path = os.path.join(root, frame["depth"])
            if not os.path.exists(d_path):
                raise LoadError(f"frame {fid!r}: depth file not found: {d_path}")
            depth = load_depth(d_path)
        cam = Camera(intr["fx"], intr["fy"], intr["cx"], intr["cy"],
                     intr["width"], intr["height"], pose)
        images.append(image)
        cameras.append(cam)
        ids.append(fid)
        splits.append(frame.get("split", "train"))
        depths.append(depth)
    if not images:
        raise LoadError(f"{manifest_path}: manifest has no frames")
    return PosedDataset(images, cameras, ids, splits, depths,
                        float(manifest["near"]), float(manifest["far"]))


# -- depth container ----------------------------------------------------------

def save_depth(path, depth, valid=None):
    """Write a depth map (and optional validity mask) in the DPTH container."""
    if hasattr(depth, "depth"):
        depth, valid = depth.depth, depth.valid
    d = np.asarray(depth, dtype="<f4")
    if d.ndim != 2:
        raise DimensionError(f"depth map must be 2-D, got {d.shape}")
    h, w = d.shape
    flags = 0 if valid is None else 1
    payload = [DEPTH_HEADER.pack(DEPTH_MAGIC, w, h, flags), d.tobytes(order="C")]
    if valid is not None:
        v = np.asarray(valid, dtype=bool)
        if v.shape != d.shape:
            raise DimensionError("validity mask shape must match the depth map")
        payload.append(np.packbits(v.reshape(-1)).tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(payload))


def load_depth(path):
    """Read a DPTH file.

    Returns:
        ``(depth, valid)``; ``valid`` is None when the file has no mask.

    Raises:
        FormatError: on bad magic or a short file.
    """
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < DEPTH_HEADER.size:
        raise FormatError(f"{path}: file shorter than the depth header")
    magic, w, h, flags = DEPTH_HEADER.unpack_from(blob)
    if magic != DEPTH_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    n = w * h
    end = DEPTH_HEADER.size + 4 * n
    if len(blob) < end:
        raise FormatError(f"{path}: truncated depth payload")
    depth = np.frombuffer(blob, dtype="<f4", count=n, offset=DEPTH_HEADER.size).reshape(h, w)
    depth = depth.astype(np.float32)
    valid = None
    if flags & 1:
        nbytes = (n + 7) // 8
        if len(blob) < end + nbytes:
            raise FormatError(f"{path}: truncated validity mask")
        bits = np.frombuffer(blob, dtype=np.uint8, count=nbytes, offset=end)
        valid = np.unpackbits(bits)[:n].reshape(h, w).astype(bool)
    return depth, valid


# -- checkpoint container -------------------------------------------------------

def checkpoint_bytes(meta, arrays):
    """Serialize ``meta`` (JSON-able) and named arrays into the LNCK container."""
    table = []
    blobs = []
    offset = 0
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        if arr.dtype.byteorder == ">":
            arr = arr.astype(arr.dtype.newbyteorder("<"))
        raw = arr.tobytes(order="C")
        table.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape),
                      "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"meta": meta, "arrays": table}, sort_keys=True,
                        separators=(",", ":")).encode("utf-8")
    body = _CKPT_PREFIX.pack(CKPT_MAGIC, CKPT_VERSION, len(header)) + header + b"".join(blobs)
    return body + hashlib.sha256(body).digest()


def save_checkpoint(path, meta, arrays):
    """Write a checkpoint atomically.

    Args:
        path: destination file. An empty path raises ``FileNotFoundError``.
        meta: JSON-serializable metadata (configs, optimizer counters, RNG
            state, phase marker).
        arrays: mapping of names to numpy arrays.
    """
    if not path:
        raise FileNotFoundError("checkpoint path is empty")
    data = checkpoint_bytes(meta, arrays)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def parse_checkpoint(blob, source="<bytes>"):
    if len(blob) < _CKPT_PREFIX.size + 32:
        raise ChecksumError(f"{source}: checkpoint truncated")
    body, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise ChecksumError(f"{source}: checksum mismatch (truncated or corrupted)")
    magic, version, hlen = _CKPT_PREFIX.unpack_from(body)
    if magic != CKPT_MAGIC:
        raise FormatError(f"{source}: bad checkpoint magic {magic!r}")
    if version != CKPT_VERSION:
        raise FormatError(f"{source}: checkpoint version {version}, expected {CKPT_VERSION}")
    start = _CKPT_PREFIX.size
    header = json.loads(body[start:start + hlen].decode("utf-8"))
    data_start = start + hlen
    arrays = {}
    for entry in header["arrays"]:
        off = data_start + entry["offset"]
        raw = body[off:off + entry["nbytes"]]
        arrays[entry["name"]] = np.frombuffer(raw, dtype=np.dtype(entry["dtype"])).reshape(
            entry["shape"]).copy()
    return header["meta"], arrays


def load_checkpoint(path):
    """Read a checkpoint; returns ``(meta, arrays)``.

    Raises:
        ChecksumError: on truncation or corruption (nothing is returned).
        FormatError: on bad magic or a version mismatch.
    """
    with open(path, "rb") as fh:
        blob = fh.read()
    return parse_checkpoint(blob, path)


# -- analytic oracle scenes -------------------------------------------------------

@dataclass
class Sphere:
    center: tuple
    radius: float
    albedo: tuple = (0.8, 0.8, 0.8)


@dataclass
class Plane:
    """A plane through ``point`` with unit ``normal``; a square of half-size
    ``half_extent`` when given, else unbounded. ``checker`` > 0 sets the tile
    size of a two-tone checkerboard (``albedo`` and ``albedo2``)."""

    point: tuple
    normal: tuple
    albedo: tuple = (0.8, 0.8, 0.8)
    half_extent: float | None = None
    checker: float = 0.0
    albedo2: tuple = (0.3, 0.3, 0.3)


@dataclass
class SceneSpec:
    spheres: list = field(default_factory=list)
    planes: list = field(default_factory=list)
    light_dir: tuple = (0.4, 1.0, 0.6)
    ambient: float = 0.25
    resolution: int = 64
    views: int = 20
    fov_deg: float = 40.0
    ring_radius: float = 3.0
    ring_height: float = 1.2
    ring_arc_deg: float = 120.0
    target: tuple = (0.0, 0.0, 0.0)
    near: float = 1.0
    far: float = 5.5
    test_every: int = 5
    seed: int = 7
    angle_jitter_deg: float = 2.0

    def __post_init__(self):
        self.spheres = [s if isinstance(s, Sphere) else Sphere(**s) for s in self.spheres]
        self.planes = [p if isinstance(p, Plane) else Plane(**p) for p in self.planes]
        if not (self.spheres or self.planes):
            raise ValueError("scene needs at least one primitive")
        if self.resolution <= 0 or self.resolution % 8:
            raise DimensionError(f"resolution {self.resolution} must be a positive multiple of 8")
        if self.views < 1:
            raise ValueError("need at least one view")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def desk_scene_spec(resolution=64, views=20, seed=7):
    """The default desk-scale oracle scene: three spheres on a checkered floor."""
    return SceneSpec(
        spheres=[
            Sphere((0.0, 0.05, 0.0), 0.55, (0.85, 0.25, 0.2)),
            Sphere((0.75, -0.2, 0.45), 0.3, (0.2, 0.6, 0.85)),
            Sphere((-0.7, -0.15, 0.35), 0.35, (0.9, 0.8, 0.25)),
        ],
        planes=[Plane((0.0, -0.5, 0.0), (0.0, 1.0, 0.0), (0.8, 0.8, 0.75), 1.3, 0.65,
                      (0.35, 0.45, 0.35))],
        resolution=resolution, views=views, seed=seed,
    )


def _intersect(spec, origins, dirs):
    """First-hit distance, normal and albedo for unit-direction rays."""
    n = origins.shape[0]
    t_best = np.full(n, np.inf)
    normal = np.zeros((n, 3))
    albedo = np.zeros((n, 3))
    for s in spec.spheres:
        c = np.asarray(s.center, dtype=np.float64)
        oc = origins - c
        b = np.einsum("ij,ij->i", oc, dirs)
        cc = np.einsum("ij,ij->i", oc, oc) - s.radius ** 2
        disc = b * b - cc
        hit = disc >= 0
        sq = np.sqrt(np.where(hit, disc, 0.0))
        t0 = -b - sq
        t1 = -b + sq
        t = np.where(t0 > 1e-9, t0, t1)
        hit &= t > 1e-9
        closer = hit & (t < t_best)
        t_best = np.where(closer, t, t_best)
        p = origins + t[:, None] * dirs
        normal[closer] = (p[closer] - c) / s.radius
        albedo[closer] = s.albedo
    for pl in spec.planes:
        nrm = np.asarray(pl.normal, dtype=np.float64)
        nrm = nrm / np.linalg.norm(nrm)
        p0 = np.asarray(pl.point, dtype=np.float64)
        denom = dirs @ nrm
        with np.errstate(divide="ignore", invalid="ignore"):
            t = ((p0 - origins) @ nrm) / denom
        hit = np.isfinite(t) & (t > 1e-9) & (np.abs(denom) > 1e-12)
        p = origins + np.where(hit, t, 0.0)[:, None] * dirs
        u_axis, v_axis = _plane_axes(nrm)
        rel = p - p0
        pu, pv = rel @ u_axis, rel @ v_axis
        if pl.half_extent is not None:
            hit &= (np.abs(pu) <= pl.half_extent) & (np.abs(pv) <= pl.half_extent)
        closer = hit & (t < t_best)
        t_best = np.where(closer, t, t_best)
        facing = np.where((denom < 0)[:, None], nrm, -nrm)
        normal[closer] = facing[closer]
        if pl.checker > 0:
            parity = (np.floor(pu / pl.checker) + np.floor(pv / pl.checker)) % 2
            col = np.where(parity[:, None] == 0, np.asarray(pl.albedo), np.asarray(pl.albedo2))
        else:
            col = np.broadcast_to(np.asarray(pl.albedo, dtype=np.float64), (n, 3))
        albedo[closer] = col[closer]
    return t_best, normal, albedo


def _plane_axes(nrm):
    helper = np.array([1.0, 0.0, 0.0]) if abs(nrm[0]) < 0.9 else np.array([0.0, 0.0, 1.0])
    u = np.cross(nrm, helper)
    u /= np.linalg.norm(u)
    return u, np.cross(nrm, u)


def trace_rays(spec, origins, dirs):
    """Analytic Lambertian shading of rays.

    Returns:
        ``(colour M x 3, depth M, hit M)``; missed rays are black with depth 0
        and ``hit`` False. Depth is distance along the unit ray.
    """
    origins = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    dirs = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    t, normal, albedo = _intersect(spec, origins, dirs)
    hit = np.isfinite(t)
    light = np.asarray(spec.light_dir, dtype=np.float64)
    light = light / np.linalg.norm(light)
    lambert = np.clip(normal @ light, 0.0, None)
    shade = spec.ambient + (1.0 - spec.ambient) * lambert
    color = np.where(hit[:, None], albedo * shade[:, None], 0.0)
    return np.clip(color, 0.0, 1.0), np.where(hit, t, 0.0), hit


def render_oracle(spec, camera, supersample=1):
    """Exact image, depth and hit mask of ``spec`` seen by ``camera``.

    Args:
        supersample: ``s`` averages colour over an ``s x s`` grid of rays
            inside each pixel (box-filter anti-aliasing); depth and hit
            always come from the pixel-centre ray.
    """
    rows, cols = np.meshgrid(np.arange(camera.height), np.arange(camera.width), indexing="ij")
    rows, cols = rows.reshape(-1), cols.reshape(-1)
    dirs = camera.pixel_directions(rows, cols)
    origins = np.broadcast_to(camera.position, dirs.shape)
    color, depth, hit = trace_rays(spec, origins, dirs)
    if supersample > 1:
        offs = (np.arange(supersample) + 0.5) / supersample - 0.5
        color = np.zeros_like(color)
        for dy in offs:
            for dx in offs:
                jit = np.broadcast_to([dx, dy], (len(rows), 2))
                color += trace_rays(spec, origins, camera.pixel_directions(rows, cols, jit))[0]
        color /= supersample ** 2
    h, w = camera.height, camera.width
    return color.reshape(h, w, 3), depth.reshape(h, w), hit.reshape(h, w)


def ring_cameras(spec):
    """Views spread over an arc of the ring, looking at the scene target."""
    rng = np.random.default_rng(spec.seed)
    arc = np.radians(spec.ring_arc_deg)
    if spec.views == 1:
        base = np.array([0.0])
    else:
        base = np.linspace(-arc / 2, arc / 2, spec.views)
    angles = base + np.radians(spec.angle_jitter_deg) * rng.uniform(-1, 1, spec.views)
    target = np.asarray(spec.target, dtype=np.float64)
    cams = []
    for a in angles:
        eye = target + np.array([spec.ring_radius * np.sin(a), spec.ring_height,
                                 spec.ring_radius * np.cos(a)])
        c2w = look_at(eye, target)
        cams.append(Camera.from_fov(spec.resolution, spec.resolution, spec.fov_deg, c2w))
    return cams


@dataclass
class SyntheticScene:
    spec: SceneSpec
    dataset: PosedDataset
    exact_images: list

    def manifest(self, image_names, depth_names):
        cam0 = self.dataset.cameras[0]
        intr = {k: v for k, v in cam0.to_dict().items() if k != "camera_to_world"}
        frames = []
        for i, cam in enumerate(self.dataset.cameras):
            frames.append({
                "id": self.dataset.ids[i],
                "image": image_names[i],
                "depth": depth_names[i],
                "split": self.dataset.splits[i],
                "camera_to_world": cam.to_dict()["camera_to_world"],
            })
        return {"format": MANIFEST_FORMAT, "version": MANIFEST_VERSION,
                "near": float(self.dataset.near), "far": float(self.dataset.far),
                "intrinsics": intr, "frames": frames, "scene": self.spec.to_dict()}


def generate_synthetic_scene(spec):
    """Ray-trace ``spec`` from every ring camera.

    Images in the returned dataset are quantized to 8 bits (exactly what a
    saved-and-reloaded scene contains); ``exact_images`` keeps the float
    renders. Every ``test_every``-th view is tagged ``test``.
    """
    cams = ring_cameras(spec)
    images, exact, depths, ids, splits = [], [], [], [], []
    for i, cam in enumerate(cams):
        img, depth, hit = render_oracle(spec, cam)
        exact.append(img.astype(np.float32))
        images.append(to_uint8(img).astype(np.float32) / 255.0)
        depths.append((depth.astype(np.float32), hit))
        ids.append(f"{i:03d}")
        test = spec.test_every > 0 and i % spec.test_every == spec.test_every - 1
        splits.append("test" if test else "train")
    ds = PosedDataset(images, cams, ids, splits, depths, spec.near, spec.far)
    return SyntheticScene(spec, ds, exact)


def save_scene(scene, out_dir):
    """Write images, depths and the manifest; returns the manifest path."""
    os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "depth"), exist_ok=True)
    image_names, depth_names = [], []
    for i, fid in enumerate(scene.dataset.ids):
        img_name = f"images/{fid}.png"
        dep_name = f"depth/{fid}.dpth"
        _write_png(os.path.join(out_dir, img_name), scene.exact_images[i])
        depth, valid = scene.dataset.depths[i]
        save_depth(os.path.join(out_dir, dep_name), depth, valid)
        image_names.append(img_name)
        depth_names.append(dep_name)
    path = os.path.join(out_dir, "manifest.json")
    write_manifest(path, scene.manifest(image_names, depth_names))
    return path


def write_frame(path, image):
    _write_png(path, image)


def read_frame(path):
    return _read_png(path)

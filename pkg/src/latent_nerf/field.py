"""Neural scene field returning density, colour and a latent feature vector.

Layout::

    x -> encode -> trunk MLP -> h -+-> density head -> softplus -> sigma
                                   +-> [h, enc(r)] -> colour head -> sigmoid -> c
                  stop_grad(h) ----+-> latent head -> z          (z_source="trunk")
        encode -> stop_grad -------+-> latent head -> z          (z_source="encoding")

Density never sees the view direction. The latent head reads the trunk (or
the encoding) through a gradient stop, so a loss on ``z`` only trains the
latent head; colour and density parameters are untouched by it. Perturbing
colour-head weights never changes ``z``; perturbing the trunk does when
``z_source="trunk"``.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np

from . import diffmath as dm
from .diffmath import Tensor
from .errors import NumericError

_PRIMES = np.array([1, 2654435761, 805459861], dtype=np.uint64)


@dataclass
class FieldConfig:
    n_latent: int = 32
    encoding: str = "fourier"
    pos_freqs: int = 6
    dir_freqs: int = 2
    hash_levels: int = 8
    hash_table_size: int = 2 ** 14
    hash_features: int = 2
    hash_base_res: int = 4
    hash_max_res: int = 64
    trunk_width: int = 64
    trunk_depth: int = 3
    color_width: int = 64
    z_width: int = 64
    z_depth: int = 1
    z_source: str = "trunk"
    z_view_dependent: bool = False
    bbox_min: tuple = (-1.5, -1.5, -1.5)
    bbox_max: tuple = (1.5, 1.5, 1.5)
    debug: bool = False

    def __post_init__(self):
        if self.encoding not in ("fourier", "hashgrid"):
            raise ValueError(f"unknown encoding {self.encoding!r}")
        if self.z_source not in ("trunk", "encoding"):
            raise ValueError(f"unknown z_source {self.z_source!r}")
        self.bbox_min = tuple(float(v) for v in self.bbox_min)
        self.bbox_max = tuple(float(v) for v in self.bbox_max)
        if self.n_latent < 0 or self.trunk_width < 1 or self.trunk_depth < 1:
            raise ValueError("field sizes must be positive")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)


class FieldOutput(NamedTuple):
    sigma: Tensor
    color: Tensor | None
    z: Tensor | None


def fourier_features(x, n_freqs, dtype=None):
    """``[x, sin(2^l pi x), cos(2^l pi x)]`` for ``l < n_freqs``.

    Features are ordered ``x``, then per level the three sines followed by
    the three cosines. ``dtype`` selects the working precision (defaults to
    that of ``x``).
    """
    x = np.asarray(x)
    dtype = np.dtype(dtype or (x.dtype if np.issubdtype(x.dtype, np.floating) else np.float64))
    x = x.astype(dtype, copy=False)
    feats = np.empty(x.shape[:-1] + (x.shape[-1] * (1 + 2 * n_freqs),), dtype=dtype)
    d = x.shape[-1]
    feats[..., :d] = x
    for level in range(n_freqs):
        arg = x * dtype.type((2.0 ** level) * np.pi)
        base = d * (1 + 2 * level)
        np.sin(arg, out=feats[..., base:base + d])
        np.cos(arg, out=feats[..., base + d:base + 2 * d])
    return feats


def hash_resolutions(cfg):
    if cfg.hash_levels == 1:
        return [cfg.hash_base_res]
    growth = np.exp((np.log(cfg.hash_max_res) - np.log(cfg.hash_base_res)) / (cfg.hash_levels - 1))
    return [int(np.floor(cfg.hash_base_res * growth ** lvl)) for lvl in range(cfg.hash_levels)]


def _hash_index(corner, res, table_size):
    if (res + 1) ** 3 <= table_size:
        return corner[..., 0] + (res + 1) * (corner[..., 1] + (res + 1) * corner[..., 2])
    c = corner.astype(np.uint64)
    h = (c[..., 0] * _PRIMES[0]) ^ (c[..., 1] * _PRIMES[1]) ^ (c[..., 2] * _PRIMES[2])
    return (h % np.uint64(table_size)).astype(np.int64)


def hash_grid_encode(x, tables, cfg):
    """Multiresolution hash encoding with trilinear interpolation.

    Args:
        x: ``M x 3`` positions in ``[0, 1]^3``.
        tables: per-level ``T x F`` parameter tensors.

    Returns:
        ``M x (levels * F)`` tensor, differentiable w.r.t. the tables.
    """
    outs = []
    for res, table in zip(hash_resolutions(cfg), tables):
        scaled = x * res
        base = np.minimum(np.floor(scaled).astype(np.int64), res - 1)
        frac = scaled - base
        idx_list, w_list = [], []
        for corner_bits in range(8):
            offs = np.array([(corner_bits >> a) & 1 for a in range(3)], dtype=np.int64)
            corner = base + offs
            wt = np.prod(np.where(offs == 1, frac, 1.0 - frac), axis=-1)
            idx_list.append(_hash_index(corner, res, table.shape[0]))
            w_list.append(wt)
        idx = np.stack(idx_list, axis=1)
        wts = np.stack(w_list, axis=1).astype(table.dtype)
        outs.append(_gather_interp(table, idx, wts))
    return dm.concat(outs, axis=-1)


def _gather_interp(table, idx, wts):
    data = table.data
    out = np.einsum("mc,mcf->mf", wts, data[idx])
    n_rows = data.shape[0]

    def bw(g):
        contrib = wts[:, :, None] * g[:, None, :]
        grad = np.zeros_like(data)
        flat_idx = idx.reshape(-1)
        flat = contrib.reshape(-1, data.shape[1])
        for f in range(data.shape[1]):
            grad[:, f] = np.bincount(flat_idx, weights=flat[:, f], minlength=n_rows)
        return (grad,)

    return Tensor._make(out, (table,), bw)


def _uniform(rng, fan_in, shape, gain=1.0):
    bound = gain * np.sqrt(6.0 / fan_in) / np.sqrt(2.0)
    return rng.uniform(-bound, bound, size=shape)


class NeuralField:
    """The scene field ``f(x, r) = (sigma, c, z)``.

    ``query_count`` counts positions evaluated over the lifetime of the
    object (instrumentation for benchmarking).
    """

    def __init__(self, config=None, seed=0):
        self.config = config or FieldConfig()
        self.query_count = 0
        self.params = {}
        rng = np.random.default_rng(seed)
        cfg = self.config
        dtype = dm.default_dtype()

        def add(name, arr):
            self.params[name] = dm.parameter(np.asarray(arr, dtype=dtype), name=name)

        if cfg.encoding == "hashgrid":
            for lvl in range(cfg.hash_levels):
                add(f"encoding.table{lvl}",
                    rng.uniform(-1e-4, 1e-4, size=(cfg.hash_table_size, cfg.hash_features)))
        enc_dim = self.encoding_dim
        width = cfg.trunk_width
        fan = enc_dim
        for i in range(cfg.trunk_depth):
            add(f"trunk.{i}.w", _uniform(rng, fan, (fan, width), gain=np.sqrt(2)))
            add(f"trunk.{i}.b", np.zeros(width))
            fan = width
        add("density.w", _uniform(rng, width, (width, 1)))
        add("density.b", np.zeros(1))
        dir_dim = 3 * (1 + 2 * cfg.dir_freqs)
        add("color.0.w", _uniform(rng, width + dir_dim, (width + dir_dim, cfg.color_width), gain=np.sqrt(2)))
        add("color.0.b", np.zeros(cfg.color_width))
        add("color.1.w", _uniform(rng, cfg.color_width, (cfg.color_width, 3)))
        add("color.1.b", np.zeros(3))
        if cfg.n_latent > 0:
            fan = (width if cfg.z_source == "trunk" else enc_dim)
            if cfg.z_view_dependent:
                fan += dir_dim
            for i in range(cfg.z_depth):
                add(f"z.{i}.w", _uniform(rng, fan, (fan, cfg.z_width), gain=np.sqrt(2)))
                add(f"z.{i}.b", np.zeros(cfg.z_width))
                fan = cfg.z_width
            add("z.out.w", _uniform(rng, fan, (fan, cfg.n_latent)))
            add("z.out.b", np.zeros(cfg.n_latent))

    # -- parameter groups ---------------------------------------------------
    @property
    def encoding_dim(self):
        cfg = self.config
        if cfg.encoding == "fourier":
            return 3 * (1 + 2 * cfg.pos_freqs)
        return cfg.hash_levels * cfg.hash_features

    def group(self, prefix):
        """Parameters whose path starts with one of the comma-separated prefixes."""
        prefixes = tuple(p + "." for p in prefix.split(","))
        return {k: v for k, v in self.params.items() if k.startswith(prefixes)}

    def density_params(self):
        return self.group("encoding,trunk,density")

    def color_params(self):
        return self.group("color")

    def latent_params(self):
        return self.group("z")

    def rgb_params(self):
        return self.group("encoding,trunk,density,color")

    # -- evaluation ---------------------------------------------------------
    def normalize(self, x):
        lo = np.asarray(self.config.bbox_min)
        hi = np.asarray(self.config.bbox_max)
        xn = (np.asarray(x, dtype=np.float64) - lo) / (hi - lo)
        if self.config.debug and ((xn < 0) | (xn > 1)).any():
            import warnings

            warnings.warn("field query outside the scene bounding box; clamped", stacklevel=3)
        return np.clip(xn, 0.0, 1.0)

    def encode_position(self, x):
        """Encoding of world positions (normalized to the bounding box, then clamped)."""
        cfg = self.config
        xn = self.normalize(x)
        dtype = dm.default_dtype()
        if cfg.encoding == "fourier":
            return Tensor(fourier_features(xn, cfg.pos_freqs, dtype))
        tables = [self.params[f"encoding.table{i}"] for i in range(cfg.hash_levels)]
        return hash_grid_encode(xn, tables, cfg)

    def encode_direction(self, r):
        return Tensor(fourier_features(np.asarray(r), self.config.dir_freqs, dm.default_dtype()))

    def _check_finite(self):
        for name, p in self.params.items():
            if not np.isfinite(p.data).all():
                raise NumericError(f"non-finite values in field parameter {name}")

    def _trunk(self, enc):
        p = self.params
        h = enc
        for i in range(self.config.trunk_depth):
            h = dm.relu(dm.linear(h, p[f"trunk.{i}.w"], p[f"trunk.{i}.b"]))
        return h

    def _density(self, h):
        p = self.params
        return dm.softplus(dm.linear(h, p["density.w"], p["density.b"])).reshape(-1)

    def eval(self, x, r=None, color=True, latent=True):
        """Evaluate the field at ``M`` positions.

        Args:
            x: ``M x 3`` world positions.
            r: ``M x 3`` unit view directions (required for colour or a
                view-dependent latent).
            color, latent: which heads to evaluate.

        Returns:
            :class:`FieldOutput` with ``sigma`` (``M``), ``color`` (``M x 3``)
            and ``z`` (``M x n``); skipped heads are ``None``.
        """
        cfg = self.config
        self._check_finite()
        x = np.asarray(x).reshape(-1, 3)
        self.query_count += x.shape[0]
        enc = self.encode_position(x)
        h = self._trunk(enc)
        sigma = self._density(h)
        p = self.params
        c = None
        d_enc = None
        if color:
            d_enc = self.encode_direction(np.asarray(r).reshape(-1, 3))
            ch = dm.relu(dm.linear(dm.concat([h, d_enc], axis=-1), p["color.0.w"], p["color.0.b"]))
            c = dm.sigmoid(dm.linear(ch, p["color.1.w"], p["color.1.b"]))
        z = None
        if latent and cfg.n_latent > 0:
            zin = h.detach() if cfg.z_source == "trunk" else enc.detach()
            if cfg.z_view_dependent:
                if d_enc is None:
                    d_enc = self.encode_direction(np.asarray(r).reshape(-1, 3))
                zin = dm.concat([zin, d_enc], axis=-1)
            for i in range(cfg.z_depth):
                zin = dm.relu(dm.linear(zin, p[f"z.{i}.w"], p[f"z.{i}.b"]))
            z = dm.linear(zin, p["z.out.w"], p["z.out.b"])
        return FieldOutput(sigma, c, z)

    def density(self, x):
        """Density only; skips the colour and latent heads."""
        self._check_finite()
        x = np.asarray(x).reshape(-1, 3)
        self.query_count += x.shape[0]
        return self._density(self._trunk(self.encode_position(x)))

    # -- state ------------------------------------------------------------------
    def state_arrays(self, prefix="field"):
        return {f"{prefix}/{k}": v.data for k, v in self.params.items()}

    def load_arrays(self, arrays, prefix="field"):
        for k, v in self.params.items():
            v.data = np.array(arrays[f"{prefix}/{k}"], dtype=v.data.dtype)


def eval_field(field_, x, r):
    """Functional form of :meth:`NeuralField.eval` with every head enabled."""
    return field_.eval(x, r)


def eval_field_density_only(field_, x):
    return field_.density(x)


def encode_position(x, config, tables=None):
    """Encode positions already normalized to ``[0, 1]^3``."""
    xn = np.clip(np.asarray(x, dtype=np.float64), 0.0, 1.0)
    if config.encoding == "fourier":
        return fourier_features(xn, config.pos_freqs)
    return hash_grid_encode(xn, tables, config).data

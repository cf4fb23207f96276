"""Residual convolutional autoencoder with 8x spatial compression.

Encoder: ``C5, RBIN, HD, RBIN, HD, RBIN, HD, RBIN, C1``.
Decoder: ``C1, RBIN, HU, RBIN, HU, RBIN, HU, RBIN, C1, sigmoid``.

``C5`` is conv5x5-norm-ELU, ``C1`` a plain 1x1 convolution, ``HD``/``HU``
bilinear halving/doubling and ``RBIN`` two residual blocks
``x + IN(conv3(ELU(IN(conv3(x)))))``. The width list gives the output
channels of the first ``C`` block and of each ``RBIN``; when a residual
block changes width its skip path is a 1x1 projection. All convolutions use
same-padding, so only ``HD``/``HU`` change resolution. Norm is instance
normalization. Tensors are channel-last: images ``[N x] H x W x 3`` in
``[0, 1]``, latent maps ``[N x] h x w x n``.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import diffmath as dm
from .diffmath.ops import conv2d_nhwc
from .errors import DimensionError

DOWNSAMPLE = 8


@dataclass
class AEArchitecture:
    n_latent: int = 32
    encoder_widths: tuple = (32, 128, 128, 256, 256)
    decoder_widths: tuple = (256, 256, 128, 128, 32)
    blocks_per_rbin: int = 2
    norm_eps: float = 1e-5

    def __post_init__(self):
        self.encoder_widths = tuple(int(w) for w in self.encoder_widths)
        self.decoder_widths = tuple(int(w) for w in self.decoder_widths)
        if len(self.encoder_widths) != 5 or len(self.decoder_widths) != 5:
            raise ValueError("width lists need 5 entries (first C block + 4 RBIN)")

    @property
    def encoder_blocks(self):
        return ["C5", "RBIN", "HD", "RBIN", "HD", "RBIN", "HD", "RBIN", "C1"]

    @property
    def decoder_blocks(self):
        return ["C1", "RBIN", "HU", "RBIN", "HU", "RBIN", "HU", "RBIN", "C1", "sigmoid"]

    def scaled(self, factor):
        """Same layout with every width multiplied by ``factor``."""
        return AEArchitecture(
            self.n_latent,
            tuple(max(1, int(round(w * factor))) for w in self.encoder_widths),
            tuple(max(1, int(round(w * factor))) for w in self.decoder_widths),
            self.blocks_per_rbin,
            self.norm_eps,
        )

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def _conv_init(rng, c_out, c_in, k, gain=np.sqrt(2.0)):
    bound = gain * np.sqrt(3.0 / (c_in * k * k))
    return rng.uniform(-bound, bound, size=(c_out, c_in, k, k))


class Autoencoder:
    """Encoder ``E`` and decoder ``D`` sharing one parameter dict."""

    def __init__(self, arch=None, seed=0):
        self.arch = arch or AEArchitecture()
        self.params = {}
        self._dtype = dm.default_dtype()
        rng = np.random.default_rng(seed)
        a = self.arch
        ew, dw = a.encoder_widths, a.decoder_widths
        self._conv("enc.c5", rng, ew[0], 3, 5, norm=True)
        c = ew[0]
        for i in range(4):
            c = self._rbin(f"enc.rbin{i}", rng, c, ew[i + 1])
        self._conv("enc.c1", rng, a.n_latent, c, 1, bias=True, gain=1.0)
        self._conv("dec.c1", rng, dw[0], a.n_latent, 1, bias=True, gain=1.0)
        c = dw[0]
        for i in range(4):
            c = self._rbin(f"dec.rbin{i}", rng, c, dw[i + 1])
        self._conv("dec.out", rng, 3, c, 1, bias=True, gain=1.0)

    # -- construction ----------------------------------------------------
    def _add(self, name, arr):
        self.params[name] = dm.parameter(np.asarray(arr, dtype=self._dtype), name=name)

    def _conv(self, name, rng, c_out, c_in, k, bias=False, norm=False, gain=np.sqrt(2.0)):
        self._add(f"{name}.w", _conv_init(rng, c_out, c_in, k, gain))
        if bias:
            self._add(f"{name}.b", np.zeros(c_out))
        if norm:
            self._add(f"{name}.norm.scale", np.ones(c_out))
            self._add(f"{name}.norm.shift", np.zeros(c_out))

    def _rbin(self, name, rng, c_in, c_out):
        for b in range(self.arch.blocks_per_rbin):
            prefix = f"{name}.block{b}"
            self._conv(f"{prefix}.conv0", rng, c_out, c_in, 3, norm=True)
            self._conv(f"{prefix}.conv1", rng, c_out, c_out, 3, norm=True, gain=1.0)
            if c_in != c_out:
                self._conv(f"{prefix}.proj", rng, c_out, c_in, 1, gain=1.0)
            c_in = c_out
        return c_out

    # -- parameter groups ------------------------------------------------
    def encoder_params(self):
        return {k: v for k, v in self.params.items() if k.startswith("enc.")}

    def decoder_params(self):
        return {k: v for k, v in self.params.items() if k.startswith("dec.")}

    # -- blocks --------------------------------------------------------------
    def _norm(self, x, name):
        p = self.params
        return dm.instance_norm(x, p[f"{name}.norm.scale"], p[f"{name}.norm.shift"],
                                self.arch.norm_eps, channels_last=True)

    def _apply_conv(self, x, name, pad):
        p = self.params
        return conv2d_nhwc(x, p[f"{name}.w"], p.get(f"{name}.b"), pad=pad)

    def residual_block(self, x, prefix):
        y = self._norm(self._apply_conv(x, f"{prefix}.conv0", 1), f"{prefix}.conv0")
        y = dm.elu(y)
        y = self._norm(self._apply_conv(y, f"{prefix}.conv1", 1), f"{prefix}.conv1")
        if f"{prefix}.proj.w" in self.params:
            skip = self._apply_conv(x, f"{prefix}.proj", 0)
        else:
            skip = x
        return skip + y

    def _rbin_apply(self, x, name):
        for b in range(self.arch.blocks_per_rbin):
            x = self.residual_block(x, f"{name}.block{b}")
        return x

    # -- public API ------------------------------------------------------------
    def _batched(self, x, channels, what):
        x = dm.as_tensor(x, dtype=self._dtype)
        if x.ndim == 3:
            return x.reshape(1, *x.shape), True
        if x.ndim != 4 or x.shape[-1] != channels:
            raise DimensionError(f"{what} expects [N x] H x W x {channels}, got {x.shape}")
        return x, False

    def encode(self, image):
        """``[N x] H x W x 3`` image in ``[0, 1]`` to an ``[N x] H/8 x W/8 x n`` latent map."""
        x, squeeze = self._batched(image, 3, "encoder")
        if x.shape[-1] != 3:
            raise DimensionError(f"encoder expects 3 channels, got {x.shape}")
        h, w = x.shape[1:3]
        if h % DOWNSAMPLE or w % DOWNSAMPLE or h == 0 or w == 0:
            raise DimensionError(f"image size {h}x{w} must be a positive multiple of {DOWNSAMPLE}")
        x = dm.elu(self._norm(self._apply_conv(x, "enc.c5", 2), "enc.c5"))
        for i in range(4):
            x = self._rbin_apply(x, f"enc.rbin{i}")
            if i < 3:
                x = dm.bilinear_resize(x, 0.5, channels_last=True)
        z = self._apply_conv(x, "enc.c1", 0)
        return z.reshape(z.shape[1:]) if squeeze else z

    def decode(self, latent):
        """``[N x] h x w x n`` latent map to an ``[N x] 8h x 8w x 3`` image in ``[0, 1]``."""
        z, squeeze = self._batched(latent, self.arch.n_latent, "decoder")
        if z.shape[-1] != self.arch.n_latent:
            raise DimensionError(f"decoder expects {self.arch.n_latent} channels, got {z.shape}")
        if z.shape[1] < 1 or z.shape[2] < 1:
            raise DimensionError("latent map must be at least 1x1")
        x = self._apply_conv(z, "dec.c1", 0)
        for i in range(4):
            x = self._rbin_apply(x, f"dec.rbin{i}")
            if i < 3:
                x = dm.bilinear_resize(x, 2.0, channels_last=True)
        y = dm.sigmoid(self._apply_conv(x, "dec.out", 0))
        return y.reshape(y.shape[1:]) if squeeze else y

    def reconstruct(self, image):
        return self.decode(self.encode(image))

    # -- state ---------------------------------------------------------------
    def state_arrays(self, prefix="ae"):
        return {f"{prefix}/{k}": v.data for k, v in self.params.items()}

    def load_arrays(self, arrays, prefix="ae"):
        for k, v in self.params.items():
            v.data = np.array(arrays[f"{prefix}/{k}"], dtype=v.data.dtype)

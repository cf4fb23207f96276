import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from latent_nerf import diffmath as dm  # noqa: E402
from latent_nerf import sceneio  # noqa: E402
from latent_nerf.autoencoder import AEArchitecture, Autoencoder  # noqa: E402
from latent_nerf.field import FieldConfig, NeuralField  # noqa: E402

TINY_FIELD = dict(n_latent=4, pos_freqs=3, dir_freqs=1, trunk_width=16, trunk_depth=2,
                  color_width=16, z_width=16, bbox_min=(-2, -2, -2), bbox_max=(2, 2, 2))
TINY_AE = AEArchitecture(n_latent=4, encoder_widths=(4, 8, 8, 8, 8),
                         decoder_widths=(8, 8, 8, 8, 4))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def f64():
    with dm.precision(np.float64):
        yield


def tiny_field(seed=0, **kw):
    cfg = dict(TINY_FIELD)
    cfg.update(kw)
    return NeuralField(FieldConfig(**cfg), seed=seed)


def tiny_ae(seed=0, n_latent=4):
    arch = TINY_AE if n_latent == 4 else AEArchitecture(
        n_latent, TINY_AE.encoder_widths, TINY_AE.decoder_widths)
    return Autoencoder(arch, seed=seed)


@pytest.fixture(scope="session")
def small_scene():
    """16x16, 6-view oracle scene (fast enough for per-test training)."""
    spec = sceneio.desk_scene_spec(resolution=16, views=6, seed=3)
    spec.test_every = 3
    return sceneio.generate_synthetic_scene(spec)


@pytest.fixture(scope="session")
def desk_scene():
    return sceneio.generate_synthetic_scene(sceneio.desk_scene_spec())


def slab_functions(profile):
    """``sigma(t)`` and ``value(t)`` for slabs ``(t_start, t_end, sigma, value)``.

    Boundaries carry a 1e-9 slack so samples placed exactly on a boundary
    (up to round-off in ``|x - o|``) fall in the slab that starts there.
    """
    dim = len(np.atleast_1d(profile[0][3]))

    def sigma_fn(t):
        out = np.zeros_like(t)
        for a, b, s, _ in profile:
            out = np.where((t >= a - 1e-9) & (t < b - 1e-9), s, out)
        return out

    def value_fn(t):
        out = np.zeros(np.shape(t) + (dim,))
        for a, b, _, v in profile:
            out[(t >= a - 1e-9) & (t < b - 1e-9)] = v
        return out

    return sigma_fn, value_fn


class AnalyticField:
    """Field whose density and value depend only on the distance ``t`` from ``origin``.

    Rays must start at ``origin`` with unit directions, so ``t`` is the ray
    parameter. ``value_fn`` returns ``M x D``; colour is its first three
    channels and ``z`` all of them.
    """

    def __init__(self, sigma_fn, value_fn, origin=(0.0, 0.0, 0.0)):
        self.sigma_fn = sigma_fn
        self.value_fn = value_fn
        self.origin = np.asarray(origin, dtype=np.float64)
        self.query_count = 0

    @classmethod
    def slabs(cls, profile, origin=(0.0, 0.0, 0.0)):
        return cls(*slab_functions(profile), origin=origin)

    def eval(self, x, r=None, color=True, latent=True):
        from latent_nerf.field import FieldOutput

        x = np.asarray(x, dtype=np.float64).reshape(-1, 3)
        self.query_count += len(x)
        t = np.linalg.norm(x - self.origin, axis=1)
        dtype = dm.default_dtype()
        sigma = dm.Tensor(np.asarray(self.sigma_fn(t), dtype=dtype))
        val = np.asarray(self.value_fn(t), dtype=dtype).reshape(len(t), -1)
        c = dm.Tensor(val[:, :3]) if color else None
        z = dm.Tensor(val) if latent else None
        return FieldOutput(sigma, c, z)


def oracle_sequence(resolution=64, views=13, arc_deg=24.0, supersample=4):
    """Anti-aliased oracle frames on a 2-degree-step arc with exact depth.

    Returns:
        ``(frames, depths, cameras, spec)``; depths are ``(depth, hit)`` pairs.
    """
    spec = sceneio.desk_scene_spec(resolution=resolution, views=views)
    spec.ring_arc_deg = arc_deg
    spec.angle_jitter_deg = 0.0
    cams = sceneio.ring_cameras(spec)
    frames, depths = [], []
    for cam in cams:
        img, depth, hit = sceneio.render_oracle(spec, cam, supersample)
        frames.append(img)
        depths.append((depth, hit))
    return frames, depths, cams, spec


@pytest.fixture(scope="session")
def rcc_sequence():
    return oracle_sequence()


# -- acceptance reporting -----------------------------------------------------------

ACCEPTANCE = {}


def record_criterion(number, title, ok, detail):
    """Store and print one acceptance line; returns ``ok`` for the caller's assert."""
    line = f"criterion {number:>2} {'PASS' if ok else 'FAIL'}  {title}: {detail}"
    ACCEPTANCE[number] = line
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])

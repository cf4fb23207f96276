import math

import numpy as np
import pytest

from latent_nerf import diffmath as dm
from latent_nerf import renderer
from latent_nerf.camera import Camera, look_at
from latent_nerf.errors import ContractViolation, DimensionError
from latent_nerf.renderer import (Rays, generate_ray, render_color, render_feature,
                                  render_latent_image, render_rgb_image, render_rays,
                                  sample_stratified, transmittance_weights)

import oracles
from conftest import AnalyticField, slab_functions, tiny_field

NEAR, FAR, N = 0.0, 4.0, 512
STEP = (FAR - NEAR) / N


def grid(k):
    """Position of stratum midpoint ``k`` for the N=512 oracle rays."""
    return NEAR + (k + 0.5) * STEP


def _axis_rays(count=1):
    d = np.tile([[0.0, 0.0, -1.0]], (count, 1))
    return Rays(np.zeros((count, 3)), d, NEAR, FAR)


def _camera(size=16, eye=(0.0, 0.0, 3.0)):
    return Camera.from_fov(size, size, 40.0, look_at(eye, (0.0, 0.0, 0.0)))


# piecewise-constant media whose slab boundaries sit on the sample grid
MEDIA = [
    [(grid(100), grid(180), 1.5, (0.9, 0.2, 0.1, -1.0))],
    [(grid(50), grid(90), 0.7, (0.2, 0.8, 0.3, 2.0)),
     (grid(200), grid(260), 3.0, (0.1, 0.1, 0.9, 0.5))],
    [(grid(10), grid(40), 0.2, (0.5, 0.5, 0.5, 0.0)),
     (grid(40), grid(64), 8.0, (1.0, 0.0, 0.0, 4.0)),
     (grid(300), grid(511), 50.0, (0.0, 1.0, 0.0, -3.0))],
]


# -- rays and sampling ------------------------------------------------------------

def test_principal_ray_points_down_minus_z():
    # pixel (3, 3) has its centre (3.5, 3.5) on the principal point
    cam = Camera(10.0, 10.0, 3.5, 3.5, 8, 8, np.eye(4))
    ray = generate_ray(cam, (3, 3))
    np.testing.assert_allclose(ray.directions[0], [0.0, 0.0, -1.0], atol=1e-15)
    np.testing.assert_array_equal(ray.origins[0], 0.0)


def test_project_round_trip(rng):
    cam = _camera(32, eye=(0.5, 1.0, 3.0))
    for _ in range(20):
        row, col = rng.integers(0, 32, 2)
        ray = generate_ray(cam, (row, col), near=0.5, far=6.0)
        for dist in (0.3, 2.0, 7.5):
            u, v, depth = cam.project(ray.point_at(np.array([dist])))
            assert u[0] == pytest.approx(col, abs=1e-9)
            assert v[0] == pytest.approx(row, abs=1e-9)
            assert depth[0] == pytest.approx(dist, rel=1e-12)


def test_generate_ray_outside_image():
    with pytest.raises(DimensionError):
        generate_ray(_camera(8), (8, 0))


def test_stratified_midpoints():
    t = sample_stratified(Rays([0, 0, 0], [0, 0, -1], 0.0, 1.0), 2)
    np.testing.assert_allclose(t, [[0.25, 0.75]])


def test_stratified_samples_stay_in_strata(rng):
    rays = Rays(np.zeros((50, 3)), np.tile([0, 0, -1.0], (50, 1)), 1.0, 3.0)
    t = sample_stratified(rays, 8, rng)
    k = np.arange(8)
    assert ((t >= 1.0 + k * 0.25) & (t <= 1.0 + (k + 1) * 0.25)).all()
    assert (np.diff(t, axis=1) > 0).all()


def test_stratified_monte_carlo_mean(rng):
    rays = Rays(np.zeros((100_000, 3)), np.tile([0, 0, -1.0], (100_000, 1)), 2.0, 5.0)
    t = sample_stratified(rays, 1, rng)[:, 0]
    sd = 3.0 / math.sqrt(12) / math.sqrt(len(t))
    assert abs(t.mean() - 3.5) < 3 * sd


def test_rays_reject_empty_interval():
    with pytest.raises(ContractViolation):
        Rays([0, 0, 0], [0, 0, -1], 2.0, 2.0)


# -- transmittance ------------------------------------------------------------------

def test_zero_density_zero_weights():
    w = transmittance_weights(np.zeros((2, 5)), np.full((2, 5), 0.1)).data
    np.testing.assert_array_equal(w, 0.0)
    np.testing.assert_array_equal(renderer.transmittance(np.zeros((2, 5)), np.full((2, 5), 0.1)), 1.0)


def test_opaque_first_sample():
    w = transmittance_weights(np.array([[1e6, 1.0, 1.0]]), np.full((1, 3), 0.1)).data[0]
    assert w[0] == pytest.approx(1.0) and w[1] < 1e-12 and w[2] < 1e-12


def test_homogeneous_single_interval_closed_form_and_quadrature():
    w = transmittance_weights(np.array([[2.0]], np.float64), np.array([[0.5]])).data[0, 0]
    assert w == pytest.approx(1 - math.exp(-1), rel=1e-12)
    assert w == pytest.approx(0.6321, abs=1e-4)
    _, opacity, _ = oracles.riemann_render(lambda t: np.full_like(t, 2.0),
                                           lambda t: np.ones_like(t), 0.0, 0.5, n=10_000)
    assert opacity == pytest.approx(w, abs=1e-6)


def test_negative_density_is_contract_violation():
    with pytest.raises(ContractViolation):
        transmittance_weights(np.array([[0.1, -0.2]]), np.ones((1, 2)))


def test_transmittance_gradient_float64(rng):
    with dm.precision(np.float64):
        sigma = dm.parameter(rng.gamma(1.0, 1.0, size=(3, 6)))
        delta = rng.uniform(0.05, 0.3, size=(3, 6))
        coef = rng.normal(size=(3, 6))
        err = dm.grad_check(lambda: (transmittance_weights(sigma, delta) * coef).sum(), sigma, h=1e-6)
    assert err < 1e-6


# -- quadrature against the dense oracle ------------------------------------------

@pytest.mark.parametrize("profile", MEDIA, ids=["one-slab", "two-slab", "three-slab"])
def test_render_matches_dense_quadrature(profile):
    fld = AnalyticField.slabs(profile)
    sigma_fn, value_fn = slab_functions(profile)
    want_val, want_op, want_tw = oracles.riemann_render(sigma_fn, value_fn, NEAR, FAR, n=400_000)
    z, depth, opacity = render_feature(_axis_rays(), fld, N)
    c, depth_c, opacity_c = render_color(_axis_rays(), fld, N)
    np.testing.assert_allclose(z.data[0], want_val, atol=1e-4)
    np.testing.assert_allclose(c.data[0], want_val[:3], atol=1e-4)
    assert opacity.data[0] == pytest.approx(want_op, abs=1e-4)
    # quadrature depth places each interval's mass at its left end: bias below one stratum
    assert depth.data[0] == pytest.approx(want_tw / max(want_op, 1e-6), abs=STEP)
    np.testing.assert_array_equal(depth.data, depth_c.data)


def test_quadrature_error_shrinks_with_samples():
    # smooth bump: sigma = 3 exp(-(t-2)^2 / 0.1), value = sin(t)
    sig = lambda t: 3.0 * np.exp(-((t - 2.0) ** 2) / 0.1)  # noqa: E731
    val = lambda t: np.stack([np.sin(t), np.cos(t), t / 4, t], axis=-1)  # noqa: E731
    want, _, _ = oracles.riemann_render(sig, val, NEAR, FAR, n=400_000)
    fld = AnalyticField(sig, val)
    errors = []
    with dm.precision(np.float64):
        for n in (16, 64, 256, 512):
            z, _, _ = render_feature(_axis_rays(), fld, n)
            errors.append(np.abs(z.data[0] - want).max())
    assert all(a > b for a, b in zip(errors, errors[1:])), errors


def test_constant_value_behind_opaque_surface():
    fld = AnalyticField.slabs([(grid(200), FAR + 1, 1e4, (0.3, 0.6, 0.9, 7.0))])
    z, depth, opacity = render_feature(_axis_rays(), fld, N)
    np.testing.assert_allclose(z.data[0], [0.3, 0.6, 0.9, 7.0], rtol=1e-5)
    assert opacity.data[0] == pytest.approx(1.0)
    assert depth.data[0] == pytest.approx(grid(200), abs=1e-4)


def test_empty_medium_renders_zero():
    fld = AnalyticField.slabs([(0.0, 1.0, 0.0, (1.0, 1.0, 1.0, 1.0))])
    z, depth, opacity = render_feature(_axis_rays(3), fld, 32)
    c, _, _ = render_color(_axis_rays(3), fld, 32)
    np.testing.assert_array_equal(z.data, 0.0)
    np.testing.assert_array_equal(c.data, 0.0)
    np.testing.assert_array_equal(opacity.data, 0.0)
    np.testing.assert_array_equal(depth.data, 0.0)


def test_white_background_option():
    fld = AnalyticField.slabs([(0.0, 1.0, 0.0, (1.0, 1.0, 1.0, 1.0))])
    c, _, _ = render_color(_axis_rays(), fld, 8, background=1.0)
    np.testing.assert_allclose(c.data, 1.0)


def test_weight_sums_in_unit_interval_on_random_rays(rng):
    fld = tiny_field(seed=3)
    for p in fld.params.values():
        p.data *= 3.0
    n_rays = 100_000
    d = rng.normal(size=(n_rays, 3))
    rays = Rays(rng.uniform(-1, 1, (n_rays, 3)), d / np.linalg.norm(d, axis=1, keepdims=True), 0.1, 3.0)
    with dm.no_grad():
        res = render_rays(fld, rays, 8, rng, color=False)
    s = res.weights.data.sum(axis=1)
    assert (s >= 0).all() and (s <= 1 + 1e-6).all()


def test_color_and_latent_share_weights_bitwise(rng):
    fld = tiny_field()
    cam = _camera(16)
    rays = renderer.camera_rays(cam, 1.0, 5.0)
    a = render_rays(fld, rays, 16, np.random.default_rng(5), color=True, latent=False)
    b = render_rays(fld, rays, 16, np.random.default_rng(5), color=False, latent=True)
    np.testing.assert_array_equal(a.weights.data, b.weights.data)


def test_detached_density_blocks_sigma_gradient(rng):
    fld = tiny_field()
    rays = renderer.camera_rays(_camera(8), 1.0, 5.0)
    res = render_rays(fld, rays, 8, None, color=False, latent=True, detach_density=True)
    (res.z ** 2).sum().backward()
    for p in fld.density_params().values():
        assert p.grad is None or not p.grad.any()


# -- images --------------------------------------------------------------------------

def test_latent_image_shape_and_query_count():
    fld = tiny_field()
    cam = _camera(32)
    fld.query_count = 0
    lat, depth = render_latent_image(cam, fld, n=8, near=1.0, far=5.0)
    assert lat.values.shape == (4, 4, 4) and lat.channels == 4
    assert depth.depth.shape == (4, 4)
    assert fld.query_count == 4 * 4 * 8
    assert lat.camera is cam


def test_latent_to_rgb_query_ratio_is_64(rng):
    fld = tiny_field()
    cam = _camera(64)
    fld.query_count = 0
    render_latent_image(cam, fld, n=4, near=1.0, far=5.0)
    lat_q = fld.query_count
    fld.query_count = 0
    render_rgb_image(cam, fld, n=4, near=1.0, far=5.0)
    assert fld.query_count == 64 * lat_q


def test_latent_image_512_target_shape():
    fld = tiny_field()
    lat, _ = render_latent_image(_camera(512), fld, n=1, near=1.0, far=5.0, chunk=8192)
    assert lat.values.shape == (64, 64, 4)


def test_latent_image_rejects_non_multiple_of_8():
    with pytest.raises(DimensionError):
        render_latent_image(_camera(12), tiny_field(), n=4)


def test_empty_scene_images():
    empty = AnalyticField(lambda t: np.zeros_like(t), lambda t: np.ones(t.shape + (4,)))
    cam = _camera(16)
    img, dmap = render_rgb_image(cam, empty, n=8, near=1.0, far=5.0)
    lat, ldmap = render_latent_image(cam, empty, n=8, near=1.0, far=5.0)
    np.testing.assert_array_equal(img, 0.0)
    np.testing.assert_array_equal(lat.values, 0.0)
    assert not dmap.valid.any() and not ldmap.valid.any()


def test_opaque_plane_renders_albedo():
    albedo = (0.2, 0.7, 0.4)
    cam = Camera.from_fov(16, 16, 30.0, np.eye(4))

    class Plane:
        query_count = 0

        def eval(self, x, r=None, color=True, latent=True):
            from latent_nerf.field import FieldOutput

            z = np.asarray(x)[:, 2]
            sigma = np.where(z < -2.0, 1e4, 0.0).astype(np.float32)
            col = np.tile(np.asarray(albedo, np.float32), (len(z), 1))
            return FieldOutput(dm.Tensor(sigma), dm.Tensor(col), None)

    img, dmap = render_rgb_image(cam, Plane(), n=256, near=0.5, far=6.0)
    np.testing.assert_allclose(img, np.broadcast_to(albedo, img.shape), rtol=1e-5)
    assert dmap.valid.all()


def test_rgb_image_matches_per_ray_render(rng):
    fld = tiny_field(seed=4)
    cam = _camera(16)
    img, dmap = render_rgb_image(cam, fld, n=16, near=1.0, far=5.0, chunk=37)
    for row, col in rng.integers(0, 16, (5, 2)):
        ray = generate_ray(cam, (row, col), near=1.0, far=5.0)
        c, d, _ = render_color(ray, fld, 16)
        np.testing.assert_allclose(img[row, col], c.data[0], rtol=1e-5, atol=1e-6)
        assert dmap.depth[row, col] == pytest.approx(float(d.data[0]), rel=1e-5)


def test_depth_map_threshold():
    dm_ = renderer.DepthMap.from_opacity(np.ones((2, 2)), np.array([[0.1, 0.5], [0.9, 0.49]]))
    np.testing.assert_array_equal(dm_.valid, [[False, True], [True, False]])

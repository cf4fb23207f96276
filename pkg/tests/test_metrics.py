import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from latent_nerf import metrics
from latent_nerf.camera import Camera, look_at
from latent_nerf.errors import DimensionError
from latent_nerf.renderer import DepthMap

from conftest import tiny_ae, tiny_field

F = 32.0


def _cam(pos=(0.0, 0.0, 0.0), rot=None, size=32):
    c2w = np.eye(4)
    if rot is not None:
        c2w[:3, :3] = rot
    c2w[:3, 3] = pos
    return Camera(F, F, size / 2, size / 2, size, size, c2w)


def _plane_depth(cam, d):
    """Distance along each pixel ray to the plane ``z = -d`` for an axis-aligned camera."""
    rows, cols = np.meshgrid(np.arange(cam.height), np.arange(cam.width), indexing="ij")
    dirs = cam.pixel_directions(rows, cols)
    return d / -dirs[..., 2]


# -- psnr --------------------------------------------------------------------------

def test_psnr_identical_is_infinite():
    a = np.random.default_rng(0).random((4, 4, 3))
    assert metrics.psnr(a, a) == math.inf


def test_psnr_uniform_error_tenth_is_20db():
    a = np.full((8, 8, 3), 0.3)
    assert metrics.psnr(a, a + 0.1) == pytest.approx(20.0, abs=1e-6)


def test_psnr_uniform_error_half():
    assert metrics.psnr(np.zeros((5, 5)), np.full((5, 5), 0.5)) == pytest.approx(6.0206, abs=1e-4)


def test_psnr_peak_scaling():
    assert metrics.psnr(np.zeros(4), np.full(4, 25.5), peak=255) == pytest.approx(20.0, abs=1e-9)


def test_psnr_errors():
    with pytest.raises(DimensionError):
        metrics.psnr(np.zeros((2, 2)), np.zeros((2, 3)))
    with pytest.raises(ValueError):
        metrics.psnr(np.zeros(2), np.ones(2), peak=0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_psnr_symmetric(seed):
    r = np.random.default_rng(seed)
    a, b = r.random((6, 6, 3)), r.random((6, 6, 3))
    assert metrics.psnr(a, b) == metrics.psnr(b, a)


def test_psnr_decreases_with_noise_amplitude():
    r = np.random.default_rng(1)
    a = r.random((16, 16, 3))
    noise = r.normal(size=a.shape)
    vals = [metrics.psnr(a, a + s * noise) for s in (0.01, 0.02, 0.05, 0.1, 0.3)]
    assert all(x > y for x, y in zip(vals, vals[1:]))


def test_report_value_caps_infinity():
    assert metrics.report_value(math.inf) == 99.0
    assert metrics.report_value(31.5) == 31.5
    assert metrics.report_value(None) is None
    rec = metrics.metric_record("psnr", math.inf, frames=[0, 3])
    assert rec == {"version": 1, "metric": "psnr", "value": 99.0, "frames": [0, 3]}


# -- reprojection --------------------------------------------------------------------

def test_identity_reprojection(rng):
    cam = _cam()
    img = rng.random((32, 32, 3))
    depth = _plane_depth(cam, 2.0)
    warped, mask = metrics.reproject(img, depth, cam, cam)
    assert mask.all()
    assert np.mean((warped[mask] - img[mask]) ** 2) < 1e-3
    np.testing.assert_array_equal(warped, img)


@pytest.mark.parametrize("t,d", [(0.125, 2.0), (0.05, 1.5), (-0.3, 4.0)])
def test_translation_shift_matches_pinhole(t, d):
    src, dst = _cam(), _cam((t, 0.0, 0.0))
    u, v, dist = metrics.warp_coordinates(_plane_depth(src, d), src, dst)
    cols = np.arange(32)[None, :].repeat(32, 0)
    assert np.abs((cols - u) - F * t / d).max() < 0.1
    np.testing.assert_allclose(v, np.arange(32)[:, None].repeat(32, 1), atol=1e-9)
    assert (dist > 0).all()


def test_integer_shift_moves_texture():
    src, dst = _cam(), _cam((0.125, 0.0, 0.0))
    img = np.random.default_rng(2).random((32, 32, 3))
    warped, mask = metrics.reproject(img, _plane_depth(src, 2.0), src, dst)
    # f t / d = 2 px to the left
    assert mask[:, :30].all() and not mask[:, 30:].any()
    np.testing.assert_allclose(warped[:, :30], img[:, 2:], atol=1e-9)


def test_camera_looking_away_gives_empty_mask(rng):
    src = _cam()
    yaw90 = np.array([[0.0, 0, 1], [0, 1, 0], [-1, 0, 0]])
    _, mask = metrics.reproject(rng.random((32, 32, 3)), _plane_depth(src, 2.0), src, _cam(rot=yaw90))
    assert not mask.any()


def test_invalid_depth_is_never_splatted(rng):
    cam = _cam()
    d = _plane_depth(cam, 2.0)
    valid = np.zeros_like(d, dtype=bool)
    valid[:, :10] = True
    warped, mask = metrics.reproject(rng.random((32, 32, 3)), (d, valid), cam, cam)
    np.testing.assert_array_equal(mask, valid)
    assert (warped[~mask] == 0).all()


def test_depth_map_input_type(rng):
    cam = _cam()
    d = _plane_depth(cam, 2.0)
    dm_ = DepthMap(d, np.ones_like(d, dtype=bool))
    img = rng.random((32, 32, 3))
    np.testing.assert_array_equal(metrics.reproject(img, dm_, cam, cam)[0], img)


def test_occlusion_check_masks_depth_disagreement(rng):
    cam = _cam()
    d = _plane_depth(cam, 2.0)
    target = d.copy()
    target[5:10, 5:10] = 1.0  # an occluder in front of the plane
    _, mask = metrics.reproject(rng.random((32, 32, 3)), d, cam, cam, target_depth=target)
    assert not mask[5:10, 5:10].any() and mask.sum() == 32 * 32 - 25


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_reprojection_is_mask_consistent(seed):
    r = np.random.default_rng(seed)
    src = _cam()
    dst = _cam(r.normal(0, 0.2, 3), look_at((0, 0, 0), r.normal(0, 0.3, 3) - [0, 0, 3])[:3, :3])
    img = r.random((32, 32, 3))
    warped, mask = metrics.reproject(img, r.uniform(1, 4, (32, 32)), src, dst)
    assert (warped[~mask] == 0).all()
    # splatted values are convex combinations of source pixels
    assert (warped[mask] >= img.min() - 1e-12).all() and (warped[mask] <= img.max() + 1e-12).all()


# -- rcc ---------------------------------------------------------------------------

def test_rcc_static_identical_frames_is_sentinel(rcc_sequence):
    frames, depths, cams, _ = rcc_sequence
    res = metrics.rcc([frames[0]] * 3, [depths[0]] * 3, [cams[0]] * 3)
    assert res.value == math.inf and res.mean_mse == 0.0
    assert res.record()["value"] == 99.0


def test_rcc_oracle_sequence_is_consistent(rcc_sequence):
    frames, depths, cams, _ = rcc_sequence
    res = metrics.rcc(frames, depths, cams)
    assert res.value >= 30.0
    assert len(res.pair_mse) == len(frames) - 1
    assert min(res.coverage) > 0.3


def test_rcc_noise_drops_score(rcc_sequence):
    frames, depths, cams, _ = rcc_sequence
    clean = metrics.rcc(frames, depths, cams).value
    r = np.random.default_rng(0)
    scores = []
    for sigma in (0.02, 0.05, 0.1):
        noisy = [np.clip(f + r.normal(0, sigma, f.shape), 0, 1) for f in frames]
        scores.append(metrics.rcc(noisy, depths, cams).value)
    assert clean >= scores[0] >= scores[1] >= scores[2]
    assert clean - scores[2] >= 10.0


def test_rcc_is_outer_psnr_of_mean_mse(rcc_sequence):
    frames, depths, cams, _ = rcc_sequence
    res = metrics.rcc(frames[:4], depths[:4], cams[:4])
    assert res.value == pytest.approx(10 * math.log10(1 / np.mean(res.pair_mse)))


def test_rcc_literal_variant_without_occlusion_mask(rcc_sequence):
    frames, depths, cams, _ = rcc_sequence
    masked = metrics.rcc(frames[:4], depths[:4], cams[:4])
    literal = metrics.rcc(frames[:4], depths[:4], cams[:4], occlusion_mask=False)
    assert all(a <= b + 1e-12 for a, b in zip(masked.coverage, literal.coverage))


def test_rcc_all_empty_masks_is_undefined(rng):
    src = _cam()
    yaw90 = np.array([[0.0, 0, 1], [0, 1, 0], [-1, 0, 0]])
    frames = [rng.random((32, 32, 3))] * 2
    depth = _plane_depth(src, 2.0)
    res = metrics.rcc(frames, [depth, depth], [src, _cam(rot=yaw90)], occlusion_mask=False)
    assert res.value is None and not res.defined
    assert res.record()["value"] is None


def test_rcc_argument_errors(rng):
    cam = _cam()
    img = rng.random((32, 32, 3))
    with pytest.raises(ValueError):
        metrics.rcc([img], [np.ones((32, 32))], [cam])
    with pytest.raises(DimensionError):
        metrics.rcc([img, img], [np.ones((32, 32))], [cam, cam])


# -- spiral ------------------------------------------------------------------------

def test_spiral_single_frame_is_mean_pose(small_scene):
    cams = small_scene.dataset.cameras
    (cam,) = metrics.spiral_path(cams, frames=1)
    np.testing.assert_allclose(cam.position, np.mean([c.position for c in cams], axis=0))


def test_spiral_zero_frames():
    assert metrics.spiral_path([_cam()], frames=0) == []
    with pytest.raises(ValueError):
        metrics.spiral_path([], frames=5)


def test_spiral_is_cyclic(desk_scene):
    path = metrics.spiral_path(desk_scene.dataset.cameras, frames=120)
    assert len(path) == 120
    pos = np.stack([c.position for c in path])
    steps = np.linalg.norm(np.diff(pos, axis=0), axis=1)
    assert np.linalg.norm(pos[-1] - pos[0]) <= steps.max() + 1e-12


def test_spiral_looks_into_scene_bounds(desk_scene):
    spec = desk_scene.spec
    path = metrics.spiral_path(desk_scene.dataset.cameras, frames=40)
    _, focus = metrics.mean_pose(desk_scene.dataset.cameras)
    half = spec.planes[0].half_extent
    assert (np.abs(focus[[0, 2]]) <= half).all() and -0.5 <= focus[1] <= 0.6
    for cam in path:
        to_focus = focus - cam.position
        cosang = cam.forward @ to_focus / np.linalg.norm(to_focus)
        assert cosang == pytest.approx(1.0, abs=1e-9)


def test_spiral_copies_intrinsics(small_scene):
    cams = small_scene.dataset.cameras
    for cam in metrics.spiral_path(cams, frames=5):
        assert (cam.fx, cam.cx, cam.width) == (cams[0].fx, cams[0].cx, cams[0].width)


# -- bench -------------------------------------------------------------------------

def test_bench_zero_frames_is_empty():
    rep = metrics.bench(tiny_field(), tiny_ae(), [])
    assert rep.frames == 0 and rep.query_ratio is None and rep.speedup is None
    assert rep.table() == "no frames rendered"
    json.loads(rep.to_json())


def test_bench_query_ratio_is_64(small_scene):
    cams = small_scene.dataset.cameras[:2]
    rep = metrics.bench(tiny_field(), tiny_ae(), cams, n_samples=8, near=1.0, far=5.0)
    assert rep.rgb_queries == 2 * 16 * 16 * 8
    assert rep.query_ratio == 64.0
    assert rep.speedup > 0 and 0 <= rep.decoder_share <= 1
    d = json.loads(rep.to_json())
    assert d["version"] == 1 and d["kind"] == "bench" and d["backend"] in ("cython", "numpy")
    assert "query ratio 64.0:1" in rep.table()


def test_bench_speedup_is_time_ratio():
    rep = metrics.BenchReport(frames=1, rgb_time=6.0, latent_time=2.0, decode_time=0.5)
    assert rep.speedup == 3.0 and rep.decoder_share == 0.25

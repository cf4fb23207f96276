import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from latent_nerf import diffmath as dm
from latent_nerf.errors import NumericError
from latent_nerf.field import (FieldConfig, NeuralField, encode_position, eval_field,
                               eval_field_density_only, fourier_features, hash_grid_encode,
                               hash_resolutions)

from conftest import tiny_field


def _inputs(r, m=100):
    x = r.uniform(-1.5, 1.5, size=(m, 3))
    d = r.normal(size=(m, 3))
    return x, d / np.linalg.norm(d, axis=1, keepdims=True)


# -- encodings ------------------------------------------------------------------

def test_fourier_at_zero():
    f = fourier_features(np.zeros((1, 3)), 4)[0]
    assert f.shape == (3 * 9,)
    np.testing.assert_array_equal(f[:3], 0.0)
    for level in range(4):
        base = 3 * (1 + 2 * level)
        np.testing.assert_array_equal(f[base:base + 3], 0.0)
        np.testing.assert_array_equal(f[base + 3:base + 6], 1.0)


def test_fourier_zero_levels_is_identity(rng):
    x = rng.random((5, 3))
    np.testing.assert_array_equal(encode_position(x, FieldConfig(pos_freqs=0)), x)


def test_fourier_frequencies(rng):
    x = rng.random((4, 3))
    f = fourier_features(x, 3)
    for level in range(3):
        base = 3 * (1 + 2 * level)
        np.testing.assert_allclose(f[:, base:base + 3], np.sin(2 ** level * math.pi * x), atol=1e-12)
        np.testing.assert_allclose(f[:, base + 3:base + 6], np.cos(2 ** level * math.pi * x), atol=1e-12)


def test_hash_grid_vertex_returns_stored_feature(rng):
    cfg = FieldConfig(encoding="hashgrid", hash_levels=2, hash_table_size=2 ** 12, hash_features=2,
                      hash_base_res=4, hash_max_res=8)
    tables = [dm.parameter(rng.normal(size=(cfg.hash_table_size, 2))) for _ in range(2)]
    res0 = hash_resolutions(cfg)[0]
    corner = np.array([[1, 2, 3]])
    x = corner / res0
    enc = hash_grid_encode(x, tables, cfg).data
    flat = corner[0, 0] + (res0 + 1) * (corner[0, 1] + (res0 + 1) * corner[0, 2])
    np.testing.assert_allclose(enc[0, :2], tables[0].data[flat], rtol=1e-12)


def test_hash_grid_field_runs_and_trains_tables(rng):
    fld = tiny_field(encoding="hashgrid", hash_levels=3, hash_table_size=2 ** 10, hash_max_res=16)
    x, d = _inputs(rng, 20)
    out = fld.eval(x, d)
    out.sigma.sum().backward()
    assert np.abs(fld.params["encoding.table0"].grad).sum() > 0


# -- field outputs -------------------------------------------------------------

def test_output_shapes(rng):
    fld = tiny_field()
    x, d = _inputs(rng, 7)
    out = eval_field(fld, x, d)
    assert out.sigma.shape == (7,) and out.color.shape == (7, 3) and out.z.shape == (7, 4)


def test_zero_density_layer_gives_softplus_zero(rng):
    fld = tiny_field()
    fld.params["density.w"].data[:] = 0
    x, d = _inputs(rng, 10)
    np.testing.assert_allclose(eval_field(fld, x, d).sigma.data, math.log(2), rtol=1e-6)
    np.testing.assert_allclose(eval_field_density_only(fld, x).data, math.log(2), rtol=1e-6)


def test_zero_color_head_gives_gray(rng):
    fld = tiny_field()
    fld.params["color.1.w"].data[:] = 0
    x, d = _inputs(rng, 10)
    np.testing.assert_array_equal(eval_field(fld, x, d).color.data, 0.5)


def test_evaluation_is_deterministic(rng):
    fld = tiny_field()
    x, d = _inputs(rng)
    a, b = eval_field(fld, x, d), eval_field(fld, x, d)
    for u, v in zip(a, b):
        np.testing.assert_array_equal(u.data, v.data)


def test_density_only_matches_full_eval_bitwise(rng):
    fld = tiny_field()
    x, d = _inputs(rng)
    np.testing.assert_array_equal(eval_field_density_only(fld, x).data, eval_field(fld, x, d).sigma.data)


def test_density_only_gradient_matches_full_sigma_path(rng):
    with dm.precision(np.float64):
        fld = tiny_field()
        x, d = _inputs(rng, 12)
        w = fld.params["trunk.0.w"]
        coef = rng.normal(size=12)
        f_full = lambda: (eval_field(fld, x, d).sigma * coef).sum()  # noqa: E731
        f_fast = lambda: (eval_field_density_only(fld, x) * coef).sum()  # noqa: E731
        f_full().backward()
        g_full = w.grad.copy()
        w.grad = None
        f_fast().backward()
        np.testing.assert_allclose(w.grad, g_full, rtol=1e-12)
        w.grad = None
        assert dm.grad_check(f_fast, w, h=1e-6, indices=range(0, w.data.size, 7)) < 1e-6


def test_direction_never_changes_density(rng):
    fld = tiny_field()
    x, d = _inputs(rng)
    s1 = fld.eval(x, d).sigma.data
    s2 = fld.eval(x, -d[::-1]).sigma.data
    np.testing.assert_array_equal(s1, s2)
    assert not np.array_equal(fld.eval(x, d).color.data, fld.eval(x, -d[::-1]).color.data)


def test_color_head_perturbation_never_changes_z(rng):
    fld = tiny_field()
    x, d = _inputs(rng)
    z0 = fld.eval(x, d).z.data.copy()
    for name in fld.color_params():
        fld.params[name].data += rng.normal(size=fld.params[name].shape).astype(np.float32)
    np.testing.assert_array_equal(fld.eval(x, d).z.data, z0)


def test_latent_head_perturbation_never_changes_sigma_or_color(rng):
    fld = tiny_field()
    x, d = _inputs(rng)
    out0 = fld.eval(x, d)
    for p in fld.latent_params().values():
        p.data += 1.0
    out1 = fld.eval(x, d)
    np.testing.assert_array_equal(out0.sigma.data, out1.sigma.data)
    np.testing.assert_array_equal(out0.color.data, out1.color.data)


def test_z_loss_reaches_only_latent_head(rng):
    fld = tiny_field()
    x, d = _inputs(rng, 16)
    (fld.eval(x, d).z ** 2).sum().backward()
    for name, p in fld.params.items():
        touched = p.grad is not None and np.abs(p.grad).max() > 0
        assert touched == name.startswith("z."), name


def test_z_source_encoding_reads_encoding(rng):
    fld = tiny_field(z_source="encoding")
    assert fld.params["z.0.w"].shape[0] == fld.encoding_dim
    x, d = _inputs(rng, 5)
    z0 = fld.eval(x, d).z.data.copy()
    fld.params["trunk.0.w"].data += 1.0
    np.testing.assert_array_equal(fld.eval(x, d).z.data, z0)


def test_view_dependent_z_option(rng):
    fld = tiny_field(z_view_dependent=True)
    x, d = _inputs(rng, 5)
    assert not np.array_equal(fld.eval(x, d).z.data, fld.eval(x, -d).z.data)


def test_query_counter(rng):
    fld = tiny_field()
    x, d = _inputs(rng, 9)
    fld.eval(x, d)
    fld.density(x)
    assert fld.query_count == 18


def test_nonfinite_parameter_names_path(rng):
    fld = tiny_field()
    fld.params["color.0.b"].data[0] = np.nan
    with pytest.raises(NumericError, match="color.0.b"):
        fld.eval(*_inputs(rng, 2))


def test_out_of_box_points_are_clamped_and_flagged():
    fld = tiny_field(debug=True)
    far_pt = np.array([[10.0, 0.0, 0.0]])
    edge = np.array([[2.0, 0.0, 0.0]])
    with pytest.warns(UserWarning):
        a = fld.density(far_pt).data
    np.testing.assert_array_equal(a, fld.density(edge).data)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.1, 20.0))
def test_ranges_hold_for_random_parameters(seed, scale):
    r = np.random.default_rng(seed)
    fld = tiny_field(seed=seed)
    for p in fld.params.values():
        p.data = (r.normal(size=p.shape) * scale).astype(np.float32)
    x, d = _inputs(r, 30)
    out = fld.eval(x, d)
    assert (out.sigma.data >= 0).all()
    assert ((out.color.data >= 0) & (out.color.data <= 1)).all()
    assert out.z.shape == (30, 4)

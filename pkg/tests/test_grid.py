import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from downscaling.grid import (
    ChannelSpec, DimensionError, Field, bilinear_array, channels, field_stats, interp_bilinear,
    pool_array, pool_average, radial_wavenumber,
)
from downscaling.synth import grf_sample


def test_pool_block_mean():
    f = Field(channels(["a"]), np.array([[[1.0, 3.0], [5.0, 7.0]]]))
    assert pool_average(f, 2).data.tolist() == [[[4.0]]]


@pytest.mark.parametrize("factor", [1, 2, 4, 8])
def test_pool_constant(factor):
    f = Field(channels(["a"]), np.full((1, 16, 16), 2.5))
    out = pool_average(f, factor)
    assert out.shape == (1, 16 // factor, 16 // factor)
    assert np.all(out.data == 2.5)


def test_pool_checkerboard_vanishes():
    cb = np.indices((8, 8)).sum(axis=0) % 2 * 2.0 - 1.0
    assert np.all(pool_array(cb[None], 2) == 0)


def test_pool_indivisible_raises():
    with pytest.raises(DimensionError):
        pool_array(np.zeros((1, 10, 10)), 3)


def test_pool_spacing_scales():
    f = Field(channels(["a"]), np.zeros((1, 8, 8)), spacing=2.0)
    assert pool_average(f, 4).spacing == 8.0


def test_interp_midpoint():
    out = bilinear_array(np.array([[0.0, 1.0], [0.0, 1.0]]), (2, 3))
    assert out[0].tolist() == [0.0, 0.5, 1.0]


def test_interp_constant():
    out = bilinear_array(np.full((3, 4, 4), -1.25), (13, 9))
    assert np.all(out == -1.25)


def test_interp_exact_at_source_nodes():
    yy, xx = np.mgrid[0:5, 0:5].astype(float)
    ramp = 0.5 * yy - 2.0 * xx + 1.0
    up = bilinear_array(ramp, (17, 17))  # source node i lands on 4 i
    assert np.array_equal(up[::4, ::4], ramp)


def test_interp_reproduces_affine_field():
    yy, xx = np.mgrid[0:5, 0:7].astype(float)
    up = bilinear_array(3 * yy + xx, (9, 13))
    y2, x2 = np.mgrid[0:9, 0:13].astype(float)
    np.testing.assert_allclose(up, 3 * y2 / 2 + x2 / 2, atol=1e-12)


def test_interp_too_small_raises():
    with pytest.raises(DimensionError):
        interp_bilinear(Field(channels(["a"]), np.zeros((1, 4, 4))), (1, 4))


def test_pool_interp_mean_preserved_for_affine_fields():
    # exact for fields affine in each coordinate; see the ledger for general fields
    yy, xx = np.mgrid[0:16, 0:16].astype(float)
    f = 0.3 * yy - 0.7 * xx + 2.0
    back = bilinear_array(pool_array(f, 4), (16, 16))
    assert abs(back.mean() - f.mean()) <= 1e-10 * abs(f.mean())


def test_pool_composition():
    x = np.random.default_rng(0).standard_normal((2, 24, 24))
    np.testing.assert_allclose(pool_array(x, 6), pool_array(pool_array(x, 2), 3), rtol=1e-12, atol=1e-15)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (2, 8, 8), elements=st.floats(-1e3, 1e3)),
       st.sampled_from([(1, 2), (2, 2), (2, 4), (4, 2)]))
def test_pool_composition_property(x, ab):
    a, b = ab
    np.testing.assert_allclose(pool_array(x, a * b), pool_array(pool_array(x, a), b),
                               rtol=1e-12, atol=1e-9)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (1, 5, 5), elements=st.floats(-1e3, 1e3)))
def test_interp_preserves_mean_for_matched_parity(x):
    # 5 -> 9 nodes: every source cell is split symmetrically, so the
    # trapezoid-weighted mean is preserved; the plain mean drifts by edge effects
    up = bilinear_array(x, (9, 9))
    w = np.ones(9)
    w[[0, -1]] = 0.5
    w5 = np.ones(5)
    w5[[0, -1]] = 0.5
    lhs = np.einsum("i,j,cij->c", w, w, up) / w.sum() ** 2
    rhs = np.einsum("i,j,cij->c", w5, w5, x) / w5.sum() ** 2
    np.testing.assert_allclose(lhs, rhs, rtol=1e-10, atol=1e-9)


def test_stats_constant():
    s = field_stats(Field(channels(["a"]), np.full((1, 4, 4), 3.0)))
    assert s.mean[0] == 3.0 and s.var[0] == 0.0 and s.count == 16


def test_stats_population_variance():
    s = field_stats(np.array([[[0.0, 2.0]]]))
    assert s.mean[0] == 1.0 and s.var[0] == 1.0


def test_stats_batch_reduces_all_but_channel():
    x = np.random.default_rng(0).standard_normal((5, 3, 4, 4))
    s = field_stats(x)
    np.testing.assert_allclose(s.mean, x.mean(axis=(0, 2, 3)))
    assert s.count == 80
    assert np.all(s.min <= s.mean) and np.all(s.mean <= s.max)


def test_grf_unit_variance_over_seeds():
    v = [field_stats(grf_sample((32, 32), 3.0, 1.0, seed)).var[0] for seed in range(100)]
    assert np.all(np.abs(np.array(v) - 1.0) < 0.05)


def test_field_rejects_nonfinite():
    with pytest.raises(ValueError):
        Field(channels(["a"]), np.array([[[np.nan]]]))


def test_field_is_frozen_copy():
    data = np.zeros((1, 2, 2))
    f = Field(channels(["a"]), data)
    data[0, 0, 0] = 1.0
    assert f.data[0, 0, 0] == 0.0
    with pytest.raises(ValueError):
        f.data[0, 0, 0] = 2.0


def test_field_channel_access():
    f = Field(channels(["u", "v"]), np.stack([np.zeros((2, 2)), np.ones((2, 2))]))
    assert np.all(f["v"] == 1) and f.select(["v"]).names == ["v"]
    with pytest.raises(KeyError):
        f["T"]


def test_channel_spec_validation():
    with pytest.raises(ValueError):
        ChannelSpec("x", role="other")
    with pytest.raises(ValueError):
        ChannelSpec("x", std=0.0)
    c = ChannelSpec("Z", "dBZ", "synthesized", 1.0, 2.0)
    assert ChannelSpec.from_dict(c.to_dict()) == c


def test_radial_wavenumber_symmetric():
    k = radial_wavenumber(8, 8)
    assert k[0, 0] == 0 and k[0, 1] == 1 and k[0, 7] == 1 and k[4, 4] == 6

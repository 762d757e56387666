import numpy as np
import pytest

from downscaling.cyclone import (
    azimuthal_profile, ensemble_profile, find_center, front_cross_section, profile_edges,
)
from downscaling.synth import front_uvt, rankine_speed, vortex_uv


def test_rankine_center_and_profile_recovered():
    u, v = vortex_uv((128, 128), (64.0, 64.0), 12.0, 1.0, 1.0)
    c = find_center(u, v)
    assert (c.row, c.col) == (64, 64) and c.confident
    p = azimuthal_profile(np.hypot(u, v), c, bin_width=1.0)
    assert p.r_max == 12.0
    assert p.v_max == pytest.approx(1.0, rel=0.03)
    # the annulus means follow the analytic profile away from the peak
    sel = (p.radius > 2) & (np.abs(p.radius - 12) > 2)
    np.testing.assert_allclose(p.mean[sel], rankine_speed(p.radius[sel], 12, 1, 1), rtol=0.05)


@pytest.mark.parametrize("center", [(20.0, 30.0), (40.0, 12.0)])
def test_center_off_grid_middle(center):
    u, v = vortex_uv((64, 64), center, 5.0, 2.0, 0.6)
    assert tuple(find_center(u, v)) == center


def test_center_not_confident_on_noise():
    rng = np.random.default_rng(0)
    c = find_center(rng.standard_normal((32, 32)), rng.standard_normal((32, 32)))
    assert not c.confident
    with pytest.raises(ValueError):
        find_center(np.zeros((4, 4)), np.zeros((4, 5)))


def test_profile_edges_merge_small_inner_bins():
    e = profile_edges(10.0, 1.0, min_count=8)
    assert e[0] == 0.0
    assert np.all(np.pi * np.diff(e ** 2) >= 8)
    np.testing.assert_allclose(e[-3:], [7.5, 8.5, 9.5])
    assert e[-1] <= 10.0
    assert profile_edges(10.0, 1.0, min_count=0)[1] == 0.5


def test_profile_of_constant_field():
    p = azimuthal_profile(np.full((21, 21), 3.0), (10, 10))
    assert np.all(p.mean == 3.0) and p.count.sum() > 0
    with pytest.raises(ValueError):
        azimuthal_profile(np.zeros((5, 5)), (7, 1))


def test_ensemble_profile_spread():
    base = vortex_uv((48, 48), (24.0, 24.0), 6.0, 2.0, 0.6)
    scales = np.array([0.8, 1.0, 1.2])
    us = np.stack([s * base[0] for s in scales])
    vs = np.stack([s * base[1] for s in scales])
    ep = ensemble_profile(us, vs)
    single = azimuthal_profile(np.hypot(*base), (24, 24), r_outer=12.0)
    np.testing.assert_allclose(ep.mean, single.mean[:len(ep.mean)], rtol=1e-12)
    np.testing.assert_allclose(ep.std, 0.2 * ep.mean, rtol=1e-9)


def test_front_cross_section_recovers_tanh():
    u, v, t, _ = front_uvt((64, 64), np.pi / 6, 2.0, 4.0, 1.0, origin=(32.0, 30.0))
    cs = front_cross_section(t, np.pi / 6, (32.0, 30.0), n_lines=20, half_length=8)
    # bilinear sampling flattens the curved part of the profile by under 1% of the jump
    np.testing.assert_allclose(cs.mean, 2.0 * np.tanh(cs.distance / 2.0), atol=0.04)
    np.testing.assert_allclose(cs.mean[::-1], -cs.mean, atol=1e-9)
    assert cs.lines.shape == (20, cs.distance.size)
    assert cs.distance[0] == -8 and cs.distance[-1] == 8

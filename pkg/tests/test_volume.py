import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import ndimage

from cralign.errors import InvalidArgumentError
from cralign.volume import (
    DegenerateRangeWarning,
    NormalizationPolicy,
    Volume,
    gaussian_downsample,
    normalize_intensity,
    sample_nearest,
    sample_trilinear,
    trilinear,
)


def test_from_flat_is_x_fastest():
    vol = Volume.from_flat((2, 3, 4), (1, 1, 1), np.arange(24))
    assert vol.data[1, 0, 0] == 1
    assert vol.data[0, 1, 0] == 2
    assert vol.data[0, 0, 1] == 6
    np.testing.assert_array_equal(vol.flat, np.arange(24))


@pytest.mark.parametrize("spacing", [(0, 1, 1), (1, -1, 1), (1, 1)])
def test_bad_spacing(spacing):
    with pytest.raises(InvalidArgumentError):
        Volume(np.zeros((2, 2, 2)), spacing)


def test_length_and_finiteness_checked():
    with pytest.raises(InvalidArgumentError):
        Volume.from_flat((2, 2, 2), (1, 1, 1), np.zeros(7))
    bad = np.zeros((2, 2, 2))
    bad[0, 0, 0] = np.nan
    with pytest.raises(InvalidArgumentError):
        Volume(bad, (1, 1, 1))


def test_data_is_read_only():
    vol = Volume(np.zeros((2, 2, 2)), (1, 1, 1))
    with pytest.raises(ValueError):
        vol.data[0, 0, 0] = 1


def test_norm_coords_anisotropic():
    vol = Volume(np.zeros((10, 20, 5)), (2.0, 0.5, 1.0))
    # extents 20, 10, 5 mm; unit is 10 mm
    assert vol.half_extent == 10.0
    x = vol.to_norm_axis(0)
    assert x[0] == pytest.approx(-0.9) and x[-1] == pytest.approx(0.9)
    y = vol.to_norm_axis(1)
    assert y[-1] == pytest.approx((19.5 * 0.5 - 5.0) / 10.0)
    np.testing.assert_allclose(vol.voxel_to_norm() @ vol.norm_to_voxel(), np.eye(4), atol=1e-14)


@given(st.lists(st.floats(-1, 1), min_size=3, max_size=3))
def test_to_voxel_inverts_to_norm(c):
    vol = Volume(np.zeros((7, 4, 9)), (1.5, 2.0, 0.7))
    np.testing.assert_allclose(vol.to_norm(vol.to_voxel(c)), c, atol=1e-12)


def test_norm_coords_survive_downsampling():
    vol = Volume(np.zeros((64, 48, 32)), (1.0, 1.5, 2.0))
    small = gaussian_downsample(vol, 8)
    np.testing.assert_allclose(small.extent, vol.extent)
    point = np.array([0.3, -0.2, 0.1])
    mm = lambda v: (v.to_voxel(point) + 0.5) * np.array(v.spacing) - v.extent / 2
    np.testing.assert_allclose(mm(small), mm(vol), atol=1e-12)


def _ramp_volume():
    data = np.ones((3, 3, 3))
    data[0] = 2.0
    data[1] = 4.0
    data[2] = 6.0
    return Volume(data, (1, 1, 1))


def test_trilinear_at_voxel_centre_and_midpoint():
    vol = _ramp_volume()
    v, ok = sample_trilinear(vol, vol.to_norm([1, 2, 0]))
    assert (v, ok) == (4.0, True)
    v, ok = sample_trilinear(vol, vol.to_norm([0.5, 1, 1]))
    assert v == pytest.approx(3.0) and ok


def test_trilinear_outside_is_zero_and_invalid():
    vol = _ramp_volume()
    assert sample_trilinear(vol, [5.0, 0.0, 0.0]) == (0.0, False)


def test_trilinear_matches_scipy(rng):
    data = rng.random((6, 7, 5))
    u = rng.uniform(0, 1, (200, 3)) * (np.array(data.shape) - 1)
    values, valid, grad = trilinear(data, u, with_gradient=True)
    assert valid.all()
    np.testing.assert_allclose(values, ndimage.map_coordinates(data, u.T, order=1), atol=1e-12)
    h = 1e-6
    for a in range(3):
        du = np.zeros(3)
        du[a] = h
        fd = (trilinear(data, u + du)[0] - trilinear(data, u - du)[0]) / (2 * h)
        # skip samples sitting on a cell face where the derivative jumps
        smooth = np.abs(u[:, a] - np.round(u[:, a])) > 1e-5
        np.testing.assert_allclose(grad[smooth, a], fd[smooth], atol=1e-6)


def test_trilinear_margin_extrapolates_linearly():
    data = np.zeros((4, 1, 1))
    data[:, 0, 0] = [1.0, 3.0, 5.0, 7.0]
    u = np.array([[-0.4, 0, 0], [3.3, 0, 0]])
    values, valid = trilinear(data, u, margin=0.5)
    np.testing.assert_allclose(values, [0.2, 7.6])
    assert valid.all()
    assert not trilinear(data, u)[1].any()


def test_nearest_rounds_to_closer_voxel():
    vol = _ramp_volume()
    v, ok = sample_nearest(vol, vol.to_norm([0.4, 1, 1]))
    assert v == 2.0 and ok
    v, ok = sample_nearest(vol, vol.to_norm([1.6, 1, 1]))
    assert v == 6.0
    assert sample_nearest(vol, [0, 0, 3.0]) == (0.0, False)


def test_downsample_factor_one_is_identity(rng):
    vol = Volume(rng.random((5, 6, 7)), (1, 2, 3))
    out = gaussian_downsample(vol, 1)
    np.testing.assert_array_equal(out.data, vol.data)
    assert out.spacing == vol.spacing


def test_downsample_64_by_16():
    vol = Volume(np.zeros((64, 64, 64)), (1.0, 1.0, 2.0))
    out = gaussian_downsample(vol, 16)
    assert out.dims == (4, 4, 4)
    np.testing.assert_allclose(out.extent, vol.extent)


@pytest.mark.parametrize("factor", [2, 3, 8])
def test_downsample_keeps_constants(factor):
    vol = Volume(np.full((17, 9, 12), 3.25), (1, 1, 1))
    out = gaussian_downsample(vol, factor)
    np.testing.assert_allclose(out.data, 3.25, rtol=1e-12)


def test_downsample_rejects_bad_factor():
    vol = Volume(np.zeros((4, 4, 4)), (1, 1, 1))
    for f in (0, 1.5, -2):
        with pytest.raises(InvalidArgumentError):
            gaussian_downsample(vol, f)


def test_minmax_normalization():
    vol = Volume(np.array([-1000.0, 0.0, 1000.0]).reshape(3, 1, 1), (1, 1, 1))
    out = normalize_intensity(vol, NormalizationPolicy("minmax"))
    np.testing.assert_allclose(out.flat, [0.0, 0.5, 1.0])
    unit = Volume(np.linspace(0, 1, 8).reshape(2, 2, 2), (1, 1, 1))
    np.testing.assert_allclose(normalize_intensity(unit, NormalizationPolicy("minmax")).data, unit.data)


def test_percentile_normalization_matches_sorted_oracle(rng):
    data = rng.normal(size=10000)
    # 1% outliers, split between the tails so both percentiles sit inside
    data[:40] = 1e6
    data[40:80] = -1e6
    vol = Volume(data.reshape(10, 10, 100), (1, 1, 1))
    out = normalize_intensity(vol).data.ravel()
    s = np.sort(data)

    def pct(p):
        pos = p / 100 * (s.size - 1)
        lo = int(np.floor(pos))
        return s[lo] + (pos - lo) * (s[lo + 1] - s[lo])

    lo, hi = pct(0.5), pct(99.5)
    assert np.all(out[:40] == 1.0) and np.all(out[40:80] == 0.0)
    inside = (data > lo) & (data < hi)
    np.testing.assert_allclose(out[inside], (data[inside] - lo) / (hi - lo), rtol=1e-10)


def test_constant_volume_normalizes_to_zero_with_warning():
    vol = Volume(np.full((2, 2, 2), 5.0), (1, 1, 1))
    with pytest.warns(DegenerateRangeWarning):
        out = normalize_intensity(vol)
    assert np.all(out.data == 0)

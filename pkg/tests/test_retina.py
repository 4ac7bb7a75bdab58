import numpy as np
import pytest
from scipy.ndimage import map_coordinates

from duostream import tensor as T
from duostream.nn import grad_check
from duostream.retina import (RetinaParamError, RetinalParams, WHAT_A, WHERE_A, area_weights,
                              build_sampling_grid, fixation_grid, radial_warp, radius_scale,
                              retinal_cells_to_image, retinal_view, sample_image, warp_dump,
                              warp_offsets)
from duostream.tensor import Tensor

SHAPE = (96, 96)


@pytest.mark.parametrize("a", [WHERE_A, WHAT_A])
def test_warp_endpoints(a):
    assert radial_warp(0.0, a) == 0.0
    assert abs(radial_warp(1.0, a) - 1.0) < 1e-12


def test_warp_errors():
    with pytest.raises(ValueError):
        radial_warp(1.2, 2.5)
    with pytest.raises(ValueError):
        radial_warp(-0.1, 2.5)
    with pytest.raises(RetinaParamError):
        radial_warp(0.5, 1.0)
    with pytest.raises(RetinaParamError):
        RetinalParams(a=0.5)


def test_foveal_slope_smaller_for_narrow_view():
    h = 1e-6
    assert radial_warp(h, 15.0) / h < radial_warp(h, 2.5) / h


def test_warp_monotone_random_pairs():
    r = np.sort(np.random.default_rng(0).random((10000, 2)), axis=1)
    r = r[r[:, 0] < r[:, 1]]
    for a in (2.5, 15.0):
        assert np.all(radial_warp(r[:, 0], a) < radial_warp(r[:, 1], a))


def _source_radius(a):
    sx, sy = build_sampling_grid(RetinalParams(a, fixation=(0.5, 0.5)), SHAPE)
    return np.hypot(sx - SHAPE[1] / 2, sy - SHAPE[0] / 2) / radius_scale(SHAPE)


def test_centre_grid_fourfold_symmetric():
    sx, sy = build_sampling_grid(RetinalParams(15.0), SHAPE)
    ox, oy = sx - 48, sy - 48
    assert np.abs(ox + ox[:, ::-1]).max() < 1e-9
    assert np.abs(oy + oy[::-1, :]).max() < 1e-9
    assert np.abs(oy - ox.T).max() < 1e-9


def test_origin_maps_to_fixation():
    dx, dy = warp_offsets(0.0, 0.0, 15.0, SHAPE)
    assert dx == 0 and dy == 0


def test_narrow_view_packs_more_samples_centrally():
    assert (_source_radius(15.0) <= 0.25).mean() > (_source_radius(2.5) <= 0.25).mean()


def test_concentration_ordering():
    for rho in (0.1, 0.25, 0.5):
        fracs = [(_source_radius(a) <= rho).mean() for a in (2.5, 5.0, 15.0)]
        assert fracs[0] <= fracs[1] <= fracs[2]


def test_translation_invariance():
    a = build_sampling_grid(RetinalParams(2.5, fixation=(0.3, 0.6)), SHAPE)
    b = build_sampling_grid(RetinalParams(2.5, fixation=(0.7, 0.2)), SHAPE)
    assert np.allclose(b[0] - a[0], 0.4 * 96, atol=1e-9)
    assert np.allclose(b[1] - a[1], -0.4 * 96, atol=1e-9)


def test_full_coverage_from_a_corner():
    sx, sy = build_sampling_grid(RetinalParams(15.0, fixation=(0.0, 0.0)), SHAPE)
    assert sx.max() >= 96 - 1e-9 and sy.max() >= 96 - 1e-9


def test_constant_image_sampling():
    img = np.full((1, 3, 40, 40), 0.7, dtype=np.float32)
    fix = np.array([[0.2, 0.8]])
    out = retinal_view(img, fix, 2.5).data[0]
    py, px = fixation_grid(fix, 2.5, (40, 40))
    py, px = py.reshape(64, 64), px.reshape(64, 64)
    inside = (py >= 0) & (py <= 39) & (px >= 0) & (px <= 39)
    outside = (py < -1) | (py > 40) | (px < -1) | (px > 40)
    assert inside.any() and outside.any()
    assert np.allclose(out[:, inside], 0.7, atol=1e-6)
    assert np.all(out[:, outside] == 0)


def test_near_linear_warp_matches_resize_oracle():
    rng = np.random.default_rng(1)
    img = rng.random((1, 1, 32, 32))
    out = retinal_view(img, np.array([[0.5, 0.5]]), 1.0001).data[0, 0]
    # radius 1 reaches the diagonal: a near-linear warp spans [-H/2, 3H/2]
    axis = np.linspace(-1, 1, 64)
    v, u = np.meshgrid(axis, axis, indexing="ij")
    oracle = map_coordinates(img[0, 0], [16 + 32 * v - 0.5, 16 + 32 * u - 0.5], order=1, mode="grid-constant", cval=0.0)
    assert np.abs(out - oracle).max() < 1e-2


def test_sampling_gradient():
    rng = np.random.default_rng(2)
    img = Tensor(rng.random((1, 2, 12, 12)), requires_grad=True, dtype=np.float64)
    py, px = fixation_grid(np.array([[0.4, 0.55]]), 2.5, (12, 12), grid=8)
    rep = grad_check(lambda: T.sum_all(sample_image(img, py, px, grid=8)), [img])
    assert rep.max_rel_error < 1e-3


def test_cells_to_image_in_unit_square():
    x, y = retinal_cells_to_image((0.1, 0.9), 2.5, SHAPE)
    assert x.shape == (16, 16)
    assert x.min() >= 0 and x.max() <= 1 and y.min() >= 0 and y.max() <= 1


def test_area_weights_positive_and_larger_in_periphery():
    w = area_weights(15.0, SHAPE)
    assert np.all(w > 0)
    assert w[0, 0] > w[32, 32]


def test_warp_dump(tmp_path):
    path = tmp_path / "warp.csv"
    warp_dump(path, RetinalParams(2.5), SHAPE)
    lines = path.read_text().splitlines()
    assert lines[0] == "retinal_x,retinal_y,source_x,source_y"
    assert len(lines) == 64 * 64 + 1

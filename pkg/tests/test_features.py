import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mstpose.features import (FEATURE_DIM, NUM_ORIENTATIONS, FeatureMap, PartTemplate, build_pyramid, compute_hog,
                              correlate_template, feature_patch, load_image, save_image, to_gray)


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 6), st.integers(2, 6), st.floats(0.05, 0.5), st.integers(0, 10 ** 6))
def test_hog_entries_bounded_by_clip(rows, cols, clip, seed):
    img = np.random.default_rng(seed).random((rows * 4, cols * 4))
    f = compute_hog(img, 4, clip)
    assert f.shape == (rows, cols, FEATURE_DIM)
    assert f.min() >= 0.0 and f.max() <= clip + 1e-12


def test_hog_constant_image_is_zero_and_deterministic():
    assert not compute_hog(np.full((16, 16), 0.3)).any()
    img = np.random.default_rng(1).random((20, 24))
    assert np.array_equal(compute_hog(img), compute_hog(img.copy()))


def test_hog_half_turn_permutes_cells_and_bins():
    # a 180 degree turn reverses the cell grid, shifts signed bins by half a turn,
    # keeps unsigned bins and swaps the diagonal block-energy terms
    img = np.random.default_rng(2).random((24, 32))
    f = compute_hog(img)
    g = compute_hog(img[::-1, ::-1])
    half = NUM_ORIENTATIONS // 2
    perm = np.concatenate([(np.arange(NUM_ORIENTATIONS) + half) % NUM_ORIENTATIONS,
                           NUM_ORIENTATIONS + np.arange(half),
                           NUM_ORIENTATIONS + half + np.array([3, 2, 1, 0])])
    np.testing.assert_allclose(g, f[::-1, ::-1][..., perm], atol=1e-12)


def test_vertical_edge_fills_horizontal_gradient_bins():
    img = np.zeros((16, 16))
    img[:, 8:] = 1.0
    f = compute_hog(img)
    # gradient points along +x, which is signed bin 0
    assert f[:, 1, 0].min() > 0 and f[:, 2, 0].min() > 0
    assert f[:, 1, 1:NUM_ORIENTATIONS].max() == 0


def test_pyramid_levels_shrink_by_interval():
    img = np.random.default_rng(3).random((64, 64))
    pyr = build_pyramid(img, interval=2, cell_size=4)
    assert pyr.levels[0].data.shape[:2] == (16, 16)
    assert pyr.levels[2].scale == pytest.approx(8.0)
    assert all(lv.rows >= 4 for lv in pyr.levels)
    assert len(build_pyramid(img, interval=2, cell_size=4, max_levels=1)) == 1


def test_correlate_template_matches_explicit_sum():
    rng = np.random.default_rng(4)
    data = rng.random((5, 6, 3))
    w = rng.normal(size=(2, 3, 3))
    smap = correlate_template(FeatureMap(data, 4.0), PartTemplate("p", 0, w, 0.5))
    ref = np.array([[np.sum(data[y:y + 2, x:x + 3] * w) + 0.5 for x in range(4)] for y in range(4)])
    np.testing.assert_allclose(smap.scores[0], ref)


def test_feature_patch_zero_pads_outside():
    data = np.ones((3, 3, 2))
    p = feature_patch(data, 0, 0, 3, 3)
    assert p.shape == (3, 3, 2)
    assert p[0].sum() == 0 and p[:, 0].sum() == 0 and p[1:, 1:].sum() == 8


def test_image_round_trip_and_gray(tmp_path):
    img = np.random.default_rng(5).random((10, 12))
    save_image(tmp_path / "a.png", img)
    back = load_image(tmp_path / "a.png")
    assert np.abs(back - img).max() <= 0.5 / 255 + 1e-12
    rgb = np.stack([img] * 3, axis=-1)
    np.testing.assert_allclose(to_gray(rgb), img)
    with pytest.raises(ValueError):
        compute_hog(np.zeros((2, 2)))

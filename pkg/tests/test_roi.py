import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from pnstage.roi import (
    BadMagic,
    TruncatedMask,
    read_mask,
    tissue_mask,
    to_gray,
    write_mask,
)

from conftest import flat_rgb


class TestToGray:
    def test_reference_points(self):
        samples = np.array([
            [255, 255, 255],
            [0, 0, 0],
            [255, 0, 0],
            [0, 255, 0],
            [0, 0, 255],
        ], dtype=np.uint8)
        gray = to_gray(samples.reshape(1, 5, 3))[0]
        assert gray[0] == 1.0
        assert gray[1] == 0.0
        assert gray[2] == 0.299
        assert gray[3] == 0.587
        assert gray[4] == 0.114

    def test_range_and_monotone_in_brightness(self):
        ramp = np.stack([np.arange(256)] * 3, axis=-1).astype(np.uint8)
        gray = to_gray(ramp.reshape(1, 256, 3))[0]
        assert gray[0] == 0.0 and gray[-1] == 1.0
        assert (np.diff(gray) > 0).all()

    @settings(max_examples=50, deadline=None)
    @given(hnp.arrays(np.uint8, (4, 5, 3)))
    def test_matches_float_formula(self, rgb):
        gray = to_gray(rgb)
        r, g, b = (rgb[..., i].astype(np.float64) for i in range(3))
        expected = (299 * r + 587 * g + 114 * b) / 255000.0
        np.testing.assert_array_equal(gray, expected)
        assert gray.min() >= 0.0 and gray.max() <= 1.0


class TestTissueMask:
    def test_uses_32x_level(self, make_bundle):
        b = make_bundle(flat_rgb(64, 96, (102, 102, 102)), n_levels=6)
        mask = tissue_mask(b)
        assert mask.level == 5
        assert mask.grid.shape == (3, 2)  # ceil(96/32), ceil(64/32)
        assert mask.grid.all()
        assert mask.slide_id == b.id

    def test_threshold_is_strict(self, make_bundle):
        # gray of (204, 204, 204) is exactly 204000/255000 = 0.8
        b = make_bundle(flat_rgb(64, 64, (204, 204, 204)), n_levels=6)
        assert not tissue_mask(b, 0.8).grid.any()
        assert tissue_mask(b, 0.801).grid.all()

    def test_white_background_excluded(self, make_bundle):
        arr = flat_rgb(128, 64, (255, 255, 255))
        arr[:, :64] = (80, 90, 100)
        b = make_bundle(arr, n_levels=6)
        grid = tissue_mask(b).grid
        assert grid.shape == (2, 4)
        assert grid[:, :2].all() and not grid[:, 2:].any()

    @pytest.mark.parametrize("bad", [0.0, -0.1, 1.2])
    def test_threshold_validation(self, make_bundle, bad):
        b = make_bundle(flat_rgb(32, 32, (0, 0, 0)), n_levels=6)
        with pytest.raises(ValueError):
            tissue_mask(b, bad)

    def test_threshold_one_accepts_everything_but_white(self, make_bundle):
        arr = flat_rgb(64, 64, (254, 255, 255))
        arr[0:32] = 255
        b = make_bundle(arr, n_levels=6)
        grid = tissue_mask(b, 1.0).grid
        assert not grid[0].any() and grid[1].all()

    def test_requires_level_five(self, make_bundle):
        from pnstage.slide_io import MissingLevel
        b = make_bundle(flat_rgb(64, 64, (0, 0, 0)), n_levels=3)
        with pytest.raises(MissingLevel):
            tissue_mask(b)


class TestMaskFile:
    def test_round_trip(self, tmp_path):
        grid = np.zeros((5, 13), dtype=bool)  # width not a byte multiple
        grid[2, 3] = grid[0, 0] = grid[4, 12] = True
        write_mask(tmp_path / "m.tmsk", grid)
        np.testing.assert_array_equal(read_mask(tmp_path / "m.tmsk"), grid)

    @settings(max_examples=40, deadline=None)
    @given(hnp.arrays(bool, hnp.array_shapes(min_dims=2, max_dims=2,
                                             min_side=1, max_side=40)))
    def test_round_trip_any_shape(self, tmp_path_factory, grid):
        path = tmp_path_factory.mktemp("masks") / "m.tmsk"
        write_mask(path, grid)
        got = read_mask(path)
        assert got.dtype == bool
        np.testing.assert_array_equal(got, grid)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "m.tmsk"
        write_mask(path, np.ones((4, 4), dtype=bool))
        data = bytearray(path.read_bytes())
        data[:4] = b"WHAT"
        path.write_bytes(bytes(data))
        with pytest.raises(BadMagic):
            read_mask(path)

    def test_truncated(self, tmp_path):
        path = tmp_path / "m.tmsk"
        write_mask(path, np.ones((8, 17), dtype=bool))
        path.write_bytes(path.read_bytes()[:-2])
        with pytest.raises(TruncatedMask):
            read_mask(path)

    def test_short_header(self, tmp_path):
        path = tmp_path / "m.tmsk"
        path.write_bytes(b"TMSK\x01")
        with pytest.raises(TruncatedMask):
            read_mask(path)

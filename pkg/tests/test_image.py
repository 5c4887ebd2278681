import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tinyvlm.image import (
    RawImage,
    TileConfig,
    compute_tile_grid_dims,
    patchify,
    read_image,
    read_ppm,
    resize_longest_side,
    split_into_tiles,
    unpatchify,
    write_ppm,
)

from conftest import quadrant_image


class TestResizeLongestSide:
    def test_policy_4x364(self, rng):
        img = RawImage(rng.random((1000, 2000, 3)))
        out = resize_longest_side(img, 1456)
        assert (out.width, out.height) == (1456, 728)

    def test_identity(self, rng):
        img = RawImage(rng.random((364, 364, 3)))
        out = resize_longest_side(img, 364)
        assert out is img

    def test_policy_5x364_portrait(self, rng):
        img = RawImage(rng.random((2000, 1000, 3)))
        out = resize_longest_side(img, 1820)
        assert (out.width, out.height) == (910, 1820)

    def test_rejects_nonpositive_target(self, rng):
        with pytest.raises(ValueError):
            resize_longest_side(RawImage(rng.random((4, 4, 3))), 0)

    @settings(max_examples=60, deadline=None)
    @given(st.integers(1, 300), st.integers(1, 300), st.integers(1, 400))
    def test_aspect_ratio_within_one_pixel(self, w, h, target):
        img = RawImage(np.zeros((h, w, 3)))
        out = resize_longest_side(img, target)
        assert max(out.width, out.height) == target
        # the rounded (and >=1 clamped) side is within one pixel of exact
        scale = target / max(w, h)
        if w >= h:
            assert abs(out.height - h * scale) < 1.0
        else:
            assert abs(out.width - w * scale) < 1.0


class TestTileGridDims:
    CFG = TileConfig(tile_side=364, max_long_side=5 * 364)

    @pytest.mark.parametrize(
        "w,h,rows,cols",
        [(1092, 728, 2, 3), (364, 364, 1, 1), (365, 364, 1, 2), (1, 1, 1, 1), (1820, 1820, 5, 5)],
    )
    def test_cases(self, w, h, rows, cols):
        assert compute_tile_grid_dims(w, h, self.CFG) == (rows, cols)

    def test_matches_bruteforce_smallest_covering_grid(self):
        # exhaustive over all sizes up to 4 * tile_side, vectorized
        side = 364
        cap = self.CFG.max_tiles_per_axis
        sizes = np.arange(1, 4 * side + 1)
        expected = np.minimum(np.ceil(sizes / side).astype(int), cap)
        # brute force: smallest k in 1..cap with k * side >= size
        ks = np.arange(1, cap + 1)
        covers = ks[None, :] * side >= sizes[:, None]
        brute = np.where(covers.any(axis=1), covers.argmax(axis=1) + 1, cap)
        assert np.array_equal(expected, brute)
        for size in (1, side - 1, side, side + 1, 2 * side, 4 * side):
            rows, cols = compute_tile_grid_dims(size, size, self.CFG)
            assert rows == brute[size - 1] and cols == brute[size - 1]

    def test_clamped_to_resolution_cap(self):
        assert compute_tile_grid_dims(99999, 99999, self.CFG) == (5, 5)

    def test_rejects_degenerate(self):
        with pytest.raises(ValueError):
            compute_tile_grid_dims(0, 10, self.CFG)


class TestSplitIntoTiles:
    def test_quadrants_map_to_tiles_row_major(self):
        img = quadrant_image(728)
        grid = split_into_tiles(img, TileConfig(tile_side=364, max_long_side=1820))
        assert (grid.rows, grid.cols) == (2, 2)
        expected = [(1, 0, 0), (0, 1, 0), (0, 0, 1), (1, 1, 0)]
        for tile, color in zip(grid.tiles, expected):
            assert np.allclose(tile.pixels, np.array(color), atol=1e-9)

    def test_single_tile_identical_to_global(self, rng):
        img = RawImage(rng.random((364, 364, 3)))
        grid = split_into_tiles(img, TileConfig(tile_side=364, max_long_side=1820))
        assert (grid.rows, grid.cols) == (1, 1)
        assert np.array_equal(grid.tiles[0].pixels, grid.global_image.pixels)

    def test_total_image_count(self, rng):
        img = RawImage(rng.random((728, 1092, 3)))
        grid = split_into_tiles(img, TileConfig(tile_side=364, max_long_side=1820))
        assert grid.rows * grid.cols == 6
        assert len(grid.tiles) + 1 == 7

    def test_small_image_upscales_to_one_tile(self, rng):
        img = RawImage(rng.random((10, 17, 3)))
        grid = split_into_tiles(img, TileConfig(tile_side=364, max_long_side=1820))
        assert (grid.rows, grid.cols) == (1, 1)
        assert grid.tiles[0].pixels.shape == (364, 364, 3)

    @settings(max_examples=20, deadline=None)
    @given(st.integers(1, 80), st.integers(1, 80))
    def test_every_tile_exactly_square(self, w, h):
        cfg = TileConfig(tile_side=16, max_long_side=64)
        img = RawImage(np.random.default_rng(0).random((h, w, 3)))
        grid = split_into_tiles(img, cfg)
        assert len(grid.tiles) == grid.rows * grid.cols
        for t in grid.tiles + [grid.global_image]:
            assert t.pixels.shape == (16, 16, 3)


class TestPatchify:
    def test_paper_arithmetic_364_14(self, rng):
        tile = RawImage(rng.random((364, 364, 3)))
        seq = patchify(tile, 14)
        assert (seq.grid_h, seq.grid_w) == (26, 26)
        assert seq.patches.shape == (676, 14 * 14 * 3)

    def test_small_case(self, rng):
        tile = RawImage(rng.random((28, 28, 3)))
        seq = patchify(tile, 14)
        assert seq.patches.shape[0] == 4

    def test_divisibility_error(self, rng):
        with pytest.raises(ValueError, match="divisible"):
            patchify(RawImage(rng.random((364, 364, 3))), 15)

    @pytest.mark.parametrize("side,patch", [(28, 14), (28, 7), (28, 4), (28, 2), (28, 1)])
    def test_round_trip_bit_exact(self, side, patch, rng):
        tile = RawImage(rng.random((side, side, 3)))
        back = unpatchify(patchify(tile, patch), patch)
        assert np.array_equal(back.pixels, tile.pixels)

    def test_patch_order_row_major(self):
        img = quadrant_image(4)
        seq = patchify(img, 2)
        # patch 0 = top-left quadrant color, patch 1 = top-right, ...
        assert np.allclose(seq.patches.data[0], np.tile([1, 0, 0], 4))
        assert np.allclose(seq.patches.data[1], np.tile([0, 1, 0], 4))
        assert np.allclose(seq.patches.data[2], np.tile([0, 0, 1], 4))


class TestImageIO:
    def test_ppm_round_trip(self, tmp_path, rng):
        img = RawImage(np.round(rng.random((9, 7, 3)) * 255) / 255)
        path = tmp_path / "img.ppm"
        write_ppm(img, path)
        back = read_ppm(path)
        assert back.pixels.shape == img.pixels.shape
        assert np.allclose(back.pixels, img.pixels, atol=1 / 255 / 2)

    def test_ppm_with_comment(self, tmp_path):
        raw = b"P6\n# a comment\n2 1\n255\n" + bytes([255, 0, 0, 0, 255, 0])
        path = tmp_path / "c.ppm"
        path.write_bytes(raw)
        img = read_ppm(path)
        assert img.width == 2 and img.height == 1
        assert np.allclose(img.pixels[0, 0], [1, 0, 0])

    def test_png_read(self, tmp_path):
        from PIL import Image

        arr = (np.arange(2 * 3 * 3) % 255).reshape(2, 3, 3).astype("uint8")
        p = tmp_path / "img.png"
        Image.fromarray(arr, "RGB").save(p)
        img = read_image(p)
        assert img.pixels.shape == (2, 3, 3)
        assert np.allclose(img.pixels, arr / 255.0)

    def test_unsupported_format(self, tmp_path):
        p = tmp_path / "img.gif"
        p.write_bytes(b"GIF89a")
        with pytest.raises(ValueError, match="unsupported"):
            read_image(p)


def test_raw_image_validation():
    with pytest.raises(ValueError):
        RawImage(np.zeros((4, 4)))
    with pytest.raises(ValueError):
        RawImage(np.zeros((0, 4, 3)))


def test_tile_config_validation():
    with pytest.raises(ValueError, match="multiple"):
        TileConfig(tile_side=364, max_long_side=500)
    cfg = TileConfig(tile_side=364, max_long_side=1820)
    assert cfg.split_threshold_n == 364
    assert cfg.max_tiles_per_axis == 5

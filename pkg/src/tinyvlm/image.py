"""Image splitting: resize, fixed-size tile grids, and ViT-style patching.

Large images are stretched to the nearest tile multiple (no padding, every
tile carries signal), cut into a rows x cols matrix of square tiles, and a
downscaled copy of the whole image is kept for global context. Resampling is
bilinear with half-pixel centers; the downscale interpolation method is a
deliberate knob, see TileConfig.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autograd import Tensor
from .kernels import bilinear_resize

TILE_SIDE = 364
PATCH_SIDE = 14


@dataclass
class RawImage:
    """RGB raster with float64 channels in [0, 1], stored (h, w, 3) row-major."""

    pixels: np.ndarray

    def __post_init__(self) -> None:
        arr = np.asarray(self.pixels, dtype=np.float64)
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise ValueError(f"RawImage: expected (h, w, 3) pixels, got {arr.shape}")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError(f"RawImage: degenerate size {arr.shape}")
        self.pixels = arr

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass
class TileConfig:
    """Tiling knobs.

    split_threshold_n is the per-axis granularity at which a new tile row or
    column appears; it defaults to (and is normally kept equal to) tile_side,
    making grid dims the ceiling of size / tile_side. max_long_side caps the
    pre-tiling resolution and must be a positive multiple of tile_side.
    """

    tile_side: int = TILE_SIDE
    max_long_side: int = 5 * TILE_SIDE
    split_threshold_n: int = 0

    def __post_init__(self) -> None:
        if self.tile_side <= 0:
            raise ValueError(f"tile_side must be positive, got {self.tile_side}")
        if self.split_threshold_n == 0:
            self.split_threshold_n = self.tile_side
        if self.max_long_side <= 0 or self.max_long_side % self.tile_side != 0:
            raise ValueError(
                f"max_long_side {self.max_long_side} must be a positive multiple "
                f"of tile_side {self.tile_side}"
            )

    @property
    def max_tiles_per_axis(self) -> int:
        return self.max_long_side // self.tile_side


@dataclass
class TileGrid:
    rows: int
    cols: int
    tiles: list[RawImage]
    global_image: RawImage

    def __post_init__(self) -> None:
        if len(self.tiles) != self.rows * self.cols:
            raise ValueError(
                f"TileGrid: {len(self.tiles)} tiles for a {self.rows}x{self.cols} grid"
            )


@dataclass
class PatchSequence:
    grid_h: int
    grid_w: int
    patch_dim: int
    patches: Tensor


def resize_exact(img: RawImage, out_h: int, out_w: int) -> RawImage:
    return RawImage(bilinear_resize(img.pixels, out_h, out_w))


def resize_longest_side(img: RawImage, target: int) -> RawImage:
    """Scale so the longest side equals ``target``, keeping aspect ratio
    within one pixel of rounding."""
    if target < 1:
        raise ValueError(f"resize target must be >= 1, got {target}")
    h, w = img.height, img.width
    if max(h, w) == target:
        return img
    s = target / max(h, w)
    if w >= h:
        out_w, out_h = target, max(1, round(h * s))
    else:
        out_h, out_w = target, max(1, round(w * s))
    return resize_exact(img, out_h, out_w)


def compute_tile_grid_dims(width: int, height: int, cfg: TileConfig) -> tuple[int, int]:
    """(rows, cols) covering the image: ceil of size over the split threshold,
    clamped to [1, max_long_side / tile_side] per axis."""
    if width < 1 or height < 1:
        raise ValueError(f"image size must be positive, got {width}x{height}")
    cap = cfg.max_tiles_per_axis
    rows = min(max(1, math.ceil(height / cfg.split_threshold_n)), cap)
    cols = min(max(1, math.ceil(width / cfg.split_threshold_n)), cap)
    return rows, cols


def split_into_tiles(img: RawImage, cfg: TileConfig) -> TileGrid:
    """Stretch to the exact grid multiple, cut row-major tiles, and append
    the whole image downscaled to one tile as global context."""
    rows, cols = compute_tile_grid_dims(img.width, img.height, cfg)
    side = cfg.tile_side
    canvas = img
    if canvas.height != rows * side or canvas.width != cols * side:
        canvas = resize_exact(canvas, rows * side, cols * side)
    tiles = [
        RawImage(canvas.pixels[r * side : (r + 1) * side, c * side : (c + 1) * side].copy())
        for r in range(rows)
        for c in range(cols)
    ]
    if img.height == side and img.width == side:
        global_image = RawImage(img.pixels.copy())
    else:
        global_image = resize_exact(img, side, side)
    return TileGrid(rows=rows, cols=cols, tiles=tiles, global_image=global_image)


def patchify(tile: RawImage, patch_side: int = PATCH_SIDE) -> PatchSequence:
    """Cut a square tile into non-overlapping row-major patches, each
    flattened to patch_side^2 * 3 floats. Inverse of :func:`unpatchify`."""
    h, w = tile.height, tile.width
    if h % patch_side or w % patch_side:
        raise ValueError(
            f"patchify: tile {w}x{h} not divisible by patch side {patch_side}"
        )
    gh, gw = h // patch_side, w // patch_side
    px = tile.pixels.reshape(gh, patch_side, gw, patch_side, 3)
    flat = px.transpose(0, 2, 1, 3, 4).reshape(gh * gw, patch_side * patch_side * 3)
    return PatchSequence(grid_h=gh, grid_w=gw, patch_dim=flat.shape[1], patches=Tensor(flat))


def unpatchify(seq: PatchSequence, patch_side: int = PATCH_SIDE) -> RawImage:
    gh, gw = seq.grid_h, seq.grid_w
    px = seq.patches.data.reshape(gh, gw, patch_side, patch_side, 3)
    return RawImage(px.transpose(0, 2, 1, 3, 4).reshape(gh * patch_side, gw * patch_side, 3))


def read_ppm(path: str | Path) -> RawImage:
    """Binary P6 PPM reader (8-bit maxval)."""
    data = Path(path).read_bytes()
    if not data.startswith(b"P6"):
        raise ValueError(f"{path}: not a binary PPM (P6) file")
    fields: list[int] = []
    pos = 2
    while len(fields) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        fields.append(int(data[start:pos]))
    pos += 1  # single whitespace after maxval
    w, h, maxval = fields
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit PPM supported, maxval={maxval}")
    raw = np.frombuffer(data, dtype=np.uint8, count=w * h * 3, offset=pos)
    return RawImage(raw.reshape(h, w, 3).astype(np.float64) / 255.0)


def write_ppm(img: RawImage, path: str | Path) -> None:
    arr = np.clip(np.rint(img.pixels * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{img.width} {img.height}\n255\n".encode("ascii"))
        fh.write(arr.tobytes())


def read_image(path: str | Path) -> RawImage:
    """Load a PNG or binary PPM file as a RawImage."""
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".ppm":
        return read_ppm(path)
    if suffix == ".png":
        from PIL import Image

        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
        return RawImage(arr)
    raise ValueError(f"{path}: unsupported image format {suffix!r} (want .png or .ppm)")

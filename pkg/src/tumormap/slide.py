"""Raster slide access: leveled pyramid abstraction, tile grid, tile extraction.

Supported containers are PNG (always a single level) and 8-bit RGB TIFF.
A multi-page TIFF is treated as an image pyramid with pages ordered by
descending pixel area; the downsample factor of each level is derived from
the width ratio against level 0 and must agree with the height ratio
within 1%.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import tifffile
from PIL import Image, UnidentifiedImageError

from .errors import (
    CorruptImage,
    EmptyImage,
    NoTiles,
    OutOfBounds,
    UnsupportedFormat,
)

DEFAULT_TILE_SIZE = 224


@dataclass(frozen=True)
class LevelInfo:
    """Geometry of one pyramid level."""

    width: int
    height: int
    downsample: float


@dataclass(frozen=True)
class TileCoord:
    """Position of one tile on a level's non-overlapping grid.

    ``origin`` is the top-left pixel of the tile in that level's pixel
    space and always equals ``(col * tile_size, row * tile_size)``.
    """

    col: int
    row: int
    level: int
    tile_size: int = DEFAULT_TILE_SIZE

    @property
    def origin(self) -> tuple[int, int]:
        return (self.col * self.tile_size, self.row * self.tile_size)


@dataclass
class TileRecord:
    """One extracted tile: coordinates plus its 8-bit RGB pixels."""

    coord: TileCoord
    pixels: np.ndarray
    slide_id: str

    def __post_init__(self):
        expect = (self.coord.tile_size, self.coord.tile_size, 3)
        if self.pixels.shape != expect:
            raise ValueError(f"tile pixels must be {expect}, got {self.pixels.shape}")


class SlideSource:
    """A read-only, leveled RGB image pyramid.

    Level pixel data is decoded lazily and cached; reads are safe from
    multiple threads. All region reads are pure functions of the file
    content.
    """

    def __init__(self, slide_id: str, levels: list[LevelInfo], loader):
        self.slide_id = slide_id
        self.levels = levels
        self._loader = loader
        self._cache: dict[int, np.ndarray] = {}
        self._lock = threading.Lock()

    @property
    def level_count(self) -> int:
        return len(self.levels)

    def level_array(self, level: int) -> np.ndarray:
        """Full pixel array of one level, shape (H, W, 3) uint8."""
        if level < 0 or level >= len(self.levels):
            raise OutOfBounds(f"level {level} not in [0, {len(self.levels)})")
        with self._lock:
            arr = self._cache.get(level)
            if arr is None:
                arr = self._loader(level)
                info = self.levels[level]
                if arr.shape != (info.height, info.width, 3):
                    raise CorruptImage(
                        f"level {level} decoded to {arr.shape}, "
                        f"expected {(info.height, info.width, 3)}"
                    )
                arr.setflags(write=False)
                self._cache[level] = arr
            return arr

    def read_region(self, level: int, x: int, y: int, width: int, height: int) -> np.ndarray:
        """Read a rectangular region from one level, byte-exact."""
        info = self.levels[level] if 0 <= level < len(self.levels) else None
        if info is None:
            raise OutOfBounds(f"level {level} not in [0, {len(self.levels)})")
        if x < 0 or y < 0 or x + width > info.width or y + height > info.height:
            raise OutOfBounds(
                f"region ({x},{y},{width},{height}) outside level {level} "
                f"of size {info.width}x{info.height}"
            )
        arr = self.level_array(level)
        return arr[y : y + height, x : x + width, :]


def _open_png(path: Path) -> SlideSource:
    try:
        img = Image.open(path)
        img.load()
    except UnidentifiedImageError as exc:
        raise CorruptImage(f"cannot decode {path}: {exc}") from exc
    except OSError as exc:
        raise CorruptImage(f"cannot decode {path}: {exc}") from exc
    if img.mode != "RGB":
        raise UnsupportedFormat(f"{path}: PNG mode {img.mode!r} is not 8-bit RGB")
    width, height = img.size
    if width == 0 or height == 0:
        raise EmptyImage(f"{path}: zero-area image")
    pixels = np.asarray(img, dtype=np.uint8)

    def loader(level: int, _pixels=pixels) -> np.ndarray:
        return _pixels

    return SlideSource(path.stem, [LevelInfo(width, height, 1.0)], loader)


def _open_tiff(path: Path) -> SlideSource:
    try:
        tif = tifffile.TiffFile(str(path))
    except (tifffile.TiffFileError, OSError, ValueError) as exc:
        raise CorruptImage(f"cannot decode {path}: {exc}") from exc

    pages = list(tif.pages)
    if not pages:
        raise CorruptImage(f"{path}: TIFF contains no pages")
    metas = []
    for index, page in enumerate(pages):
        shape = page.shape
        if page.dtype != np.uint8 or len(shape) != 3 or shape[2] != 3:
            tif.close()
            raise UnsupportedFormat(
                f"{path}: page {index} is {page.dtype}/{shape}, expected 8-bit RGB"
            )
        height, width = shape[0], shape[1]
        if width == 0 or height == 0:
            tif.close()
            raise EmptyImage(f"{path}: page {index} has zero area")
        metas.append((index, width, height))

    # pyramid order: largest page is level 0
    metas.sort(key=lambda m: m[1] * m[2], reverse=True)
    base_w, base_h = metas[0][1], metas[0][2]
    levels = []
    page_order = []
    for index, width, height in metas:
        ds_w = base_w / width
        ds_h = base_h / height
        if abs(ds_w - ds_h) > 0.01 * ds_w:
            tif.close()
            raise CorruptImage(
                f"{path}: page {index} downsample mismatch "
                f"(width ratio {ds_w:.4f}, height ratio {ds_h:.4f})"
            )
        levels.append(LevelInfo(width, height, ds_w))
        page_order.append(index)

    def loader(level: int) -> np.ndarray:
        try:
            arr = tif.pages[page_order[level]].asarray()
        except (tifffile.TiffFileError, OSError, ValueError) as exc:
            raise CorruptImage(f"cannot decode {path} page {page_order[level]}: {exc}") from exc
        return np.ascontiguousarray(arr, dtype=np.uint8)

    return SlideSource(path.stem, levels, loader)


def open_slide(path) -> SlideSource:
    """Open a PNG or (possibly pyramidal) 8-bit RGB TIFF as a SlideSource.

    Raises UnsupportedFormat for other containers or pixel types,
    CorruptImage on decode failures, EmptyImage for zero-area images.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    suffix = path.suffix.lower()
    if suffix == ".png":
        return _open_png(path)
    if suffix in (".tif", ".tiff"):
        return _open_tiff(path)
    raise UnsupportedFormat(f"{path}: unsupported container {suffix!r} (PNG/TIFF only)")


def tile_grid(slide: SlideSource, level: int = 0, tile_size: int = DEFAULT_TILE_SIZE) -> list[TileCoord]:
    """Row-major list of non-overlapping tile coordinates for one level.

    Partial edge tiles are dropped, never padded, so every coordinate
    addresses a full tile_size x tile_size region.
    """
    if level < 0 or level >= slide.level_count:
        raise OutOfBounds(f"level {level} not in [0, {slide.level_count})")
    if tile_size < 1:
        raise ValueError(f"tile_size must be >= 1, got {tile_size}")
    info = slide.levels[level]
    n_cols = info.width // tile_size
    n_rows = info.height // tile_size
    if n_cols == 0 or n_rows == 0:
        raise NoTiles(
            f"level {level} ({info.width}x{info.height}) smaller than one "
            f"{tile_size}px tile"
        )
    return [
        TileCoord(col=c, row=r, level=level, tile_size=tile_size)
        for r in range(n_rows)
        for c in range(n_cols)
    ]


def grid_shape(slide: SlideSource, level: int = 0, tile_size: int = DEFAULT_TILE_SIZE) -> tuple[int, int]:
    """(rows, cols) of the tile grid for one level."""
    info = slide.levels[level]
    return info.height // tile_size, info.width // tile_size


def extract_tile(slide: SlideSource, coord: TileCoord) -> TileRecord:
    """Extract the pixels of one tile, byte-exact against the level image."""
    x, y = coord.origin
    pixels = slide.read_region(coord.level, x, y, coord.tile_size, coord.tile_size)
    return TileRecord(coord=coord, pixels=pixels, slide_id=slide.slide_id)

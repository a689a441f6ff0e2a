"""Slide-level probability grids: assembly, Gaussian smoothing, thresholding,
and colormapped rendering.

Grid cells with no score (background, rejected by QC, or never tiled)
carry the NO_TISSUE sentinel (NaN). Sentinel cells contribute zero
during smoothing, stay marked afterwards, and can never turn positive
when thresholding.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from matplotlib import colormaps

from .classifier import TileScore
from .errors import CoordOutOfGrid, DuplicateTile, UnknownColormap
from .qc import QcReport
from .slide import TileCoord

NO_TISSUE = float("nan")
NO_TISSUE_RGB = (128, 128, 128)
DEFAULT_COLORMAP = "hot"


def is_no_tissue(values) -> np.ndarray:
    return np.isnan(values)


@dataclass
class ProbabilityGrid:
    """Tile-aligned tumor probabilities for one slide level."""

    values: np.ndarray
    tile_size: int
    level_downsample: float

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2 or v.shape[0] < 1 or v.shape[1] < 1:
            raise ValueError(f"grid values must be 2D and nonempty, got {v.shape}")
        finite = v[~np.isnan(v)]
        if finite.size and (finite.min() < 0.0 or finite.max() > 1.0):
            raise ValueError("non-sentinel grid values must be in [0, 1]")
        self.values = v

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def cols(self) -> int:
        return self.values.shape[1]


def assemble_grid(
    scores: list[TileScore],
    qc_reports: list[tuple[TileCoord, QcReport]] | None,
    grid_dims: tuple[int, int],
    tile_size: int,
    level_downsample: float,
) -> ProbabilityGrid:
    """Place tile scores onto the grid; everything else is NO_TISSUE.

    A cell that failed QC is forced to NO_TISSUE even if a score exists
    for it. Output is independent of the ordering of both inputs;
    duplicate or out-of-grid score coordinates are errors.
    """
    rows, cols = grid_dims
    values = np.full((rows, cols), NO_TISSUE)
    seen: set[tuple[int, int]] = set()
    for score in scores:
        c, r = score.coord.col, score.coord.row
        if not (0 <= r < rows and 0 <= c < cols):
            raise CoordOutOfGrid(f"score at ({c},{r}) outside {cols}x{rows} grid")
        if (c, r) in seen:
            raise DuplicateTile(f"duplicate score for cell ({c},{r})")
        seen.add((c, r))
        values[r, c] = score.p_pos
    if qc_reports:
        for coord, report in qc_reports:
            if not report.passed and 0 <= coord.row < rows and 0 <= coord.col < cols:
                values[coord.row, coord.col] = NO_TISSUE
    return ProbabilityGrid(values=values, tile_size=tile_size, level_downsample=level_downsample)


def gaussian_kernel(sigma: float) -> np.ndarray:
    """1D Gaussian weights truncated at radius ceil(3*sigma), renormalized to sum 1."""
    radius = math.ceil(3.0 * sigma)
    offsets = np.arange(-radius, radius + 1, dtype=np.float64)
    weights = np.exp(-(offsets**2) / (2.0 * sigma * sigma))
    return weights / weights.sum()


def _convolve_reflect(values: np.ndarray, kernel: np.ndarray, axis: int) -> np.ndarray:
    radius = (len(kernel) - 1) // 2
    pad = [(0, 0), (0, 0)]
    pad[axis] = (radius, radius)
    # edge-duplicating reflection keeps the smoothing matrix doubly
    # stochastic, so constants and the grid mean are preserved
    padded = np.pad(values, pad, mode="symmetric")
    out = np.zeros_like(values)
    for k, w in enumerate(kernel):
        if axis == 0:
            out += w * padded[k : k + values.shape[0], :]
        else:
            out += w * padded[:, k : k + values.shape[1]]
    return out


def gaussian_smooth(grid: ProbabilityGrid, sigma: float) -> ProbabilityGrid:
    """Separable Gaussian smoothing with reflect boundary handling.

    NO_TISSUE cells enter the filter as zeros and remain NO_TISSUE in
    the output. sigma 0 returns an identical copy.
    """
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return ProbabilityGrid(
            values=grid.values.copy(),
            tile_size=grid.tile_size,
            level_downsample=grid.level_downsample,
        )
    sentinel = np.isnan(grid.values)
    filled = np.where(sentinel, 0.0, grid.values)
    kernel = gaussian_kernel(sigma)
    smoothed = _convolve_reflect(filled, kernel, axis=0)
    smoothed = _convolve_reflect(smoothed, kernel, axis=1)
    smoothed = np.clip(smoothed, 0.0, 1.0)
    smoothed[sentinel] = NO_TISSUE
    return ProbabilityGrid(
        values=smoothed,
        tile_size=grid.tile_size,
        level_downsample=grid.level_downsample,
    )


def threshold_mask(grid: ProbabilityGrid, threshold: float = 0.5) -> np.ndarray:
    """Boolean tumor mask: cell is true iff its value is >= threshold.

    The comparison is inclusive so a perfectly uncertain score at the
    default 0.5 still marks tumor. Sentinel cells are always false.
    """
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold must be in [0, 1], got {threshold}")
    with np.errstate(invalid="ignore"):
        return np.asarray(grid.values >= threshold) & ~np.isnan(grid.values)


def render_heatmap(
    grid: ProbabilityGrid,
    colormap: str = DEFAULT_COLORMAP,
    scale: int = 1,
) -> np.ndarray:
    """Render the grid as an 8-bit RGB image, one pixel per cell (or
    upscaled by an integer factor).

    Higher probabilities map to warmer colors under the default 'hot'
    map, whose red channel is monotone in the input; NO_TISSUE renders
    as neutral gray.
    """
    if scale < 1:
        raise ValueError(f"scale must be >= 1, got {scale}")
    try:
        cmap = colormaps[colormap]
    except KeyError as exc:
        raise UnknownColormap(f"colormap {colormap!r} is not registered") from exc
    sentinel = np.isnan(grid.values)
    filled = np.where(sentinel, 0.0, grid.values)
    rgba = cmap(filled)
    rgb = np.clip(np.rint(rgba[..., :3] * 255.0), 0, 255).astype(np.uint8)
    rgb[sentinel] = NO_TISSUE_RGB
    if scale > 1:
        rgb = np.repeat(np.repeat(rgb, scale, axis=0), scale, axis=1)
    return rgb

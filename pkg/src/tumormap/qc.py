"""Tile quality control: tissue-fraction gating, blur rejection, blood-clot rejection.

A pixel counts as background when it is simultaneously bright and
desaturated in HSV space; everything else is tissue. Blur is measured as
the variance of the 4-neighbor Laplacian of the grayscale tile. Blood is
a red-hue pixel fraction gate, a documented heuristic stand-in for a
clot detector.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .slide import TileRecord

REASON_LOW_TISSUE = "LowTissue"
REASON_BLURRED = "Blurred"
REASON_BLOOD_CLOT = "BloodClot"


@dataclass(frozen=True)
class QcConfig:
    """Thresholds for the three tile filters.

    Fractions are in [0, 1]; blur is in Laplacian-variance units on the
    0-255 gray scale; hue bounds are degrees in [0, 360). The blood hue
    window wraps through 0 when ``blood_hue_min > blood_hue_max``.
    """

    min_tissue_fraction: float = 0.70
    background_value_min: float = 0.90
    background_saturation_max: float = 0.07
    min_blur_score: float = 50.0
    max_blood_fraction: float = 0.30
    blood_hue_min: float = 340.0
    blood_hue_max: float = 20.0
    blood_saturation_min: float = 0.5
    blood_value_min: float = 0.2

    def __post_init__(self):
        for name in (
            "min_tissue_fraction",
            "background_value_min",
            "background_saturation_max",
            "max_blood_fraction",
            "blood_saturation_min",
            "blood_value_min",
        ):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {v}")
        if self.min_blur_score < 0:
            raise ValueError(f"min_blur_score must be >= 0, got {self.min_blur_score}")


@dataclass(frozen=True)
class QcReport:
    """Auditable per-tile QC outcome; pass is true iff no reason fired."""

    tissue_fraction: float
    blur_score: float
    blood_fraction: float
    passed: bool
    reject_reasons: tuple[str, ...] = ()

    def __post_init__(self):
        if self.passed != (len(self.reject_reasons) == 0):
            raise ValueError("passed flag inconsistent with reject_reasons")


def rgb_to_hsv(pixels: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized HSV conversion: hue in degrees [0, 360), s and v in [0, 1].

    Hue branches are evaluated only on their pixel subsets, which keeps
    the conversion cheap enough for per-tile QC at full resolution.
    """
    rgb = np.asarray(pixels)
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    # max/min in the uint8 domain; only the ratios need floats
    v_max = np.maximum(np.maximum(r, g), b)
    v_min = np.minimum(np.minimum(r, g), b)
    delta = (v_max - v_min).astype(np.float64)
    v = v_max.astype(np.float64) / 255.0
    s = np.divide(delta, v_max, out=np.zeros_like(delta), where=v_max > 0)

    h = np.zeros_like(delta)
    nz = delta > 0
    r_max = nz & (v_max == r)
    g_max = nz & (v_max == g) & ~r_max
    b_max = nz & ~r_max & ~g_max
    hr = 60.0 * (g[r_max].astype(np.float64) - b[r_max]) / delta[r_max]
    h[r_max] = np.where(hr < 0.0, hr + 360.0, hr)
    h[g_max] = 60.0 * (b[g_max].astype(np.float64) - r[g_max]) / delta[g_max] + 120.0
    h[b_max] = 60.0 * (r[b_max].astype(np.float64) - g[b_max]) / delta[b_max] + 240.0
    return h, s, v


def _pixels(tile) -> np.ndarray:
    return tile.pixels if isinstance(tile, TileRecord) else np.asarray(tile)


def _tissue_fraction_hsv(s, v, cfg: QcConfig) -> float:
    background = (v > cfg.background_value_min) & (s < cfg.background_saturation_max)
    return float(1.0 - background.mean())


def tissue_fraction(tile, cfg: QcConfig = QcConfig()) -> float:
    """Exact fraction of pixels classified as tissue.

    Background means HSV value > background_value_min AND saturation <
    background_saturation_max; tissue is the complement.
    """
    _, s, v = rgb_to_hsv(_pixels(tile))
    return _tissue_fraction_hsv(s, v, cfg)


def grayscale(pixels: np.ndarray) -> np.ndarray:
    """Luma grayscale (0.299 R + 0.587 G + 0.114 B) as float64."""
    arr = pixels.astype(np.float64)
    return 0.299 * arr[..., 0] + 0.587 * arr[..., 1] + 0.114 * arr[..., 2]


def blur_score(tile) -> float:
    """Variance of the 4-neighbor Laplacian of the grayscale tile.

    Only interior pixels contribute, so no boundary convention leaks
    into the score. Constant tiles score exactly 0.
    """
    g = grayscale(_pixels(tile))
    lap = (
        g[:-2, 1:-1]
        + g[2:, 1:-1]
        + g[1:-1, :-2]
        + g[1:-1, 2:]
        - 4.0 * g[1:-1, 1:-1]
    )
    return float(lap.var())


def _blood_fraction_hsv(h, s, v, cfg: QcConfig) -> float:
    if cfg.blood_hue_min > cfg.blood_hue_max:
        in_window = (h >= cfg.blood_hue_min) | (h <= cfg.blood_hue_max)
    else:
        in_window = (h >= cfg.blood_hue_min) & (h <= cfg.blood_hue_max)
    blood = in_window & (s >= cfg.blood_saturation_min) & (v >= cfg.blood_value_min)
    return float(blood.mean())


def blood_fraction(tile, cfg: QcConfig = QcConfig()) -> float:
    """Fraction of saturated, bright pixels whose hue falls in the red window."""
    h, s, v = rgb_to_hsv(_pixels(tile))
    return _blood_fraction_hsv(h, s, v, cfg)


def qc_filter(tile, cfg: QcConfig = QcConfig()) -> QcReport:
    """Run all three filters and report every failed check.

    The tissue gate is strict (fraction must exceed the threshold); the
    blur and blood gates are inclusive at their thresholds. HSV is
    converted once and shared by the tissue and blood checks.
    """
    h, s, v = rgb_to_hsv(_pixels(tile))
    tf = _tissue_fraction_hsv(s, v, cfg)
    bs = blur_score(tile)
    bf = _blood_fraction_hsv(h, s, v, cfg)
    reasons = []
    if not tf > cfg.min_tissue_fraction:
        reasons.append(REASON_LOW_TISSUE)
    if not bs >= cfg.min_blur_score:
        reasons.append(REASON_BLURRED)
    if not bf <= cfg.max_blood_fraction:
        reasons.append(REASON_BLOOD_CLOT)
    return QcReport(
        tissue_fraction=tf,
        blur_score=bs,
        blood_fraction=bf,
        passed=not reasons,
        reject_reasons=tuple(reasons),
    )

"""Stain-vector estimation and normalization for H&E tiles.

Stain mixing is modeled as linear in optical density (Beer-Lambert):
``OD = S @ C`` with S a 3x2 matrix of unit-norm stain columns and C the
per-pixel concentrations. Estimation fits the dominant OD plane and
takes the extreme-angle directions within it; normalization re-renders a
tile's concentrations through a reference profile after matching the
99th-percentile concentration scale per stain.

Column order convention: the first column is the one with the larger
blue-channel OD component (ties keep the minimum-angle direction first).
The convention is applied uniformly to estimated and loaded profiles so
that stain k of a source always maps onto stain k of a reference.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources

import numpy as np

from .errors import DegenerateStains, InsufficientTissue, SingularStainMatrix
from .slide import TileRecord

_UNIT_TOL = 1e-9
_MIN_STAIN_ANGLE_DEG = 1.0


@dataclass(frozen=True)
class MacenkoConfig:
    """Tunable parameters of the estimation procedure.

    od_threshold is the transparency cutoff on the OD Euclidean norm;
    angle_percentile selects the extreme directions (1.0 means the 1st
    and 99th percentile angles); white_level is the transmitted-light
    intensity I0.
    """

    od_threshold: float = 0.15
    angle_percentile: float = 1.0
    white_level: float = 255.0
    min_valid_pixels: int = 100

    def __post_init__(self):
        if not 0.0 < self.angle_percentile < 50.0:
            raise ValueError(f"angle_percentile must be in (0, 50), got {self.angle_percentile}")
        if self.od_threshold <= 0:
            raise ValueError(f"od_threshold must be > 0, got {self.od_threshold}")


@dataclass
class StainProfile:
    """A 3x2 stain matrix plus per-stain 99th-percentile concentrations.

    Columns are renormalized to unit Euclidean norm on construction and
    reordered so the larger blue-OD column comes first; negative
    components are rejected.
    """

    stain_matrix: np.ndarray
    max_concentration: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.stain_matrix, dtype=np.float64)
        c = np.asarray(self.max_concentration, dtype=np.float64)
        if s.shape != (3, 2):
            raise ValueError(f"stain_matrix must be 3x2, got {s.shape}")
        if c.shape != (2,):
            raise ValueError(f"max_concentration must have length 2, got {c.shape}")
        if np.any(s < 0):
            raise ValueError("stain_matrix components must be nonnegative")
        norms = np.linalg.norm(s, axis=0)
        if np.any(norms <= 0):
            raise ValueError("stain_matrix columns must be nonzero")
        s = s / norms
        if s[2, 1] > s[2, 0]:
            s = s[:, ::-1]
            c = c[::-1]
        if np.any(c <= 0):
            raise ValueError("max_concentration components must be > 0")
        self.stain_matrix = s
        self.max_concentration = c

    def to_dict(self) -> dict:
        return {
            "stain_matrix": [list(row) for row in self.stain_matrix],
            "max_concentration": list(self.max_concentration),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "StainProfile":
        return cls(
            stain_matrix=np.asarray(data["stain_matrix"], dtype=np.float64),
            max_concentration=np.asarray(data["max_concentration"], dtype=np.float64),
        )


def load_profile(path) -> StainProfile:
    """Load a stain profile from its JSON file representation."""
    with open(path, "r", encoding="utf-8") as fh:
        return StainProfile.from_dict(json.load(fh))


def save_profile(profile: StainProfile, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(profile.to_dict(), fh, indent=2)
        fh.write("\n")


def default_reference() -> StainProfile:
    """The packaged reference profile (a widely used H&E matrix; replaceable)."""
    text = resources.files("tumormap.data").joinpath("reference_profile.json").read_text()
    return StainProfile.from_dict(json.loads(text))


def _as_pixels(tile) -> np.ndarray:
    return tile.pixels if isinstance(tile, TileRecord) else np.asarray(tile)


@lru_cache(maxsize=8)
def _od_lut(io: float) -> np.ndarray:
    values = np.maximum(np.arange(256, dtype=np.float64), 1.0)
    return -np.log10(values / io)


def rgb_to_od(pixels: np.ndarray, io: float = 255.0) -> np.ndarray:
    """Per-channel optical density, -log10(max(I, 1) / io).

    The clamp at 1 keeps OD finite for zero-valued channels; a 255
    channel maps to OD 0 exactly. 8-bit input goes through a lookup
    table, which matters for per-tile throughput.
    """
    arr = np.asarray(pixels)
    if arr.dtype == np.uint8:
        return _od_lut(float(io))[arr]
    return -np.log10(np.maximum(arr.astype(np.float64), 1.0) / io)


_LN10 = float(np.log(10.0))


def od_to_rgb(od: np.ndarray, io: float = 255.0) -> np.ndarray:
    """Inverse of rgb_to_od (up to the quantization clamp), rounded to uint8."""
    intensity = io * np.exp(np.asarray(od, dtype=np.float64) * -_LN10)
    return np.clip(np.rint(intensity), 0, 255).astype(np.uint8)


def estimate_stain_profile(tile, cfg: MacenkoConfig = MacenkoConfig()) -> StainProfile:
    """Estimate the two stain vectors of a tile (or raw pixel array).

    Keeps OD pixels whose norm exceeds the transparency threshold, fits
    the dominant plane of their scatter, and takes the extreme-angle
    directions inside that plane as the stain columns. Raises
    InsufficientTissue when too few pixels survive the filter and
    DegenerateStains when the extremes are within 1 degree.
    """
    pixels = _as_pixels(tile)
    od = rgb_to_od(pixels, cfg.white_level).reshape(-1, 3)
    keep = np.linalg.norm(od, axis=1) > cfg.od_threshold
    od_kept = od[keep]
    if od_kept.shape[0] < cfg.min_valid_pixels:
        raise InsufficientTissue(
            f"{od_kept.shape[0]} OD pixels above threshold {cfg.od_threshold}, "
            f"need {cfg.min_valid_pixels}"
        )

    cov = np.cov(od_kept.T)
    _, eigvecs = np.linalg.eigh(cov)
    plane = eigvecs[:, [2, 1]]  # two principal directions
    # orient the dominant axis toward the data so angles cluster near zero
    projected = od_kept @ plane
    if projected[:, 0].mean() < 0:
        plane[:, 0] = -plane[:, 0]
        projected[:, 0] = -projected[:, 0]
    if plane[np.argmax(np.abs(plane[:, 1])), 1] < 0:
        plane[:, 1] = -plane[:, 1]
        projected[:, 1] = -projected[:, 1]

    angles = np.arctan2(projected[:, 1], projected[:, 0])
    lo, hi = np.percentile(angles, [cfg.angle_percentile, 100.0 - cfg.angle_percentile])
    v_lo = plane @ np.array([np.cos(lo), np.sin(lo)])
    v_hi = plane @ np.array([np.cos(hi), np.sin(hi)])

    cos_sep = float(np.clip(np.dot(v_lo, v_hi), -1.0, 1.0))
    if np.degrees(np.arccos(cos_sep)) < _MIN_STAIN_ANGLE_DEG:
        raise DegenerateStains(
            f"extreme stain directions separated by < {_MIN_STAIN_ANGLE_DEG} degree"
        )

    stains = np.stack([v_lo, v_hi], axis=1)
    stains = np.clip(stains, 0.0, None)
    norms = np.linalg.norm(stains, axis=0)
    if np.any(norms <= 0):
        raise DegenerateStains("a stain direction collapsed to zero after clamping")
    stains = stains / norms

    concentrations = _solve(od_kept, stains)
    max_c = np.percentile(concentrations, 99, axis=0)
    if np.any(max_c <= 0):
        raise InsufficientTissue("99th-percentile concentration is zero for a stain")
    return StainProfile(stain_matrix=stains, max_concentration=max_c)


def _solve(od_pixels: np.ndarray, stain_matrix: np.ndarray) -> np.ndarray:
    pinv = np.linalg.pinv(stain_matrix)
    return np.clip(od_pixels @ pinv.T, 0.0, None)


def solve_concentrations(od_pixels: np.ndarray, profile: StainProfile) -> np.ndarray:
    """Nonnegative least-squares concentrations, one (H, E) row per OD pixel.

    Solved through the pseudo-inverse of the stain matrix, then clamped
    at zero.
    """
    od = np.asarray(od_pixels, dtype=np.float64)
    if od.ndim != 2 or od.shape[1] != 3:
        raise ValueError(f"od_pixels must be Nx3, got {od.shape}")
    if np.linalg.matrix_rank(profile.stain_matrix) < 2:
        raise SingularStainMatrix("stain matrix columns are linearly dependent")
    return _solve(od, profile.stain_matrix)


def reconstruct(concentrations: np.ndarray, profile: StainProfile, shape, io: float = 255.0) -> np.ndarray:
    """Render concentrations back to 8-bit RGB pixels of the given shape."""
    od = concentrations @ profile.stain_matrix.T
    return od_to_rgb(od, io).reshape(shape)


def normalize_tile(
    tile: TileRecord,
    source: StainProfile,
    reference: StainProfile,
    io: float = 255.0,
) -> TileRecord:
    """Map a tile from its source stain appearance onto the reference.

    Concentrations are solved against the source profile, rescaled per
    stain by the ratio of reference to source 99th-percentile maxima,
    and re-rendered through the reference matrix.
    """
    pixels = tile.pixels
    od = rgb_to_od(pixels, io).reshape(-1, 3)
    conc = solve_concentrations(od, source)
    conc = conc * (reference.max_concentration / source.max_concentration)
    out = reconstruct(conc, reference, pixels.shape, io)
    return TileRecord(coord=tile.coord, pixels=out, slide_id=tile.slide_id)


def perturb_stains(
    tile: TileRecord,
    profile: StainProfile,
    seed: int,
    jitter: float,
    io: float = 255.0,
) -> TileRecord:
    """Stochastic stain augmentation: scale each stain's concentrations
    by a factor drawn uniformly from [1 - jitter, 1 + jitter].

    Deterministic given (seed, tile, jitter); jitter 0 degenerates to
    self-normalization.
    """
    if jitter < 0:
        raise ValueError(f"jitter must be >= 0, got {jitter}")
    rng = np.random.default_rng(seed)
    factors = rng.uniform(1.0 - jitter, 1.0 + jitter, size=2)
    pixels = tile.pixels
    od = rgb_to_od(pixels, io).reshape(-1, 3)
    conc = solve_concentrations(od, profile) * factors
    out = reconstruct(conc, profile, pixels.shape, io)
    return TileRecord(coord=tile.coord, pixels=out, slide_id=tile.slide_id)

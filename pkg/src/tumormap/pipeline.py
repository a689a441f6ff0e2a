"""End-to-end orchestration: configuration, shard scheduling, and the
per-slide tile -> qc -> normalize -> score -> heatmap -> GeoJSON chain.

Each slide is an independent unit of work with idempotent, atomically
written outputs (temp file + rename, then a ``.done`` marker), so any
scheduler that can launch shard-addressed commands - a SLURM array, make,
or a shell loop - can drive the pipeline. A crash mid-slide leaves no
marker and no partial non-temp files.
"""

from __future__ import annotations

import csv
import io
import json
import os
import traceback
import uuid
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from . import contours, heatmap, qc, slide, stain
from .classifier import BatchConfig, TileClassifier, TileScore, load_classifier, score_batch
from .errors import ConfigError
from .qc import QcConfig, QcReport
from .slide import TileCoord
from .stain import MacenkoConfig, StainProfile

SCORES_HEADER = ["slide_id", "col", "row", "x0", "y0", "p_pos"]
QC_HEADER = [
    "slide_id",
    "col",
    "row",
    "tissue_fraction",
    "blur_score",
    "blood_fraction",
    "pass",
    "reject_reasons",
]

CONFIG_ENV_VAR = "TUMORMAP_CONFIG"


@dataclass
class PipelineConfig:
    """Everything a slide run needs; see configs/pipeline.toml for the schema."""

    tile_size: int = 224
    level: int = 0
    seed: int = 0
    workers: int = 4
    output_dir: str = "out"
    qc: QcConfig = field(default_factory=QcConfig)
    macenko: MacenkoConfig = field(default_factory=MacenkoConfig)
    normalize_tiles: bool = True
    reference_profile: str = ""  # empty -> packaged default
    stain_sample_tiles: int = 16
    classifier_kind: str = "baseline"
    classifier_path: str = ""
    batch: BatchConfig = field(default_factory=BatchConfig)
    sigma: float = 1.0
    threshold: float = 0.5
    min_area_cells: int = 2
    colormap: str = heatmap.DEFAULT_COLORMAP

    def __post_init__(self):
        if not 0.0 <= self.threshold <= 1.0:
            raise ConfigError(f"threshold must be in [0, 1], got {self.threshold}")
        if self.sigma < 0:
            raise ConfigError(f"sigma must be >= 0, got {self.sigma}")
        if self.tile_size < 1:
            raise ConfigError(f"tile_size must be >= 1, got {self.tile_size}")
        if self.workers < 1:
            raise ConfigError(f"workers must be >= 1, got {self.workers}")

    def reference(self) -> StainProfile:
        if self.reference_profile:
            return stain.load_profile(self.reference_profile)
        return stain.default_reference()

    def classifier(self) -> TileClassifier:
        if not self.classifier_path:
            raise ConfigError("classifier_path is not set")
        return load_classifier(self.classifier_kind, self.classifier_path, self.reference())


_SECTION_FIELDS = {
    "pipeline": {
        "tile_size",
        "level",
        "seed",
        "workers",
        "output_dir",
    },
    "qc": {
        "min_tissue_fraction",
        "background_value_min",
        "background_saturation_max",
        "min_blur_score",
        "max_blood_fraction",
        "blood_hue_min",
        "blood_hue_max",
        "blood_saturation_min",
        "blood_value_min",
    },
    "stain": {
        "enabled",
        "od_threshold",
        "angle_percentile",
        "white_level",
        "min_valid_pixels",
        "reference_profile",
        "sample_tiles",
    },
    "classifier": {"kind", "path", "batch_size"},
    "heatmap": {"sigma", "threshold", "min_area_cells", "colormap"},
}


def load_config(path) -> PipelineConfig:
    """Parse and validate a TOML pipeline configuration."""
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"bad TOML in {path}: {exc}") from exc

    for section, table in raw.items():
        if section not in _SECTION_FIELDS:
            raise ConfigError(f"unknown config section [{section}]")
        unknown = set(table) - _SECTION_FIELDS[section]
        if unknown:
            raise ConfigError(f"unknown keys in [{section}]: {sorted(unknown)}")

    pipe = raw.get("pipeline", {})
    qc_raw = raw.get("qc", {})
    stain_raw = dict(raw.get("stain", {}))
    clf = raw.get("classifier", {})
    heat = raw.get("heatmap", {})
    try:
        return PipelineConfig(
            tile_size=pipe.get("tile_size", 224),
            level=pipe.get("level", 0),
            seed=pipe.get("seed", 0),
            workers=pipe.get("workers", 4),
            output_dir=pipe.get("output_dir", "out"),
            qc=QcConfig(**qc_raw),
            macenko=MacenkoConfig(
                od_threshold=stain_raw.get("od_threshold", 0.15),
                angle_percentile=stain_raw.get("angle_percentile", 1.0),
                white_level=stain_raw.get("white_level", 255),
                min_valid_pixels=stain_raw.get("min_valid_pixels", 100),
            ),
            normalize_tiles=stain_raw.get("enabled", True),
            reference_profile=stain_raw.get("reference_profile", ""),
            stain_sample_tiles=stain_raw.get("sample_tiles", 16),
            classifier_kind=clf.get("kind", "baseline"),
            classifier_path=clf.get("path", ""),
            batch=BatchConfig(batch_size=clf.get("batch_size", 375)),
            sigma=heat.get("sigma", 1.0),
            threshold=heat.get("threshold", 0.5),
            min_area_cells=heat.get("min_area_cells", 2),
            colormap=heat.get("colormap", heatmap.DEFAULT_COLORMAP),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid config value: {exc}") from exc


# --- sharding ----------------------------------------------------------------


@dataclass
class ShardManifest:
    """One shard's slice of the slide list, with per-slide status markers."""

    shard_id: int
    slides: list[str]
    status: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        for s in self.slides:
            self.status.setdefault(s, "pending")


def shard_slides(slides: list, n_shards: int) -> list[ShardManifest]:
    """Deterministic round-robin partition of the sorted slide list.

    Shard sizes differ by at most one; with n_shards == len(slides) each
    slide is its own job.
    """
    if n_shards < 1:
        raise ValueError(f"n_shards must be >= 1, got {n_shards}")
    ordered = sorted(str(s) for s in slides)
    manifests = [ShardManifest(shard_id=i, slides=[]) for i in range(n_shards)]
    for index, path in enumerate(ordered):
        m = manifests[index % n_shards]
        m.slides.append(path)
        m.status[path] = "pending"
    return manifests


# --- atomic file output --------------------------------------------------------


def atomic_write_bytes(path: Path, data: bytes) -> None:
    """Write via a unique temp file in the same directory, then rename."""
    path = Path(path)
    tmp = path.with_name(f".{path.name}.{uuid.uuid4().hex}.tmp")
    try:
        with open(tmp, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    finally:
        if tmp.exists():
            tmp.unlink()


def atomic_write_text(path: Path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def _fmt_coord(value: float) -> str:
    return str(int(value)) if float(value).is_integer() else repr(float(value))


def scores_to_csv(scores: list[TileScore], level_downsample: float) -> str:
    """Scores CSV with level-0 pixel origins, rows in canonical grid order."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(SCORES_HEADER)
    for s in sorted(scores, key=lambda s: (s.coord.row, s.coord.col)):
        x, y = s.coord.origin
        writer.writerow(
            [
                s.slide_id,
                s.coord.col,
                s.coord.row,
                _fmt_coord(x * level_downsample),
                _fmt_coord(y * level_downsample),
                repr(s.p_pos),
            ]
        )
    return buf.getvalue()


def qc_to_csv(reports: list[tuple[str, TileCoord, QcReport]]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(QC_HEADER)
    for slide_id, coord, report in sorted(reports, key=lambda r: (r[1].row, r[1].col)):
        writer.writerow(
            [
                slide_id,
                coord.col,
                coord.row,
                repr(report.tissue_fraction),
                repr(report.blur_score),
                repr(report.blood_fraction),
                str(report.passed).lower(),
                ";".join(report.reject_reasons),
            ]
        )
    return buf.getvalue()


def read_scores_csv(path, tile_size: int = 224) -> list[TileScore]:
    scores = []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            coord = TileCoord(
                col=int(row["col"]), row=int(row["row"]), level=0, tile_size=tile_size
            )
            scores.append(
                TileScore(coord=coord, slide_id=row["slide_id"], p_pos=float(row["p_pos"]))
            )
    return scores


def read_qc_csv(path, tile_size: int = 224) -> list[tuple[TileCoord, QcReport]]:
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            coord = TileCoord(
                col=int(row["col"]), row=int(row["row"]), level=0, tile_size=tile_size
            )
            reasons = tuple(r for r in row["reject_reasons"].split(";") if r)
            out.append(
                (
                    coord,
                    QcReport(
                        tissue_fraction=float(row["tissue_fraction"]),
                        blur_score=float(row["blur_score"]),
                        blood_fraction=float(row["blood_fraction"]),
                        passed=row["pass"] == "true",
                        reject_reasons=reasons,
                    ),
                )
            )
    return out


def png_bytes(pixels: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(pixels).save(buf, format="PNG")
    return buf.getvalue()


# --- per-slide run -------------------------------------------------------------


@dataclass
class SlideResult:
    slide_id: str
    status: str  # done / skipped / failed
    error: str | None = None
    outputs: dict[str, Path] = field(default_factory=dict)


def _slide_paths(out_dir: Path, slide_id: str) -> dict[str, Path]:
    return {
        "scores": out_dir / f"{slide_id}_scores.csv",
        "qc": out_dir / f"{slide_id}_qc.csv",
        "heatmap": out_dir / f"{slide_id}_heatmap.png",
        "geojson": out_dir / f"{slide_id}.geojson",
        "done": out_dir / f"{slide_id}.done",
    }


def estimate_slide_profile(
    src: slide.SlideSource,
    passed: list[TileCoord],
    cfg: PipelineConfig,
) -> StainProfile:
    """Pool pixels from the first few QC-passed tiles and estimate one
    stain profile for the whole slide."""
    sample = passed[: max(1, cfg.stain_sample_tiles)]
    pixels = np.concatenate(
        [slide.extract_tile(src, c).pixels.reshape(-1, 3) for c in sample]
    )
    return stain.estimate_stain_profile(pixels.reshape(1, -1, 3), cfg.macenko)


def run_slide(slide_path, cfg: PipelineConfig, out_dir, force: bool = False) -> SlideResult:
    """Process one slide end to end and write its four output files.

    Re-running a completed slide (``.done`` marker present) is a no-op
    unless force is set. Failures are written to ``<slide>.error.log``
    and reported in the result; they never disturb other slides.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    slide_id = Path(slide_path).stem
    paths = _slide_paths(out_dir, slide_id)
    if paths["done"].exists() and not force:
        return SlideResult(slide_id=slide_id, status="skipped", outputs=paths)
    try:
        result = _run_slide_inner(slide_path, cfg, out_dir, paths)
    except Exception as exc:
        log = out_dir / f"{slide_id}.error.log"
        atomic_write_text(log, f"{type(exc).__name__}: {exc}\n\n{traceback.format_exc()}")
        return SlideResult(slide_id=slide_id, status="failed", error=str(exc), outputs={"error_log": log})
    return result


def _run_slide_inner(slide_path, cfg: PipelineConfig, out_dir: Path, paths) -> SlideResult:
    src = slide.open_slide(slide_path)
    grid_coords = slide.tile_grid(src, cfg.level, cfg.tile_size)
    rows, cols = slide.grid_shape(src, cfg.level, cfg.tile_size)
    downsample = src.levels[cfg.level].downsample

    def qc_one(coord: TileCoord) -> tuple[TileCoord, QcReport]:
        tile = slide.extract_tile(src, coord)
        return coord, qc.qc_filter(tile, cfg.qc)

    with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
        qc_results = dict(pool.map(qc_one, grid_coords))
    reports = [(src.slide_id, c, qc_results[c]) for c in grid_coords]
    passed = [c for c in grid_coords if qc_results[c].passed]

    scores: list[TileScore] = []
    if passed:
        reference = cfg.reference()
        source_profile = None
        if cfg.normalize_tiles:
            source_profile = estimate_slide_profile(src, passed, cfg)

        def prepare(coord: TileCoord):
            tile = slide.extract_tile(src, coord)
            if source_profile is not None:
                tile = stain.normalize_tile(tile, source_profile, reference)
            return tile

        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            tiles = list(pool.map(prepare, passed))
        model = cfg.classifier()
        scores = score_batch(tiles, model, cfg.batch)

    grid = heatmap.assemble_grid(
        scores,
        [(c, r) for _, c, r in reports],
        (rows, cols),
        cfg.tile_size,
        downsample,
    )
    smoothed = heatmap.gaussian_smooth(grid, cfg.sigma)
    mask = heatmap.threshold_mask(smoothed, cfg.threshold)
    annotations = contours.extract_contours(
        mask, probabilities=smoothed.values, min_area_cells=cfg.min_area_cells
    )
    annotations = [
        contours.rescale_to_level0(a, cfg.tile_size, downsample) for a in annotations
    ]
    doc = contours.to_geojson(annotations, src.slide_id)

    atomic_write_text(paths["scores"], scores_to_csv(scores, downsample))
    atomic_write_text(paths["qc"], qc_to_csv(reports))
    atomic_write_bytes(paths["heatmap"], png_bytes(heatmap.render_heatmap(grid, cfg.colormap)))
    atomic_write_text(paths["geojson"], contours.geojson_dumps(doc))
    atomic_write_text(paths["done"], json.dumps({"slide_id": src.slide_id, "outputs": sorted(p.name for k, p in paths.items() if k != "done")}) + "\n")
    return SlideResult(slide_id=src.slide_id, status="done", outputs=paths)


def run_all(
    slides: list,
    cfg: PipelineConfig,
    out_dir,
    shard_id: int = 0,
    n_shards: int = 1,
    force: bool = False,
) -> tuple[int, list[SlideResult]]:
    """Process this shard's slice of the slide list, isolating failures.

    Returns (exit_status, per-slide results) and writes a shard summary
    JSON; exit status is 1 when any slide failed, else 0. The per-slide
    outputs are identical no matter how the slide list is sharded.
    """
    if not 0 <= shard_id < n_shards:
        raise ValueError(f"shard_id {shard_id} not in [0, {n_shards})")
    manifest = shard_slides(slides, n_shards)[shard_id]
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    results = []
    for path in manifest.slides:
        result = run_slide(path, cfg, out_dir, force=force)
        manifest.status[path] = "failed" if result.status == "failed" else "done"
        results.append(result)
    summary = {
        "shard_id": shard_id,
        "n_shards": n_shards,
        "slides": [
            {"slide_id": r.slide_id, "status": r.status, "error": r.error} for r in results
        ],
    }
    atomic_write_text(out_dir / f"shard_{shard_id}_of_{n_shards}_summary.json", json.dumps(summary, indent=2) + "\n")
    status = 1 if any(r.status == "failed" for r in results) else 0
    return status, results

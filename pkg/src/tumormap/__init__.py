"""Whole-slide tumor localization pipeline.

Tiles raster slides, quality-filters and stain-normalizes the tiles,
scores them through a pluggable classifier, and reconstructs slide-level
tumor probability heatmaps plus QuPath-compatible GeoJSON contours,
with cohort balancing and tile-level evaluation utilities alongside.
"""

from .balance import TileManifestEntry, balance_by_patient, balance_cohort
from .classifier import (
    BatchConfig,
    TileScore,
    baseline_features,
    load_classifier,
    score_batch,
)
from .contours import (
    TumorAnnotation,
    extract_contours,
    from_geojson,
    geojson_dumps,
    rescale_to_level0,
    to_geojson,
)
from .heatmap import (
    NO_TISSUE,
    ProbabilityGrid,
    assemble_grid,
    gaussian_smooth,
    render_heatmap,
    threshold_mask,
)
from .metrics import LabeledScore, confusion, roc_auc, stratified_report, summary_stats
from .pipeline import PipelineConfig, ShardManifest, run_all, run_slide, shard_slides
from .qc import QcConfig, QcReport, blood_fraction, blur_score, qc_filter, tissue_fraction
from .slide import SlideSource, TileCoord, TileRecord, extract_tile, open_slide, tile_grid
from .stain import (
    MacenkoConfig,
    StainProfile,
    estimate_stain_profile,
    normalize_tile,
    perturb_stains,
    rgb_to_od,
    solve_concentrations,
)

__version__ = "0.1.0"

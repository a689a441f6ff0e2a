"""Command-line interface: one subcommand per pipeline stage plus `run`
for the full per-slide chain.

Exit codes: 0 success, 1 per-slide failures occurred, 2 configuration
error.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import re
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from . import balance as balance_mod
from . import contours, heatmap, metrics, pipeline, qc, slide, stain
from .classifier import BatchConfig, load_classifier, parse_classifier_spec, score_batch
from .errors import ConfigError, PipelineError
from .pipeline import CONFIG_ENV_VAR, PipelineConfig
from .slide import TileCoord, TileRecord

TILE_NAME_RE = re.compile(r"^(?P<slide>.+)_c(?P<col>\d+)_r(?P<row>\d+)\.png$")


def _tile_filename(slide_id: str, col: int, row: int) -> str:
    return f"{slide_id}_c{col}_r{row}.png"


def _load_tile(path: Path, tile_size: int | None = None) -> TileRecord:
    m = TILE_NAME_RE.match(path.name)
    if not m:
        raise ConfigError(f"tile filename {path.name!r} does not match <slide>_c<col>_r<row>.png")
    pixels = np.asarray(Image.open(path).convert("RGB"), dtype=np.uint8)
    size = pixels.shape[0]
    if tile_size is not None and pixels.shape[:2] != (tile_size, tile_size):
        raise ConfigError(f"{path}: expected {tile_size}x{tile_size} tile, got {pixels.shape[:2]}")
    coord = TileCoord(col=int(m["col"]), row=int(m["row"]), level=0, tile_size=size)
    return TileRecord(coord=coord, pixels=pixels, slide_id=m["slide"])


def _iter_tile_paths(source: str) -> list[Path]:
    src = Path(source)
    if src.is_dir():
        return sorted(p for p in src.iterdir() if TILE_NAME_RE.match(p.name))
    if src.suffix == ".ndjson":
        paths = []
        with open(src, "r", encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if line:
                    record = json.loads(line)
                    paths.append(Path(record["path"]))
        return paths
    raise ConfigError(f"--tiles must be a directory or an .ndjson manifest, got {source}")


# --- subcommand handlers -------------------------------------------------------


def cmd_tile(args) -> int:
    src = slide.open_slide(args.slide)
    coords = slide.tile_grid(src, args.level, args.tile_size)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    downsample = src.levels[args.level].downsample
    manifest_lines = []
    for coord in coords:
        tile = slide.extract_tile(src, coord)
        name = _tile_filename(src.slide_id, coord.col, coord.row)
        Image.fromarray(tile.pixels).save(out / name)
        x, y = coord.origin
        manifest_lines.append(
            json.dumps(
                {
                    "path": str(out / name),
                    "slide_id": src.slide_id,
                    "col": coord.col,
                    "row": coord.row,
                    "x0": x * downsample,
                    "y0": y * downsample,
                    "level": args.level,
                    "tile_size": args.tile_size,
                },
                separators=(",", ":"),
            )
        )
    pipeline.atomic_write_text(out / "manifest.ndjson", "\n".join(manifest_lines) + "\n")
    print(f"wrote {len(coords)} tiles to {out}")
    return 0


def cmd_qc(args) -> int:
    if args.config:
        with open(args.config, "r", encoding="utf-8") as fh:
            cfg = qc.QcConfig(**json.load(fh))
    else:
        cfg = qc.QcConfig()
    rows = []
    for path in _iter_tile_paths(args.tiles):
        tile = _load_tile(path)
        report = qc.qc_filter(tile, cfg)
        rows.append((tile.slide_id, tile.coord, report))
    pipeline.atomic_write_text(Path(args.report), pipeline.qc_to_csv(rows))
    n_pass = sum(1 for _, _, r in rows if r.passed)
    print(f"qc: {n_pass}/{len(rows)} tiles passed -> {args.report}")
    return 0


def cmd_normalize(args) -> int:
    if args.estimate_reference:
        src = slide.open_slide(args.estimate_reference)
        coords = slide.tile_grid(src, 0, args.tile_size)
        sample = [slide.extract_tile(src, c).pixels.reshape(-1, 3) for c in coords[:16]]
        reference = stain.estimate_stain_profile(
            np.concatenate(sample).reshape(1, -1, 3)
        )
        if args.save_reference:
            stain.save_profile(reference, args.save_reference)
            print(f"estimated reference saved to {args.save_reference}")
    elif args.reference:
        reference = stain.load_profile(args.reference)
    else:
        reference = stain.default_reference()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    done = skipped = 0
    for path in _iter_tile_paths(args.tiles):
        tile = _load_tile(path)
        try:
            source = stain.estimate_stain_profile(tile)
            normalized = stain.normalize_tile(tile, source, reference)
        except PipelineError as exc:
            print(f"skip {path.name}: {exc}", file=sys.stderr)
            skipped += 1
            continue
        Image.fromarray(normalized.pixels).save(out / path.name)
        done += 1
    print(f"normalized {done} tiles ({skipped} skipped) -> {out}")
    return 0


def cmd_infer(args) -> int:
    kind, model_path = parse_classifier_spec(args.classifier)
    reference = stain.load_profile(args.reference) if args.reference else None
    model = load_classifier(kind, model_path, reference)
    tiles = [_load_tile(p) for p in _iter_tile_paths(args.tiles)]
    if not tiles:
        raise ConfigError(f"no tiles found under {args.tiles}")
    scores = score_batch(tiles, model, BatchConfig(batch_size=args.batch_size))
    pipeline.atomic_write_text(Path(args.out), pipeline.scores_to_csv(scores, args.downsample))
    print(f"scored {len(scores)} tiles -> {args.out}")
    return 0


def _grid_from_files(args):
    scores = pipeline.read_scores_csv(args.scores, args.tile_size)
    qc_reports = pipeline.read_qc_csv(args.qc, args.tile_size) if args.qc else []
    rows = cols = 0
    for coord in [s.coord for s in scores] + [c for c, _ in qc_reports]:
        rows = max(rows, coord.row + 1)
        cols = max(cols, coord.col + 1)
    if rows == 0 or cols == 0:
        raise ConfigError("no tiles in the score/qc inputs")
    grid = heatmap.assemble_grid(
        scores, qc_reports, (rows, cols), args.tile_size, args.downsample
    )
    smoothed = heatmap.gaussian_smooth(grid, args.sigma)
    return grid, smoothed


def _geojson_from_grid(smoothed, args, slide_id: str) -> dict:
    mask = heatmap.threshold_mask(smoothed, args.threshold)
    annotations = contours.extract_contours(
        mask, probabilities=smoothed.values, min_area_cells=args.min_area
    )
    annotations = [
        contours.rescale_to_level0(a, args.tile_size, args.downsample) for a in annotations
    ]
    return contours.to_geojson(annotations, slide_id)


def _slide_id_from_scores(path) -> str:
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            return row["slide_id"]
    return Path(path).stem


def cmd_heatmap(args) -> int:
    grid, smoothed = _grid_from_files(args)
    if args.png:
        rgb = heatmap.render_heatmap(grid, args.colormap)
        pipeline.atomic_write_bytes(Path(args.png), pipeline.png_bytes(rgb))
        print(f"heatmap -> {args.png}")
    if args.mask:
        mask = heatmap.threshold_mask(smoothed, args.threshold)
        pixels = np.where(mask, 255, 0).astype(np.uint8)
        pipeline.atomic_write_bytes(Path(args.mask), pipeline.png_bytes(pixels))
        print(f"mask -> {args.mask}")
    if args.figure:
        _render_heatmap_figure(grid, args.colormap, args.figure)
        print(f"figure -> {args.figure}")
    if args.geojson:
        doc = _geojson_from_grid(smoothed, args, _slide_id_from_scores(args.scores))
        pipeline.atomic_write_text(Path(args.geojson), contours.geojson_dumps(doc))
        print(f"geojson -> {args.geojson}")
    return 0


def _render_heatmap_figure(grid, colormap: str, path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 5))
    shown = np.ma.masked_invalid(grid.values)
    im = ax.imshow(shown, cmap=colormap, vmin=0.0, vmax=1.0, interpolation="nearest")
    im.cmap.set_bad(color="0.5")
    fig.colorbar(im, ax=ax, label="P(tumor)")
    ax.set_xlabel("tile column")
    ax.set_ylabel("tile row")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def cmd_geojson(args) -> int:
    _, smoothed = _grid_from_files(args)
    doc = _geojson_from_grid(smoothed, args, _slide_id_from_scores(args.scores))
    pipeline.atomic_write_text(Path(args.out), contours.geojson_dumps(doc))
    print(f"geojson ({len(doc['features'])} annotations) -> {args.out}")
    return 0


def cmd_eval(args) -> int:
    scores = []
    with open(args.predictions, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            scores.append(
                metrics.LabeledScore(
                    p_pos=float(row["p_pos"]),
                    label=int(row["label"]),
                    cohort=row.get("cohort", ""),
                )
            )
    report = metrics.stratified_report(scores, args.threshold)
    metrics.write_report_json(report, args.out)
    table = metrics.render_table(report)
    print(table, end="")
    if args.table:
        pipeline.atomic_write_text(Path(args.table), table)
    figure = args.figure
    if figure is None and not args.no_figure:
        figure = str(Path(args.out).with_suffix("")) + "_roc.png"
    if figure:
        metrics.render_roc_figure(scores, figure)
        print(f"roc figure -> {figure}")
    print(f"metrics -> {args.out}")
    return 0


def cmd_balance(args) -> int:
    entries = balance_mod.read_manifest(args.manifest)
    if args.by_patient:
        out = balance_mod.balance_by_patient(entries, args.target, args.seed)
    else:
        out = balance_mod.balance_cohort(
            entries, args.target, args.seed, allow_oversample=args.allow_oversample
        )
    balance_mod.write_manifest(out, args.out)
    print(f"balanced manifest ({len(out)} entries) -> {args.out}")
    return 0


def cmd_shard(args) -> int:
    manifests = pipeline.shard_slides(args.slides, args.n_shards)
    doc = [
        {"shard_id": m.shard_id, "slides": m.slides, "status": m.status} for m in manifests
    ]
    text = json.dumps(doc, indent=2) + "\n"
    if args.out:
        pipeline.atomic_write_text(Path(args.out), text)
        print(f"{args.n_shards} shards -> {args.out}")
    else:
        print(text, end="")
    return 0


def cmd_run(args) -> int:
    config_path = args.config or os.environ.get(CONFIG_ENV_VAR)
    cfg = pipeline.load_config(config_path) if config_path else PipelineConfig()
    if args.classifier:
        kind, path = parse_classifier_spec(args.classifier)
        cfg.classifier_kind, cfg.classifier_path = kind, path
    out_dir = args.out or cfg.output_dir
    status, results = pipeline.run_all(
        args.slides,
        cfg,
        out_dir,
        shard_id=args.shard_id,
        n_shards=args.n_shards,
        force=args.force,
    )
    for r in results:
        line = f"{r.slide_id}: {r.status}"
        if r.error:
            line += f" ({r.error})"
        print(line)
    return status


# --- parser --------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tumormap",
        description="Whole-slide tumor localization pipeline",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("tile", help="cut a slide into non-overlapping tiles")
    p.add_argument("--slide", required=True)
    p.add_argument("--level", type=int, default=0)
    p.add_argument("--tile-size", type=int, default=224)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_tile)

    p = sub.add_parser("qc", help="quality-filter tiles and write a report CSV")
    p.add_argument("--tiles", required=True, help="tile directory or .ndjson manifest")
    p.add_argument("--config", help="JSON file of QcConfig overrides")
    p.add_argument("--report", required=True)
    p.set_defaults(func=cmd_qc)

    p = sub.add_parser("normalize", help="stain-normalize tiles to a reference profile")
    p.add_argument("--tiles", required=True)
    p.add_argument("--reference", help="reference profile JSON (default: packaged)")
    p.add_argument("--out", required=True)
    p.add_argument("--estimate-reference", help="slide to estimate the reference from")
    p.add_argument("--save-reference", help="where to save an estimated reference")
    p.add_argument("--tile-size", type=int, default=224)
    p.set_defaults(func=cmd_normalize)

    p = sub.add_parser("infer", help="score tiles with a classifier")
    p.add_argument("--tiles", required=True)
    p.add_argument("--classifier", required=True, help="kind:path (stub/baseline/graph)")
    p.add_argument("--batch-size", type=int, default=375)
    p.add_argument("--reference", help="reference profile JSON for the baseline classifier")
    p.add_argument("--downsample", type=float, default=1.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_infer)

    def add_grid_args(p):
        p.add_argument("--scores", required=True)
        p.add_argument("--qc", help="QC report CSV; failed tiles become NO_TISSUE")
        p.add_argument("--sigma", type=float, default=1.0)
        p.add_argument("--threshold", type=float, default=0.5)
        p.add_argument("--min-area", type=int, default=2)
        p.add_argument("--tile-size", type=int, default=224)
        p.add_argument("--downsample", type=float, default=1.0)

    p = sub.add_parser("heatmap", help="render the probability heatmap (and optionally GeoJSON)")
    add_grid_args(p)
    p.add_argument("--png", help="heatmap image output")
    p.add_argument("--mask", help="thresholded binary mask output (PNG, 0/255)")
    p.add_argument("--figure", help="matplotlib figure output with colorbar")
    p.add_argument("--geojson", help="also write tumor contours GeoJSON")
    p.add_argument("--colormap", default=heatmap.DEFAULT_COLORMAP)
    p.set_defaults(func=cmd_heatmap)

    p = sub.add_parser("geojson", help="extract tumor contours as GeoJSON")
    add_grid_args(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_geojson)

    p = sub.add_parser("eval", help="tile-level metrics report (JSON, table, ROC figure)")
    p.add_argument("--predictions", required=True, help="CSV: slide_id,col,row,p_pos,label,cohort")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--out", required=True, help="metrics JSON output")
    p.add_argument("--table", help="fixed-width table output")
    p.add_argument("--figure", help="ROC figure output (default: next to --out)")
    p.add_argument("--no-figure", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("balance", help="build a class-balanced tile manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--target", type=int, default=balance_mod.DEFAULT_TARGET_PER_TYPE)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--by-patient", action="store_true")
    p.add_argument("--allow-oversample", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_balance)

    p = sub.add_parser("shard", help="partition slides into deterministic shards")
    p.add_argument("--slides", nargs="+", required=True)
    p.add_argument("--n-shards", type=int, required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_shard)

    p = sub.add_parser("run", help="full pipeline over one shard of slides")
    p.add_argument("--slides", nargs="+", required=True)
    p.add_argument("--config", help=f"pipeline TOML (or ${CONFIG_ENV_VAR})")
    p.add_argument("--classifier", help="kind:path override")
    p.add_argument("--out", help="output directory override")
    p.add_argument("--shard-id", type=int, default=0)
    p.add_argument("--n-shards", type=int, default=1)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_run)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except PipelineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

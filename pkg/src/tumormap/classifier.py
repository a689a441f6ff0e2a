"""Uniform batched scoring over interchangeable tile classifiers.

Three backends share one contract (batched 224x224x3 uint8 tiles in,
one tumor probability per tile out, order-aligned, batching-invariant):

* ``stub``     -- a coordinate lookup table, for tests and replay.
* ``baseline`` -- logistic regression over six hand-crafted tile
                  features; exists so end-to-end runs exercise a real
                  pixels-to-probability path without a trained network.
* ``graph``    -- an exported neural-network graph executed through
                  onnxruntime when that runtime is installed; its
                  absence raises BackendUnavailable, never a silent
                  fallback.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np

from . import qc, stain
from .errors import (
    BackendUnavailable,
    InferenceError,
    ModelLoadError,
    ShapeError,
)
from .slide import TileCoord, TileRecord
from .stain import StainProfile

FEATURE_COUNT = 6


@dataclass(frozen=True)
class TileScore:
    """Predicted tumor probability for one tile."""

    coord: TileCoord
    slide_id: str
    p_pos: float

    def __post_init__(self):
        if not 0.0 <= self.p_pos <= 1.0:
            raise ValueError(f"p_pos must be in [0, 1], got {self.p_pos}")


@dataclass(frozen=True)
class BatchConfig:
    batch_size: int = 375

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")


def baseline_features(tile: TileRecord, reference: StainProfile) -> np.ndarray:
    """Six deterministic per-tile statistics for the baseline classifier.

    [mean H concentration, mean E concentration, tissue fraction,
    blur score / 1000, mean gray / 255, std gray / 255], with
    concentrations solved against the reference profile.
    """
    od = stain.rgb_to_od(tile.pixels).reshape(-1, 3)
    conc = stain.solve_concentrations(od, reference)
    gray = qc.grayscale(tile.pixels)
    return np.array(
        [
            conc[:, 0].mean(),
            conc[:, 1].mean(),
            qc.tissue_fraction(tile),
            qc.blur_score(tile) / 1000.0,
            gray.mean() / 255.0,
            gray.std() / 255.0,
        ]
    )


class TileClassifier:
    """Base classifier handle: immutable after load, shareable across workers."""

    #: expected square tile edge, or None when pixels are not inspected
    input_size: int | None = 224

    def score_tiles(self, tiles: list[TileRecord]) -> np.ndarray:
        raise NotImplementedError


class StubClassifier(TileClassifier):
    """Coordinate lookup table; unseen coordinates score the declared default."""

    input_size = None

    def __init__(self, table: dict[tuple[str, int, int], float], default: float = 0.0):
        self.table = dict(table)
        self.default = float(default)

    @classmethod
    def from_csv(cls, path) -> "StubClassifier":
        table: dict[tuple[str, int, int], float] = {}
        default = 0.0
        try:
            with open(path, newline="", encoding="utf-8") as fh:
                for row in csv.DictReader(fh):
                    if row["slide_id"] == "default":
                        default = float(row["p_pos"])
                        continue
                    key = (row["slide_id"], int(row["col"]), int(row["row"]))
                    table[key] = float(row["p_pos"])
        except (OSError, KeyError, TypeError, ValueError) as exc:
            raise ModelLoadError(f"bad stub table {path}: {exc}") from exc
        return cls(table, default)

    def score_tiles(self, tiles: list[TileRecord]) -> np.ndarray:
        return np.array(
            [
                self.table.get((t.slide_id, t.coord.col, t.coord.row), self.default)
                for t in tiles
            ]
        )


class BaselineClassifier(TileClassifier):
    """Logistic regression over baseline_features; weights = 6 coefficients + bias."""

    def __init__(self, weights: np.ndarray, reference: StainProfile):
        weights = np.asarray(weights, dtype=np.float64)
        if weights.shape != (FEATURE_COUNT + 1,):
            raise ModelLoadError(
                f"baseline weights must have {FEATURE_COUNT + 1} entries, got {weights.shape}"
            )
        if not np.all(np.isfinite(weights)):
            raise ModelLoadError("baseline weights must be finite")
        self.weights = weights
        self.reference = reference

    @classmethod
    def from_json(cls, path, reference: StainProfile) -> "BaselineClassifier":
        try:
            with open(path, "r", encoding="utf-8") as fh:
                values = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ModelLoadError(f"bad baseline weights {path}: {exc}") from exc
        return cls(np.asarray(values, dtype=np.float64), reference)

    def score_tiles(self, tiles: list[TileRecord]) -> np.ndarray:
        feats = np.stack([baseline_features(t, self.reference) for t in tiles])
        logits = feats @ self.weights[:FEATURE_COUNT] + self.weights[FEATURE_COUNT]
        return 1.0 / (1.0 + np.exp(-logits))


class OnnxClassifier(TileClassifier):
    """Exported-graph runner. Expects NCHW float32 input scaled to [0, 1] and
    either a probability column (B,)/(B,1) or a two-logit output (B,2),
    in which case the softmax positive column is taken."""

    def __init__(self, path):
        try:
            import onnxruntime
        except ImportError as exc:
            raise BackendUnavailable(
                "graph backend requires onnxruntime, which is not installed"
            ) from exc
        try:
            self.session = onnxruntime.InferenceSession(
                str(path), providers=["CPUExecutionProvider"]
            )
        except Exception as exc:  # onnxruntime raises its own hierarchy
            raise ModelLoadError(f"cannot load graph model {path}: {exc}") from exc
        self.input_name = self.session.get_inputs()[0].name

    def score_tiles(self, tiles: list[TileRecord]) -> np.ndarray:
        batch = np.stack([t.pixels for t in tiles]).astype(np.float32) / 255.0
        batch = np.transpose(batch, (0, 3, 1, 2))
        try:
            out = self.session.run(None, {self.input_name: batch})[0]
        except Exception as exc:
            raise InferenceError(f"graph execution failed: {exc}") from exc
        out = np.asarray(out, dtype=np.float64)
        if out.ndim == 2 and out.shape[1] == 2:
            shifted = out - out.max(axis=1, keepdims=True)
            exp = np.exp(shifted)
            return exp[:, 1] / exp.sum(axis=1)
        probs = out.reshape(-1)
        if probs.shape[0] != len(tiles):
            raise InferenceError(f"graph produced {probs.shape[0]} outputs for {len(tiles)} tiles")
        return probs


def load_classifier(kind: str, path, reference: StainProfile | None = None) -> TileClassifier:
    """Build a classifier handle from its on-disk definition.

    kind is one of ``stub`` (CSV lookup table), ``baseline`` (JSON weight
    vector; uses the packaged reference profile when none is supplied)
    or ``graph`` (exported model file).
    """
    if kind == "stub":
        return StubClassifier.from_csv(path)
    if kind == "baseline":
        return BaselineClassifier.from_json(path, reference or stain.default_reference())
    if kind == "graph":
        return OnnxClassifier(path)
    raise ModelLoadError(f"unknown classifier kind {kind!r} (stub/baseline/graph)")


def parse_classifier_spec(spec: str) -> tuple[str, str]:
    """Split a 'kind:path' classifier spec string."""
    kind, sep, path = spec.partition(":")
    if not sep or not path:
        raise ModelLoadError(f"classifier spec {spec!r} must look like kind:path")
    return kind, path


def score_batch(
    tiles: list[TileRecord],
    model: TileClassifier,
    cfg: BatchConfig = BatchConfig(),
) -> list[TileScore]:
    """Score tiles in batches of cfg.batch_size, order-aligned with input.

    Splitting into batches never changes a score; probabilities are
    clipped to [0, 1] to enforce the output contract against backend
    floating-point noise.
    """
    if not tiles:
        raise ValueError("tiles must be nonempty")
    if model.input_size is not None:
        expect = (model.input_size, model.input_size, 3)
        for t in tiles:
            if t.pixels.shape != expect:
                raise ShapeError(
                    f"tile ({t.coord.col},{t.coord.row}) has shape {t.pixels.shape}, "
                    f"classifier expects {expect}"
                )
    probs = np.empty(len(tiles))
    for start in range(0, len(tiles), cfg.batch_size):
        chunk = tiles[start : start + cfg.batch_size]
        probs[start : start + len(chunk)] = model.score_tiles(chunk)
    probs = np.clip(probs, 0.0, 1.0)
    return [
        TileScore(coord=t.coord, slide_id=t.slide_id, p_pos=float(p))
        for t, p in zip(tiles, probs)
    ]

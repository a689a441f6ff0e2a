"""Tumor region geometry: contour extraction from binary masks, rescaling
to slide pixels, and QuPath-compatible GeoJSON export.

Regions are 8-connected components of true cells; enclosed false regions
become holes under the complementary 4-connectivity. Each ring traces
the region boundary along cell edges, so polygon areas are exact cell
counts: a single true cell yields a unit square. Rings are reported in
(x, y) order with the outer ring counterclockwise (positive shoelace
area) and holes clockwise.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import InvalidRing

Point = tuple[float, float]

TUMOR_CLASS_NAME = "Tumor"
TUMOR_CLASS_COLOR = [200, 0, 0]


@dataclass
class TumorAnnotation:
    """One tumor region: closed outer ring, optional holes, and metadata."""

    outer_ring: list[Point]
    holes: list[list[Point]] = field(default_factory=list)
    mean_probability: float = 1.0
    area_px: float = 0.0

    def all_rings(self) -> list[list[Point]]:
        return [self.outer_ring, *self.holes]


def shoelace_area(ring: list[Point]) -> float:
    """Signed polygon area; positive means counterclockwise in (x, y)."""
    pts = np.asarray(ring, dtype=np.float64)
    x, y = pts[:, 0], pts[:, 1]
    return float(0.5 * np.sum(x[:-1] * y[1:] - x[1:] * y[:-1]))


def _validate_ring(ring: list[Point]) -> None:
    if len(ring) < 4:
        raise InvalidRing(f"ring has {len(ring)} points, need at least 4")
    if tuple(ring[0]) != tuple(ring[-1]):
        raise InvalidRing(f"ring is not closed: {ring[0]} != {ring[-1]}")


def _boundary_edges(labels: np.ndarray, label: int) -> dict[Point, list[Point]]:
    """Directed cell-edge segments of one labeled region, keyed by start point.

    Edges are oriented so that walking them keeps the region to the
    left in image coordinates, which makes outer rings counterclockwise
    (positive shoelace) and hole rings clockwise.
    """
    inside = labels == label
    rows, cols = inside.shape
    padded = np.zeros((rows + 2, cols + 2), dtype=bool)
    padded[1:-1, 1:-1] = inside
    out: dict[Point, list[Point]] = {}

    def add(a: Point, b: Point) -> None:
        out.setdefault(a, []).append(b)

    rr, cc = np.nonzero(inside)
    for r, c in zip(rr.tolist(), cc.tolist()):
        x, y = float(c), float(r)
        if not padded[r, c + 1]:  # no region above
            add((x, y), (x + 1, y))
        if not padded[r + 1, c + 2]:  # none to the right
            add((x + 1, y), (x + 1, y + 1))
        if not padded[r + 2, c + 1]:  # none below
            add((x + 1, y + 1), (x, y + 1))
        if not padded[r + 1, c]:  # none to the left
            add((x, y + 1), (x, y))
    for ends in out.values():
        ends.sort()
    return out


def _trace_rings(edges: dict[Point, list[Point]]) -> list[list[Point]]:
    """Stitch directed edges into closed rings.

    At a pinch vertex (two diagonal region cells meeting two diagonal
    background cells) there are two outgoing edges; the turn that keeps
    the region 8-connected and holes 4-connected is always the fixed
    rotation of the incoming direction.
    """
    consumed: set[tuple[Point, Point]] = set()
    rings: list[list[Point]] = []
    for start in sorted(edges):
        for first_end in edges[start]:
            first = (start, first_end)
            if first in consumed:
                continue
            consumed.add(first)
            ring = [start, first_end]
            prev_dir = (first_end[0] - start[0], first_end[1] - start[1])
            current = first_end
            while True:
                outs = edges.get(current, [])
                if len(outs) == 1:
                    nxt = outs[0]
                else:
                    # pinch point: pass through toward the diagonal neighbor
                    nxt = (current[0] + prev_dir[1], current[1] - prev_dir[0])
                    if nxt not in outs:  # pragma: no cover
                        raise RuntimeError(f"inconsistent pinch at {current}")
                edge = (current, nxt)
                if edge == first:
                    break
                if edge in consumed:  # pragma: no cover
                    raise RuntimeError(f"boundary tracing revisited {edge}")
                consumed.add(edge)
                ring.append(nxt)
                prev_dir = (nxt[0] - current[0], nxt[1] - current[1])
                current = nxt
            rings.append(_canonical_ring(ring))
    return rings


def _canonical_ring(ring: list[Point]) -> list[Point]:
    """Merge collinear runs and rotate so the ring starts at its minimum corner."""
    pts = ring[:-1] if ring[0] == ring[-1] else list(ring)
    corners: list[Point] = []
    n = len(pts)
    for i, p in enumerate(pts):
        a = pts[i - 1]
        b = pts[(i + 1) % n]
        d1 = (p[0] - a[0], p[1] - a[1])
        d2 = (b[0] - p[0], b[1] - p[1])
        if d1[0] * d2[1] - d1[1] * d2[0] != 0 or d1[0] * d2[0] + d1[1] * d2[1] < 0:
            corners.append(p)
    pivot = corners.index(min(corners))
    corners = corners[pivot:] + corners[:pivot]
    corners.append(corners[0])
    return corners


def extract_contours(
    mask: np.ndarray,
    probabilities: np.ndarray | None = None,
    min_area_cells: int = 2,
) -> list[TumorAnnotation]:
    """Extract one annotation per 8-connected true component of the mask.

    Components smaller than min_area_cells cells are discarded. When a
    probability array of the same shape is given, each annotation's
    mean_probability is the mean over its component's cells; otherwise
    it is 1.0 (the mean of the binary field itself). Output is sorted by
    descending polygon area, ties broken by (min row, min col).
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim != 2:
        raise ValueError(f"mask must be 2D, got shape {mask.shape}")
    if probabilities is not None:
        probabilities = np.asarray(probabilities, dtype=np.float64)
        if probabilities.shape != mask.shape:
            raise ValueError("probabilities must match the mask shape")
    labels, n_components = ndimage.label(mask, structure=np.ones((3, 3), dtype=int))
    annotations: list[tuple[float, int, int, TumorAnnotation]] = []
    for label in range(1, n_components + 1):
        cells = labels == label
        cell_count = int(cells.sum())
        if cell_count < min_area_cells:
            continue
        rings = _trace_rings(_boundary_edges(labels, label))
        outer = [r for r in rings if shoelace_area(r) > 0]
        holes = [r for r in rings if shoelace_area(r) < 0]
        if len(outer) != 1:  # pragma: no cover - tracing guarantees one outer ring
            raise RuntimeError(f"component {label} produced {len(outer)} outer rings")
        area = shoelace_area(outer[0]) + sum(shoelace_area(h) for h in holes)
        if probabilities is not None:
            mean_p = float(probabilities[cells].mean())
        else:
            mean_p = 1.0
        rr, cc = np.nonzero(cells)
        annotations.append(
            (
                -area,
                int(rr.min()),
                int(cc.min()),
                TumorAnnotation(
                    outer_ring=outer[0],
                    holes=holes,
                    mean_probability=mean_p,
                    area_px=area,
                ),
            )
        )
    annotations.sort(key=lambda item: item[:3])
    return [item[3] for item in annotations]


def rescale_to_level0(
    ann: TumorAnnotation, tile_size: int, level_downsample: float
) -> TumorAnnotation:
    """Scale grid-coordinate rings into level-0 pixel coordinates.

    Every coordinate is multiplied by tile_size * level_downsample; the
    area scales by the square of that factor. Orientation and topology
    are untouched.
    """
    if tile_size < 1:
        raise ValueError(f"tile_size must be >= 1, got {tile_size}")
    if level_downsample < 1:
        raise ValueError(f"level_downsample must be >= 1, got {level_downsample}")
    f = tile_size * level_downsample

    def scale(ring: list[Point]) -> list[Point]:
        return [(x * f, y * f) for x, y in ring]

    return TumorAnnotation(
        outer_ring=scale(ann.outer_ring),
        holes=[scale(h) for h in ann.holes],
        mean_probability=ann.mean_probability,
        area_px=ann.area_px * f * f,
    )


def to_geojson(annotations: list[TumorAnnotation], slide_id: str) -> dict:
    """Build a GeoJSON FeatureCollection of tumor polygons for QuPath import.

    Coordinates are level-0 pixel values (QuPath's convention), not
    geographic positions. Every ring is validated as closed with at
    least four points.
    """
    features = []
    for index, ann in enumerate(annotations):
        for ring in ann.all_rings():
            _validate_ring(ring)
        features.append(
            {
                "type": "Feature",
                "id": f"{slide_id}-tumor-{index}",
                "geometry": {
                    "type": "Polygon",
                    "coordinates": [
                        [[float(x), float(y)] for x, y in ring]
                        for ring in ann.all_rings()
                    ],
                },
                "properties": {
                    "objectType": "annotation",
                    "classification": {
                        "name": TUMOR_CLASS_NAME,
                        "color": list(TUMOR_CLASS_COLOR),
                    },
                    "measurements": {"mean_probability": float(ann.mean_probability)},
                },
            }
        )
    return {"type": "FeatureCollection", "features": features}


def from_geojson(doc: dict) -> list[TumorAnnotation]:
    """Parse a FeatureCollection written by to_geojson back into annotations."""
    if doc.get("type") != "FeatureCollection":
        raise ValueError("document is not a FeatureCollection")
    annotations = []
    for feature in doc.get("features", []):
        geometry = feature["geometry"]
        if geometry["type"] != "Polygon":
            raise ValueError(f"unsupported geometry {geometry['type']!r}")
        rings = [[(float(x), float(y)) for x, y in ring] for ring in geometry["coordinates"]]
        for ring in rings:
            _validate_ring(ring)
        outer, holes = rings[0], rings[1:]
        area = shoelace_area(outer) + sum(shoelace_area(h) for h in holes)
        mean_p = float(feature["properties"]["measurements"]["mean_probability"])
        annotations.append(
            TumorAnnotation(
                outer_ring=outer, holes=holes, mean_probability=mean_p, area_px=area
            )
        )
    return annotations


def geojson_dumps(doc: dict) -> str:
    """Deterministic compact serialization; stable under parse/re-serialize."""
    return json.dumps(doc, separators=(",", ":"))

import json

import numpy as np
import pytest

from tumormap.contours import (
    TumorAnnotation,
    extract_contours,
    from_geojson,
    geojson_dumps,
    rescale_to_level0,
    shoelace_area,
    to_geojson,
)
from tumormap.errors import InvalidRing


def disk_mask(size=20, center=(10, 10), radius=8):
    yy, xx = np.mgrid[0:size, 0:size]
    return (yy - center[0]) ** 2 + (xx - center[1]) ** 2 <= radius**2


class TestExtract:
    def test_empty_mask(self):
        assert extract_contours(np.zeros((5, 5), dtype=bool)) == []

    def test_single_cell_unit_square(self):
        mask = np.zeros((3, 3), dtype=bool)
        mask[1, 1] = True
        anns = extract_contours(mask, min_area_cells=1)
        assert len(anns) == 1
        ann = anns[0]
        assert ann.area_px == 1.0
        assert ann.holes == []
        assert ann.outer_ring[0] == ann.outer_ring[-1]
        assert len(ann.outer_ring) == 5
        assert shoelace_area(ann.outer_ring) == 1.0

    def test_min_area_filter_default_two(self):
        mask = np.zeros((5, 5), dtype=bool)
        mask[0, 0] = True  # single-cell speckle
        mask[3, 3] = mask[3, 4] = True
        anns = extract_contours(mask)
        assert len(anns) == 1
        assert anns[0].area_px == 2.0

    def test_disk_area_matches_cell_count(self):
        mask = disk_mask()
        anns = extract_contours(mask)
        assert len(anns) == 1
        true_cells = int(mask.sum())
        assert anns[0].holes == []
        assert abs(anns[0].area_px - true_cells) <= 0.05 * true_cells
        assert abs(anns[0].area_px - np.pi * 64) <= 0.05 * np.pi * 64

    def test_diagonal_pair_is_one_component(self):
        mask = np.zeros((4, 4), dtype=bool)
        mask[1, 1] = mask[2, 2] = True
        anns = extract_contours(mask, min_area_cells=1)
        assert len(anns) == 1
        assert anns[0].area_px == 2.0

    def test_diagonal_holes_stay_separate(self):
        # complementary connectivity: 8-connected regions, 4-connected holes
        mask = np.ones((4, 4), dtype=bool)
        mask[1, 1] = mask[2, 2] = False
        anns = extract_contours(mask, min_area_cells=1)
        assert len(anns) == 1
        assert len(anns[0].holes) == 2
        assert anns[0].area_px == 14.0

    def test_ring_orientations(self):
        mask = np.ones((3, 3), dtype=bool)
        mask[1, 1] = False
        ann = extract_contours(mask, min_area_cells=1)[0]
        assert shoelace_area(ann.outer_ring) > 0  # counterclockwise
        assert all(shoelace_area(h) < 0 for h in ann.holes)  # clockwise
        assert ann.area_px == 8.0

    def test_mean_probability_from_grid(self):
        mask = np.zeros((2, 2), dtype=bool)
        mask[0, 0] = mask[0, 1] = True
        probs = np.array([[0.6, 0.8], [0.1, 0.2]])
        ann = extract_contours(mask, probabilities=probs, min_area_cells=1)[0]
        assert ann.mean_probability == pytest.approx(0.7)

    def test_sorted_by_descending_area(self):
        mask = np.zeros((10, 10), dtype=bool)
        mask[0:2, 0:2] = True  # area 4
        mask[5:8, 5:8] = True  # area 9
        anns = extract_contours(mask)
        assert [a.area_px for a in anns] == [9.0, 4.0]

    def test_area_ties_broken_by_position(self):
        mask = np.zeros((6, 6), dtype=bool)
        mask[4, 0:2] = True
        mask[0, 3:5] = True
        anns = extract_contours(mask)
        # equal areas: the component with the smaller min row comes first
        assert anns[0].outer_ring[0][1] == 0.0
        assert anns[1].outer_ring[0][1] == 4.0

    def test_total_area_matches_cell_count(self, rng):
        for _ in range(10):
            mask = rng.random((12, 12)) < 0.45
            anns = extract_contours(mask, min_area_cells=1)
            total = sum(a.area_px for a in anns)
            assert total == pytest.approx(int(mask.sum()), rel=0.05)


class TestRescale:
    def unit_square(self):
        ring = [(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0), (0.0, 0.0)]
        return TumorAnnotation(outer_ring=ring, mean_probability=0.9, area_px=1.0)

    def test_identity(self):
        ann = self.unit_square()
        out = rescale_to_level0(ann, 1, 1.0)
        assert out.outer_ring == ann.outer_ring
        assert out.area_px == 1.0

    def test_coordinate_arithmetic(self):
        ann = TumorAnnotation(
            outer_ring=[(2.0, 3.0), (3.0, 3.0), (3.0, 4.0), (2.0, 4.0), (2.0, 3.0)],
            area_px=1.0,
        )
        out = rescale_to_level0(ann, 224, 4.0)
        assert out.outer_ring[0] == (2 * 896.0, 3 * 896.0) == (1792.0, 2688.0)
        assert all(
            (sx, sy) == (x * 896.0, y * 896.0)
            for (sx, sy), (x, y) in zip(out.outer_ring, ann.outer_ring)
        )

    def test_unit_square_area_at_tile_scale(self):
        out = rescale_to_level0(self.unit_square(), 224, 1.0)
        assert out.area_px == 224.0**2 == 50176.0

    def test_topology_and_vertex_counts_preserved(self):
        mask = np.ones((3, 3), dtype=bool)
        mask[1, 1] = False
        ann = extract_contours(mask, min_area_cells=1)[0]
        out = rescale_to_level0(ann, 224, 4.0)
        assert len(out.outer_ring) == len(ann.outer_ring)
        assert len(out.holes) == len(ann.holes)
        assert len(out.holes[0]) == len(ann.holes[0])
        assert shoelace_area(out.outer_ring) == pytest.approx(
            shoelace_area(ann.outer_ring) * 896.0**2
        )


class TestGeoJson:
    def test_empty_collection(self):
        doc = to_geojson([], "slide")
        assert geojson_dumps(doc) == '{"type":"FeatureCollection","features":[]}'

    def test_feature_schema(self):
        mask = disk_mask()
        anns = extract_contours(mask, probabilities=np.full((20, 20), 0.75))
        doc = to_geojson(anns, "demo")
        feature = doc["features"][0]
        assert feature["type"] == "Feature"
        assert feature["geometry"]["type"] == "Polygon"
        props = feature["properties"]
        assert props["objectType"] == "annotation"
        assert props["classification"] == {"name": "Tumor", "color": [200, 0, 0]}
        assert props["measurements"]["mean_probability"] == pytest.approx(0.75)

    def test_rings_closed(self):
        anns = extract_contours(disk_mask())
        doc = to_geojson(anns, "demo")
        for feature in doc["features"]:
            for ring in feature["geometry"]["coordinates"]:
                assert ring[0] == ring[-1]
                assert len(ring) >= 4

    def test_round_trip_structural_identity(self):
        mask = np.ones((4, 4), dtype=bool)
        mask[1, 1] = mask[2, 2] = False
        anns = extract_contours(mask, min_area_cells=1)
        anns = [rescale_to_level0(a, 224, 2.0) for a in anns]
        doc = to_geojson(anns, "demo")
        parsed = from_geojson(json.loads(geojson_dumps(doc)))
        assert len(parsed) == len(anns)
        for a, b in zip(anns, parsed):
            assert a.outer_ring == b.outer_ring
            assert a.holes == b.holes
            assert a.mean_probability == b.mean_probability
            assert a.area_px == pytest.approx(b.area_px)

    def test_serialization_byte_stable(self):
        anns = extract_contours(disk_mask(), probabilities=np.full((20, 20), 1 / 3))
        text = geojson_dumps(to_geojson(anns, "demo"))
        again = geojson_dumps(json.loads(text))
        assert again.encode() == text.encode()

    def test_open_ring_rejected(self):
        ann = TumorAnnotation(
            outer_ring=[(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0)]
        )
        with pytest.raises(InvalidRing):
            to_geojson([ann], "s")

    def test_tiny_ring_rejected(self):
        ann = TumorAnnotation(outer_ring=[(0.0, 0.0), (1.0, 0.0), (0.0, 0.0)])
        with pytest.raises(InvalidRing):
            to_geojson([ann], "s")

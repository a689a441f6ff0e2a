import numpy as np
import pytest
import tifffile
from PIL import Image

from tumormap.errors import CorruptImage, NoTiles, OutOfBounds, UnsupportedFormat
from tumormap.slide import extract_tile, grid_shape, open_slide, tile_grid


def checker_image(w, h):
    x = np.arange(w)[None, :]
    y = np.arange(h)[:, None]
    value = ((x * 3 + y * 7) % 256).astype(np.uint8)
    return np.stack([value, value[::-1, :], (value // 2)], axis=-1)


def write_png(path, pixels):
    Image.fromarray(pixels).save(path)
    return path


class TestOpenSlide:
    def test_png_single_level(self, tmp_path):
        path = write_png(tmp_path / "small.png", checker_image(224, 224))
        src = open_slide(path)
        assert src.slide_id == "small"
        assert len(src.levels) == 1
        level = src.levels[0]
        assert (level.width, level.height, level.downsample) == (224, 224, 1.0)

    def test_pyramidal_tiff_downsamples(self, tmp_path):
        path = tmp_path / "pyramid.tif"
        with tifffile.TiffWriter(path) as tif:
            tif.write(np.zeros((4096, 4096, 3), dtype=np.uint8))
            tif.write(np.zeros((1024, 1024, 3), dtype=np.uint8))
            tif.write(np.zeros((256, 256, 3), dtype=np.uint8))
        src = open_slide(path)
        assert [lv.downsample for lv in src.levels] == [1.0, 4.0, 16.0]
        assert [lv.width for lv in src.levels] == [4096, 1024, 256]

    def test_tiff_pages_sorted_by_area(self, tmp_path):
        path = tmp_path / "unordered.tif"
        with tifffile.TiffWriter(path) as tif:
            tif.write(np.full((64, 64, 3), 9, dtype=np.uint8))
            tif.write(np.full((256, 256, 3), 5, dtype=np.uint8))
        src = open_slide(path)
        assert src.levels[0].width == 256
        assert src.read_region(0, 0, 0, 1, 1)[0, 0, 0] == 5
        assert src.read_region(1, 0, 0, 1, 1)[0, 0, 0] == 9

    def test_single_page_tiff_one_level(self, tmp_path):
        path = tmp_path / "flat.tif"
        tifffile.imwrite(path, checker_image(400, 300))
        src = open_slide(path)
        assert len(src.levels) == 1
        assert src.levels[0].downsample == 1.0

    def test_gray16_tiff_rejected(self, tmp_path):
        path = tmp_path / "gray16.tif"
        tifffile.imwrite(path, np.zeros((64, 64), dtype=np.uint16))
        with pytest.raises(UnsupportedFormat):
            open_slide(path)

    def test_rgba_png_rejected(self, tmp_path):
        path = tmp_path / "rgba.png"
        Image.fromarray(np.zeros((32, 32, 4), dtype=np.uint8)).save(path)
        with pytest.raises(UnsupportedFormat):
            open_slide(path)

    def test_unknown_extension_rejected(self, tmp_path):
        path = tmp_path / "slide.jpg"
        path.write_bytes(b"not an image")
        with pytest.raises(UnsupportedFormat):
            open_slide(path)

    def test_corrupt_png(self, tmp_path):
        path = tmp_path / "broken.png"
        path.write_bytes(b"\x89PNG\r\n\x1a\nnot really a png")
        with pytest.raises(CorruptImage):
            open_slide(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            open_slide(tmp_path / "nope.png")

    def test_inconsistent_pyramid_rejected(self, tmp_path):
        # height ratio 2x vs width ratio 4x
        path = tmp_path / "skewed.tif"
        with tifffile.TiffWriter(path) as tif:
            tif.write(np.zeros((512, 512, 3), dtype=np.uint8))
            tif.write(np.zeros((256, 128, 3), dtype=np.uint8))
        with pytest.raises(CorruptImage):
            open_slide(path)


class TestTileGrid:
    def test_single_tile(self, tmp_path):
        src = open_slide(write_png(tmp_path / "s.png", checker_image(224, 224)))
        coords = tile_grid(src, 0, 224)
        assert len(coords) == 1
        assert (coords[0].col, coords[0].row) == (0, 0)
        assert coords[0].origin == (0, 0)

    def test_floor_arithmetic(self, tmp_path):
        src = open_slide(write_png(tmp_path / "s.png", checker_image(1000, 600)))
        coords = tile_grid(src, 0, 224)
        assert len(coords) == 8  # 4 cols x 2 rows
        assert grid_shape(src, 0, 224) == (2, 4)
        assert coords[-1].origin == (672, 224)

    def test_sub_tile_level(self, tmp_path):
        src = open_slide(write_png(tmp_path / "s.png", checker_image(200, 200)))
        with pytest.raises(NoTiles):
            tile_grid(src, 0, 224)

    def test_row_major_and_deterministic(self, tmp_path):
        src = open_slide(write_png(tmp_path / "s.png", checker_image(500, 500)))
        coords = tile_grid(src, 0, 100)
        assert [(c.col, c.row) for c in coords[:6]] == [
            (0, 0), (1, 0), (2, 0), (3, 0), (4, 0), (0, 1),
        ]
        assert coords == tile_grid(src, 0, 100)


class TestExtractTile:
    def test_constant_color(self, tmp_path):
        pixels = np.full((448, 448, 3), (10, 200, 30), dtype=np.uint8)
        src = open_slide(write_png(tmp_path / "s.png", pixels))
        tile = extract_tile(src, tile_grid(src, 0, 224)[0])
        assert (tile.pixels == (10, 200, 30)).all()

    def test_offset_tile_matches_function(self, tmp_path):
        pixels = checker_image(512, 512)
        src = open_slide(write_png(tmp_path / "s.png", pixels))
        coords = {(c.col, c.row): c for c in tile_grid(src, 0, 224)}
        tile = extract_tile(src, coords[(1, 1)])
        # top-left corner of tile (1,1) is source pixel (x=224, y=224)
        assert (tile.pixels == pixels[224:448, 224:448]).all()
        assert tile.pixels[0, 0, 0] == (224 * 3 + 224 * 7) % 256

    def test_out_of_bounds(self, tmp_path):
        src = open_slide(write_png(tmp_path / "s.png", checker_image(224, 224)))
        from tumormap.slide import TileCoord

        with pytest.raises(OutOfBounds):
            extract_tile(src, TileCoord(col=1, row=0, level=0, tile_size=224))
        with pytest.raises(OutOfBounds):
            extract_tile(src, TileCoord(col=0, row=0, level=3, tile_size=224))

    def test_stitching_reconstructs_grid_region(self, tmp_path):
        pixels = checker_image(300, 260)
        src = open_slide(write_png(tmp_path / "s.png", pixels))
        coords = tile_grid(src, 0, 100)
        rows, cols = grid_shape(src, 0, 100)
        stitched = np.zeros((rows * 100, cols * 100, 3), dtype=np.uint8)
        for coord in coords:
            x, y = coord.origin
            stitched[y : y + 100, x : x + 100] = extract_tile(src, coord).pixels
        assert (stitched == pixels[: rows * 100, : cols * 100]).all()

    def test_tiff_level1_extraction(self, tmp_path):
        base = checker_image(448, 448)
        low = checker_image(224, 224)
        path = tmp_path / "p.tif"
        with tifffile.TiffWriter(path) as tif:
            tif.write(base)
            tif.write(low)
        src = open_slide(path)
        tile = extract_tile(src, tile_grid(src, 1, 224)[0])
        assert (tile.pixels == low).all()

"""Shared synthesis helpers: stain renders, textured tiles, slide files."""

import numpy as np
import pytest
from PIL import Image

from tumormap.slide import TileCoord, TileRecord
from tumormap.stain import default_reference


def make_tile(pixels, slide_id="test", col=0, row=0, level=0):
    pixels = np.asarray(pixels, dtype=np.uint8)
    coord = TileCoord(col=col, row=row, level=level, tile_size=pixels.shape[0])
    return TileRecord(coord=coord, pixels=pixels, slide_id=slide_id)


def constant_tile(rgb, size=224, **kw):
    pixels = np.empty((size, size, 3), dtype=np.uint8)
    pixels[:] = rgb
    return make_tile(pixels, **kw)


def random_stain_matrix(rng, min_angle_deg=15.0):
    """Random nonnegative unit columns at least min_angle_deg apart."""
    while True:
        m = rng.uniform(0.05, 1.0, size=(3, 2))
        m = m / np.linalg.norm(m, axis=0)
        cos = np.clip(m[:, 0] @ m[:, 1], -1.0, 1.0)
        if np.degrees(np.arccos(cos)) >= min_angle_deg:
            return m


def render_stains(stain_matrix, concentrations, io=255.0):
    """Forward Beer-Lambert render: I = io * 10^-(S @ C), quantized to uint8."""
    od = np.asarray(concentrations) @ np.asarray(stain_matrix).T
    return np.clip(np.rint(io * 10.0 ** (-od)), 0, 255).astype(np.uint8)


def two_stain_tile(rng, stain_matrix=None, size=224, pure_frac=0.1, c_max=1.2):
    """A synthetic two-stain tile with some near-pure pixels of each stain.

    Returns (TileRecord, stain_matrix, concentrations). The pure pixels
    put mass at the extreme angles so percentile-based estimation can
    recover the true columns.
    """
    if stain_matrix is None:
        stain_matrix = random_stain_matrix(rng)
    n = size * size
    conc = rng.uniform(0.05, c_max, size=(n, 2))
    n_pure = max(1, int(n * pure_frac))
    # pure pixels carry visible concentration so the extreme angles are
    # populated away from the quantization-noisy near-white region
    conc[: 2 * n_pure] = rng.uniform(0.3, c_max, size=(2 * n_pure, 2))
    conc[:n_pure, 1] = 0.0
    conc[n_pure : 2 * n_pure, 0] = 0.0
    perm = rng.permutation(n)
    conc = conc[perm]
    pixels = render_stains(stain_matrix, conc).reshape(size, size, 3)
    return make_tile(pixels), stain_matrix, conc


def tissue_pixels(rng, n, reference=None, c_range=((0.2, 0.9), (0.3, 1.0))):
    """Flat (n, 3) array of realistic two-stain tissue pixels."""
    reference = reference or default_reference()
    conc = np.stack(
        [rng.uniform(*c_range[0], n), rng.uniform(*c_range[1], n)], axis=1
    )
    return render_stains(reference.stain_matrix, conc)


def tissue_tile(rng, size=224, **kw):
    pixels = tissue_pixels(rng, size * size).reshape(size, size, 3)
    return make_tile(pixels, **kw)


def angular_error_deg(u, v):
    cos = np.clip(abs(np.dot(u, v)), -1.0, 1.0)
    return float(np.degrees(np.arccos(cos)))


def match_profile_columns(true_matrix):
    """Reorder a ground-truth stain matrix by the larger-blue-first convention."""
    m = np.asarray(true_matrix, dtype=np.float64).copy()
    if m[2, 1] > m[2, 0]:
        m = m[:, ::-1]
    return m


def write_tissue_slide_png(path, rng, n_tiles=(4, 4), tile_size=224, block=None):
    """Write a PNG slide of synthetic tissue; optionally remember a tile block.

    block is ((row0, row1), (col0, col1)) half-open tile ranges and is
    returned as the set of (col, row) tumor tiles for stub tables.
    """
    rows, cols = n_tiles
    h, w = rows * tile_size, cols * tile_size
    pixels = tissue_pixels(rng, h * w).reshape(h, w, 3)
    Image.fromarray(pixels).save(path)
    tumor = set()
    if block:
        (r0, r1), (c0, c1) = block
        tumor = {(c, r) for r in range(r0, r1) for c in range(c0, c1)}
    return tumor


def write_stub_table(path, slide_id, tumor_tiles, p_tumor=0.9, p_default=0.1):
    lines = ["slide_id,col,row,p_pos", f"default,,,{p_default}"]
    for col, row in sorted(tumor_tiles):
        lines.append(f"{slide_id},{col},{row},{p_tumor}")
    path.write_text("\n".join(lines) + "\n")


def brute_force_auc(scores, labels):
    """O(n^2) pairwise oracle: wins + half ties over all pos/neg pairs."""
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    total = 0.0
    for p in pos:
        for q in neg:
            if p > q:
                total += 1.0
            elif p == q:
                total += 0.5
    return total / (len(pos) * len(neg))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)

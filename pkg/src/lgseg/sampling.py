"""Aligned triple-window sampling, inference tiling, and residential labeling.

A training sample pairs three windows sharing one centre at one spatial
resolution: a 64x64 local image window, a 256x256 global image window, and the
16x16 binary target cut from the label map.  Image windows that overrun the
raster are reflection-padded (mirror about the edge pixel, no edge repeat);
target windows are never padded, so valid centres keep at least 8 px of
margin.  At inference the image is tiled by disjoint 16x16 target windows on a
grid, with a final shifted tile covering any ragged right/bottom margin.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy import ndimage

from .network import GLOBAL_WIDTH, LOCAL_WIDTH, TARGET_WIDTH
from .raster import LabelMap, Raster
from .rng import SplitMix64

_EIGHT = np.ones((3, 3), dtype=int)


class PatchTriplet:
    """Co-centred (local image, global image, target label) windows.

    local_patch and global_patch are float64 (3, w, w) tensors scaled to
    [0, 1]; the target is a (16, 16) uint8 patch of raw labels.  Windows are
    held as raw bytes internally and materialised on access, so thousands of
    triplets fit in memory.
    """

    __slots__ = ("center", "target", "_local_u8", "_global_u8")

    def __init__(self, center: tuple, local_u8: np.ndarray, global_u8: np.ndarray,
                 target: np.ndarray):
        self.center = center
        self._local_u8 = local_u8
        self._global_u8 = global_u8
        self.target = target

    @property
    def local_patch(self) -> np.ndarray:
        return self._local_u8.astype(np.float64) / 255.0

    @property
    def global_patch(self) -> np.ndarray:
        return self._global_u8.astype(np.float64) / 255.0


class ResidentialClass(Enum):
    RESIDENTIAL = "residential"
    NON_RESIDENTIAL = "non_residential"
    EXCLUDED = "excluded"


def reflect_index(idx: np.ndarray, n: int) -> np.ndarray:
    """Fold arbitrary integer indices into [0, n) by mirroring about the edge
    pixels (period 2n-2, no edge repeat); identity on in-range indices."""
    if n == 1:
        return np.zeros_like(idx)
    period = 2 * n - 2
    folded = np.mod(idx, period)
    return np.where(folded >= n, period - folded, folded)


def window_bounds(center: int, width: int) -> tuple:
    """Half-open [start, stop) span of a width-wide window centred at center."""
    start = center - width // 2
    return start, start + width


def extract_window(image: np.ndarray, center: tuple, width: int) -> np.ndarray:
    """Reflection-padded width x width window of an (H, W) or (H, W, C) array."""
    r0, r1 = window_bounds(center[0], width)
    c0, c1 = window_bounds(center[1], width)
    rows = reflect_index(np.arange(r0, r1), image.shape[0])
    cols = reflect_index(np.arange(c0, c1), image.shape[1])
    return image[np.ix_(rows, cols)]


def valid_center_range(height: int, width: int) -> tuple:
    """Inclusive (row_min, row_max, col_min, col_max) for target-window centres."""
    half = TARGET_WIDTH // 2
    rmin, rmax = half, height - half
    cmin, cmax = half, width - half
    if rmax < rmin or cmax < cmin:
        raise ValueError(f"raster {height}x{width} too small for {TARGET_WIDTH}px targets")
    return rmin, rmax, cmin, cmax


def raw_window(pixels: np.ndarray, center: tuple, width: int) -> np.ndarray:
    """Reflection-padded window as a (C, width, width) uint8 array."""
    win = extract_window(pixels, center, width)
    return np.ascontiguousarray(win.transpose(2, 0, 1))


def image_window(pixels: np.ndarray, center: tuple, width: int) -> np.ndarray:
    """Reflection-padded window as a (C, width, width) float64 array in [0, 1]."""
    return raw_window(pixels, center, width).astype(np.float64) / 255.0


def make_triplet(raster: Raster, labels: LabelMap, center: tuple) -> PatchTriplet:
    """One aligned sample; the centre must leave the target window in bounds."""
    rmin, rmax, cmin, cmax = valid_center_range(labels.height, labels.width)
    r, c = center
    if not (rmin <= r <= rmax and cmin <= c <= cmax):
        raise ValueError(f"centre {center} puts the target window outside the label map")
    half = TARGET_WIDTH // 2
    target = labels.labels[r - half:r + half, c - half:c + half].copy()
    return PatchTriplet(
        center=(r, c),
        local_u8=raw_window(raster.pixels, center, LOCAL_WIDTH),
        global_u8=raw_window(raster.pixels, center, GLOBAL_WIDTH),
        target=target,
    )


def sample_triplets(raster: Raster, labels: LabelMap, centers=None,
                    count: int | None = None, seed: int = 0) -> list:
    """Triplets at explicit centres, or `count` centres drawn uniformly from
    the valid target region (deterministic for a fixed seed)."""
    if raster.width != labels.width or raster.height != labels.height:
        raise ValueError("raster and label map extents differ")
    if centers is None:
        if count is None:
            raise ValueError("give either explicit centers or a count")
        rmin, rmax, cmin, cmax = valid_center_range(labels.height, labels.width)
        rng = SplitMix64(seed)
        centers = [(rng.int_range(rmin, rmax), rng.int_range(cmin, cmax))
                   for _ in range(count)]
    return [make_triplet(raster, labels, c) for c in centers]


# ---------------------------------------------------------------------------
# inference tiling


def _axis_starts(extent: int) -> list:
    starts = list(range(0, extent - TARGET_WIDTH + 1, TARGET_WIDTH))
    if extent % TARGET_WIDTH != 0:
        starts.append(extent - TARGET_WIDTH)  # shifted final tile at the border
    return starts


def grid_centers(shape: tuple) -> list:
    """Ordered centres whose 16x16 target windows tile the image disjointly;
    a ragged margin gets one extra shifted tile per axis ending at the border."""
    height, width = shape
    if height < TARGET_WIDTH or width < TARGET_WIDTH:
        raise ValueError(f"image {height}x{width} smaller than one {TARGET_WIDTH}px tile")
    half = TARGET_WIDTH // 2
    return [(r + half, c + half)
            for r in _axis_starts(height)
            for c in _axis_starts(width)]


def stitch(centers, patches, shape: tuple) -> np.ndarray:
    """Reassemble per-tile 16x16 predictions into a full map.

    Tiles are written in order, so overlap pixels from shifted margin tiles
    take the later tile's values.
    """
    if len(centers) != len(patches):
        raise ValueError(f"{len(centers)} centers but {len(patches)} patches")
    height, width = shape
    out = np.zeros((height, width), dtype=np.float64)
    half = TARGET_WIDTH // 2
    for (r, c), patch in zip(centers, patches):
        patch = np.asarray(patch, dtype=np.float64)
        if patch.shape != (TARGET_WIDTH, TARGET_WIDTH):
            raise ValueError("every patch must be 16x16")
        out[r - half:r + half, c - half:c + half] = patch
    return out


def tile_index_map(shape: tuple) -> np.ndarray:
    """Index of the covering tile per pixel, consistent with stitch overwrite
    order (shifted margin tiles own their overlap)."""
    height, width = shape
    centers = grid_centers(shape)
    out = np.zeros((height, width), dtype=np.int64)
    half = TARGET_WIDTH // 2
    for i, (r, c) in enumerate(centers):
        out[r - half:r + half, c - half:c + half] = i
    return out


def grid_shape(shape: tuple) -> tuple:
    return len(_axis_starts(shape[0])), len(_axis_starts(shape[1]))


def tile_center_axes(shape: tuple) -> tuple:
    """Per-axis tile-centre coordinates (row centres, column centres)."""
    half = TARGET_WIDTH // 2
    return ([s + half for s in _axis_starts(shape[0])],
            [s + half for s in _axis_starts(shape[1])])


# ---------------------------------------------------------------------------
# residential rule


def residential_label(labels: LabelMap, center: tuple, min_houses: int = 15) -> ResidentialClass:
    """Classify the 256x256 window (clipped at borders) around a centre by the
    number of 8-connected building components intersecting it: none at all is
    non-residential, at least min_houses is residential, in between excluded."""
    comps, n = ndimage.label(labels.labels, structure=_EIGHT)
    if n == 0:
        return ResidentialClass.NON_RESIDENTIAL
    half = GLOBAL_WIDTH // 2
    r0 = max(0, center[0] - half)
    r1 = min(labels.height, center[0] + half)
    c0 = max(0, center[1] - half)
    c1 = min(labels.width, center[1] + half)
    seen = np.unique(comps[r0:r1, c0:c1])
    count = int((seen > 0).sum())
    if count == 0:
        return ResidentialClass.NON_RESIDENTIAL
    if count >= min_houses:
        return ResidentialClass.RESIDENTIAL
    return ResidentialClass.EXCLUDED

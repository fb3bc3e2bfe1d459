"""Contrast limited adaptive histogram equalisation (CLAHE)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class ClaheParams:
    """Tile grid, clip limit and histogram resolution.

    ``clip_limit`` is a multiple of the uniform bin height
    ``tile_pixels / bins``. Defaults follow common practice; there is no
    canonical value for radiographs.
    """

    tiles_x: int = 8
    tiles_y: int = 8
    clip_limit: float = 2.0
    bins: int = 256

    def __post_init__(self):
        if self.tiles_x < 1 or self.tiles_y < 1:
            raise ValueError("tile counts must be >= 1")
        if not self.clip_limit > 0:
            raise ValueError("clip_limit must be > 0")
        if self.bins < 2:
            raise ValueError("bins must be >= 2")


def bin_index(img: np.ndarray, bins: int) -> np.ndarray:
    """Bin of each pixel: ``min(floor(p * bins), bins - 1)``."""
    idx = np.floor(np.asarray(img, dtype=np.float64) * bins).astype(np.intp)
    return np.clip(idx, 0, bins - 1)


def histogram(img: np.ndarray, bins: int = 256) -> np.ndarray:
    if bins < 2:
        raise ValueError("bins must be >= 2")
    return np.bincount(bin_index(img, bins).ravel(), minlength=bins).astype(np.int64)


def tile_edges(n: int, tiles: int) -> np.ndarray:
    """Tile boundaries along one axis; the remainder joins the last tile."""
    step = n // tiles
    edges = np.arange(tiles + 1) * step
    edges[-1] = n
    return edges


def clip_histogram(hist: np.ndarray, clip_limit: float) -> np.ndarray:
    """Clip at ``clip_limit * total / bins`` and spread the excess uniformly.

    The integer excess is divided evenly over all bins and the remainder goes
    one count each to the lowest bins, so the total is conserved exactly.
    """
    hist = np.asarray(hist, dtype=np.int64)
    bins = hist.size
    total = int(hist.sum())
    limit = max(1, int(clip_limit * total / bins))
    excess = int(np.maximum(hist - limit, 0).sum())
    out = np.minimum(hist, limit)
    out += excess // bins
    out[: excess % bins] += 1
    return out


def tile_mapping(hist: np.ndarray) -> np.ndarray:
    """Equalisation lookup table ``cdf(b) / total`` for one tile."""
    cdf = np.cumsum(hist)
    return cdf / cdf[-1]


def clahe(img: np.ndarray, params: ClaheParams | None = None) -> np.ndarray:
    params = params or ClaheParams()
    arr = np.asarray(img, dtype=np.float64)
    h, w = arr.shape
    if h < params.tiles_y or w < params.tiles_x:
        raise ValueError(
            f"image {w}x{h} is smaller than the {params.tiles_x}x{params.tiles_y} tile grid"
        )
    bins = params.bins
    idx = bin_index(arr, bins)
    ys = tile_edges(h, params.tiles_y)
    xs = tile_edges(w, params.tiles_x)

    luts = np.empty((params.tiles_y, params.tiles_x, bins))
    for ty in range(params.tiles_y):
        for tx in range(params.tiles_x):
            tile = idx[ys[ty] : ys[ty + 1], xs[tx] : xs[tx + 1]]
            hist = np.bincount(tile.ravel(), minlength=bins)
            luts[ty, tx] = tile_mapping(clip_histogram(hist, params.clip_limit))

    def neighbours(edges, n):
        centres = (edges[:-1] + edges[1:] - 1) / 2.0
        pos = np.arange(n, dtype=np.float64)
        hi = np.searchsorted(centres, pos, side="right")
        lo = np.clip(hi - 1, 0, centres.size - 1)
        hi = np.clip(hi, 0, centres.size - 1)
        span = centres[hi] - centres[lo]
        frac = np.where(span > 0, (pos - centres[lo]) / np.where(span > 0, span, 1.0), 0.0)
        return lo, hi, np.clip(frac, 0.0, 1.0)

    y0, y1, fy = neighbours(ys, h)
    x0, x1, fx = neighbours(xs, w)
    fy = fy[:, None]
    fx = fx[None, :]
    Y0, Y1 = y0[:, None], y1[:, None]
    X0, X1 = x0[None, :], x1[None, :]
    top = luts[Y0, X0, idx] * (1.0 - fx) + luts[Y0, X1, idx] * fx
    bottom = luts[Y1, X0, idx] * (1.0 - fx) + luts[Y1, X1, idx] * fx
    out = top * (1.0 - fy) + bottom * fy
    return np.clip(out, 0.0, 1.0)

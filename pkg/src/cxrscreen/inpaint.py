"""Fast-marching (Telea) inpainting and the marker-removal composition."""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass

import numpy as np

from .markers import MarkerMask, MarkerParams, detect_markers, morph

KNOWN, BAND, INSIDE = 0, 1, 2
_BLOCKED = 3
_INF = 1.0e6
_EPS = 1.0e-6


@dataclass
class FmmTrace:
    """Arrival times and fill order recorded by :func:`fmm_inpaint_trace`.

    ``arrival`` holds T for every masked pixel (T = 0 on the initial band,
    negative distances outside the mask). ``order`` lists masked pixels as
    ``(y, x)`` in the order they were filled; ``support_max`` is the largest
    T among pixels that contributed to each fill.
    """

    arrival: np.ndarray
    order: list[tuple[int, int]]
    support_max: list[float]


def _solve(dist, flags, h, w, y1, x1, y2, x2) -> float:
    # Quadratic eikonal update from two orthogonal neighbours.
    if not (0 <= y1 < h and 0 <= x1 < w and 0 <= y2 < h and 0 <= x2 < w):
        return _INF
    f1, f2 = flags[y1, x1], flags[y2, x2]
    d1, d2 = dist[y1, x1], dist[y2, x2]
    if f1 == KNOWN and f2 == KNOWN:
        disc = 2.0 - (d1 - d2) ** 2
        if disc > 0.0:
            r = math.sqrt(disc)
            s = (d1 + d2 - r) / 2.0
            if s >= d1 and s >= d2:
                return s
            s += r
            if s >= d1 and s >= d2:
                return s
            return _INF
    if f1 == KNOWN:
        return 1.0 + d1
    if f2 == KNOWN:
        return 1.0 + d2
    return _INF


def _arrival(dist, flags, h, w, y, x) -> float:
    return min(
        _solve(dist, flags, h, w, y - 1, x, y, x - 1),
        _solve(dist, flags, h, w, y + 1, x, y, x + 1),
        _solve(dist, flags, h, w, y - 1, x, y, x + 1),
        _solve(dist, flags, h, w, y + 1, x, y, x - 1),
    )


def _neighbours(y, x, h, w):
    for ny, nx in ((y - 1, x), (y, x - 1), (y + 1, x), (y, x + 1)):
        if 0 <= ny < h and 0 <= nx < w:
            yield ny, nx


def _grad(vals, flags, h, w, y, x) -> tuple[float, float]:
    """Central/one-sided differences over non-INSIDE neighbours."""
    out = []
    for dy, dx in ((1, 0), (0, 1)):
        py, px, ny, nx = y - dy, x - dx, y + dy, x + dx
        prev_ok = 0 <= py < h and 0 <= px < w and flags[py, px] != INSIDE
        next_ok = 0 <= ny < h and 0 <= nx < w and flags[ny, nx] != INSIDE
        if prev_ok and next_ok:
            g = (vals[ny, nx] - vals[py, px]) / 2.0
        elif prev_ok:
            g = vals[y, x] - vals[py, px]
        elif next_ok:
            g = vals[ny, nx] - vals[y, x]
        else:
            g = 0.0
        out.append(g)
    return out[0], out[1]


def _outside_distances(dist, flags, band, h, w, limit):
    # March outward from the band into the known region so the level-set
    # weight sees signed distances on both sides of the boundary.
    band = list(band)
    heapq.heapify(band)
    flipped = np.where(flags == KNOWN, INSIDE, np.where(flags == INSIDE, _BLOCKED, flags))
    out = np.where(flags == KNOWN, _INF, 0.0)
    while band:
        t, y, x = heapq.heappop(band)
        if t >= limit:
            break
        flipped[y, x] = KNOWN
        for ny, nx in _neighbours(y, x, h, w):
            if flipped[ny, nx] != INSIDE:
                continue
            nt = _arrival(out, flipped, h, w, ny, nx)
            out[ny, nx] = nt
            flipped[ny, nx] = BAND
            heapq.heappush(band, (nt, ny, nx))
    known = flags == KNOWN
    dist[known] = -np.minimum(out[known], limit)


def fmm_inpaint_trace(img: np.ndarray, mask, radius: int = 3) -> tuple[np.ndarray, FmmTrace]:
    arr = np.asarray(img, dtype=np.float64)
    m = np.asarray(mask, dtype=bool)
    if m.shape != arr.shape:
        raise ValueError(f"mask shape {m.shape} does not match image shape {arr.shape}")
    if radius < 1:
        raise ValueError("radius must be >= 1")
    h, w = arr.shape
    out = arr.copy()
    arrival = np.zeros((h, w))
    if not m.any():
        return out, FmmTrace(arrival, [], [])
    if m.all():
        raise ValueError("mask covers the whole image; nothing to inpaint from")

    flags = np.where(m, INSIDE, KNOWN).astype(np.int8)
    dist = np.where(m, _INF, 0.0)
    band = []
    for y, x in zip(*np.nonzero(m)):
        for ny, nx in _neighbours(y, x, h, w):
            if flags[ny, nx] == KNOWN:
                flags[ny, nx] = BAND
                band.append((0.0, ny, nx))
    band.sort()
    _outside_distances(dist, flags, band, h, w, limit=2.0 * radius)
    dist[flags == BAND] = 0.0
    heapq.heapify(band)

    order, support = [], []
    while band:
        _, y, x = heapq.heappop(band)
        flags[y, x] = KNOWN
        for ny, nx in _neighbours(y, x, h, w):
            if flags[ny, nx] != INSIDE:
                continue
            t = _arrival(dist, flags, h, w, ny, nx)
            dist[ny, nx] = t
            value, smax = _fill(out, dist, flags, h, w, ny, nx, radius)
            out[ny, nx] = value
            flags[ny, nx] = BAND
            heapq.heappush(band, (t, ny, nx))
            order.append((int(ny), int(nx)))
            support.append(smax)
    arrival[m] = dist[m]
    arrival[~m] = np.minimum(dist[~m], 0.0)
    return out, FmmTrace(arrival, order, support)


def _fill(img, dist, flags, h, w, y, x, radius) -> tuple[float, float]:
    t = dist[y, x]
    gy, gx = _grad(dist, flags, h, w, y, x)
    num = den = 0.0
    smax = -math.inf
    fallback_sum, fallback_n = 0.0, 0
    r2 = radius * radius
    for qy in range(max(0, y - radius), min(h, y + radius + 1)):
        for qx in range(max(0, x - radius), min(w, x + radius + 1)):
            if flags[qy, qx] == INSIDE or (qy == y and qx == x):
                continue
            tq = dist[qy, qx]
            if tq > t:
                continue
            dy, dx = y - qy, x - qx
            d2 = dy * dy + dx * dx
            if d2 > r2:
                continue
            dlen = math.sqrt(d2)
            direction = abs(dy * gy + dx * gx) / dlen
            if direction == 0.0:
                direction = _EPS
            geometric = 1.0 / d2
            level = 1.0 / (1.0 + abs(tq - t))
            wt = direction * geometric * level
            iy, ix = _grad(img, flags, h, w, qy, qx)
            est = img[qy, qx] + iy * dy + ix * dx
            num += wt * est
            den += wt
            fallback_sum += img[qy, qx]
            fallback_n += 1
            smax = max(smax, tq)
    if den > 0.0:
        value = num / den
    elif fallback_n:
        value = fallback_sum / fallback_n
    else:
        value = 0.0
    return min(1.0, max(0.0, value)), smax


def fmm_inpaint(img: np.ndarray, mask, radius: int = 3) -> np.ndarray:
    """Fill masked pixels from the boundary inward by fast marching.

    Each filled value is a weighted mean of first-order estimates
    ``I(q) + grad I(q) . (p - q)`` over already-known pixels ``q`` within
    ``radius``, weighted by alignment with the front normal, inverse squared
    distance and level-set proximity. Pixels outside the mask are returned
    unchanged.
    """
    return fmm_inpaint_trace(img, mask, radius)[0]


def remove_markers(
    img: np.ndarray,
    params: MarkerParams | None = None,
    radius: int = 3,
    dilate_mask: bool = True,
) -> tuple[np.ndarray, MarkerMask]:
    found = detect_markers(img, params)
    mask = found.mask
    if dilate_mask and mask.any():
        mask = morph(mask, "dilate", 3, 3)
    restored = fmm_inpaint(img, mask, radius)
    return restored, MarkerMask(mask=mask, boxes=found.boxes)

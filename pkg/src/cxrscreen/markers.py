"""Detection of burned-in text markers.

The detector runs low-pass (and optionally high-pass) filtering, an Otsu
threshold, a morphological closing that fuses individual glyphs into one
blob, and connected-component labelling. Components whose bounding boxes
have a plausible text area and aspect ratio are kept as markers.

Binary masks are 2-D ``bool`` arrays shaped like the source image.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .enhance import bin_index, histogram


@dataclass(frozen=True)
class Box:
    x: int
    y: int
    w: int
    h: int

    @property
    def area(self) -> int:
        return self.w * self.h

    def iou(self, other: "Box") -> float:
        ix = max(0, min(self.x + self.w, other.x + other.w) - max(self.x, other.x))
        iy = max(0, min(self.y + self.h, other.y + other.h) - max(self.y, other.y))
        inter = ix * iy
        union = self.area + other.area - inter
        return inter / union if union else 0.0

    def slices(self) -> tuple[slice, slice]:
        return slice(self.y, self.y + self.h), slice(self.x, self.x + self.w)


@dataclass(frozen=True)
class MarkerParams:
    blur_sigma: float = 1.0
    highpass: bool = False
    min_area: int = 50
    max_area_frac: float = 0.05
    aspect_min: float = 1.0
    aspect_max: float = 15.0
    close_kernel_w: int = 9
    close_kernel_h: int = 3
    connectivity: int = 8

    def __post_init__(self):
        if self.min_area < 1:
            raise ValueError("min_area must be >= 1")
        if not 0 < self.max_area_frac < 1:
            raise ValueError("max_area_frac must lie in (0, 1)")
        if self.aspect_min > self.aspect_max:
            raise ValueError("aspect_min must not exceed aspect_max")
        if self.connectivity not in (4, 8):
            raise ValueError("connectivity must be 4 or 8")


@dataclass
class MarkerMask:
    mask: np.ndarray
    boxes: list[Box] = field(default_factory=list)

    def boxes_json(self) -> str:
        return json.dumps([asdict(b) for b in self.boxes])


def gaussian_kernel(sigma: float) -> np.ndarray:
    """Normalised sampled Gaussian with radius ``ceil(3 * sigma)``."""
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    radius = int(math.ceil(3.0 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return k / k.sum()


def blur_axis(img: np.ndarray, sigma: float, axis: int) -> np.ndarray:
    """One separable pass of :func:`gaussian_blur` with replicated edges."""
    k = gaussian_kernel(sigma)
    r = k.size // 2
    arr = np.asarray(img, dtype=np.float64)
    pad = [(0, 0), (0, 0)]
    pad[axis] = (r, r)
    padded = np.pad(arr, pad, mode="edge")
    n = arr.shape[axis]
    out = np.zeros_like(arr)
    for i, wt in enumerate(k):
        sl = [slice(None), slice(None)]
        sl[axis] = slice(i, i + n)
        out += wt * padded[tuple(sl)]
    return out


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    return blur_axis(blur_axis(img, sigma, axis=1), sigma, axis=0)


def otsu_threshold(hist) -> int:
    """Otsu's threshold over histogram bins; class 0 is ``bins <= t``.

    Between-class variance is compared exactly in integer arithmetic as
    ``(N*S0 - S*W0)**2 / (W0 * W1)`` (a positive multiple of
    ``w0 * w1 * (mu0 - mu1)**2``), so ties resolve to the lowest ``t``.
    """
    counts = [int(c) for c in hist]
    if any(c < 0 for c in counts):
        raise ValueError("histogram counts must be non-negative")
    total = sum(counts)
    if total < 1:
        raise ValueError("histogram is empty")
    nonzero = [i for i, c in enumerate(counts) if c]
    if len(nonzero) == 1:
        return nonzero[0]
    s_total = sum(i * c for i, c in enumerate(counts))
    best_t, best_num, best_den = 0, -1, 1
    w0 = s0 = 0
    for t, c in enumerate(counts[:-1]):
        w0 += c
        s0 += t * c
        w1 = total - w0
        if w0 == 0 or w1 == 0:
            num, den = 0, 1
        else:
            num, den = (total * s0 - s_total * w0) ** 2, w0 * w1
        if num * best_den > best_num * den:
            best_t, best_num, best_den = t, num, den
    return best_t


def binarize(img: np.ndarray, level: int, bins: int = 256) -> np.ndarray:
    if not 0 <= level < bins:
        raise ValueError("level must lie in [0, bins)")
    return bin_index(img, bins) > level


def _sweep(mask: np.ndarray, k: int, axis: int, combine) -> np.ndarray:
    # Out-of-bounds samples are background (False).
    r = k // 2
    n = mask.shape[axis]
    pad = [(0, 0), (0, 0)]
    pad[axis] = (r, r)
    padded = np.pad(mask, pad, constant_values=False)
    out = None
    for i in range(k):
        sl = [slice(None), slice(None)]
        sl[axis] = slice(i, i + n)
        part = padded[tuple(sl)]
        out = part.copy() if out is None else combine(out, part)
    return out


def dilate(mask, kw: int, kh: int) -> np.ndarray:
    m = np.asarray(mask, dtype=bool)
    return _sweep(_sweep(m, kw, 1, np.logical_or), kh, 0, np.logical_or)


def erode(mask, kw: int, kh: int) -> np.ndarray:
    m = np.asarray(mask, dtype=bool)
    return _sweep(_sweep(m, kw, 1, np.logical_and), kh, 0, np.logical_and)


def morph(mask, op: str, kw: int, kh: int) -> np.ndarray:
    """Binary morphology with a ``kw x kh`` rectangular structuring element.

    ``dilate`` and ``erode`` treat out-of-bounds pixels as background, so
    erosion shrinks components touching the border. ``close`` is evaluated on
    a canvas padded by the kernel half-size and then cropped, which keeps it
    extensive and idempotent near the border as well. ``open`` is erosion
    followed by dilation.
    """
    if kw < 1 or kh < 1 or kw % 2 == 0 or kh % 2 == 0:
        raise ValueError("kernel dimensions must be odd and >= 1")
    m = np.asarray(mask, dtype=bool)
    if op == "dilate":
        return dilate(m, kw, kh)
    if op == "erode":
        return erode(m, kw, kh)
    if op == "open":
        return dilate(erode(m, kw, kh), kw, kh)
    if op == "close":
        rx, ry = kw // 2, kh // 2
        canvas = np.pad(m, ((ry, ry), (rx, rx)), constant_values=False)
        closed = erode(dilate(canvas, kw, kh), kw, kh)
        return closed[ry : ry + m.shape[0], rx : rx + m.shape[1]]
    raise ValueError(f"unknown morphological operation {op!r}")


def _runs(row: np.ndarray) -> list[tuple[int, int]]:
    padded = np.concatenate(([False], row, [False]))
    d = np.flatnonzero(np.diff(padded.astype(np.int8)))
    return list(zip(d[0::2].tolist(), d[1::2].tolist()))


def connected_components(mask, connectivity: int = 8):
    """Label foreground components.

    Returns ``(labels, boxes, counts)``: an int32 label raster with labels
    ``1..K`` assigned in raster order of each component's first pixel, the
    tight bounding box of each component and its pixel count.
    """
    if connectivity not in (4, 8):
        raise ValueError("connectivity must be 4 or 8")
    m = np.asarray(mask, dtype=bool)
    h, w = m.shape
    reach = 1 if connectivity == 8 else 0

    parent: list[int] = []

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    run_rows, run_spans, run_ids = [], [], []
    prev: list[tuple[int, int, int]] = []
    for y in range(h):
        cur = []
        j = 0
        for s, e in _runs(m[y]):
            rid = len(parent)
            parent.append(rid)
            # Runs [s, e) overlap a previous-row run [ps, pe) when ps < e + reach and pe + reach > s.
            while j < len(prev) and prev[j][1] + reach <= s:
                j += 1
            k = j
            while k < len(prev) and prev[k][0] < e + reach:
                ra, rb = find(rid), find(prev[k][2])
                if ra != rb:
                    parent[max(ra, rb)] = min(ra, rb)
                k += 1
            cur.append((s, e, rid))
            run_rows.append(y)
            run_spans.append((s, e))
            run_ids.append(rid)
        prev = cur

    labels = np.zeros((h, w), dtype=np.int32)
    root_label: dict[int, int] = {}
    extents: list[list[int]] = []
    counts: list[int] = []
    for y, (s, e), rid in zip(run_rows, run_spans, run_ids):
        root = find(rid)
        lab = root_label.get(root)
        if lab is None:
            lab = len(extents) + 1
            root_label[root] = lab
            extents.append([s, y, e - 1, y])
            counts.append(0)
        ext = extents[lab - 1]
        ext[0] = min(ext[0], s)
        ext[2] = max(ext[2], e - 1)
        ext[3] = y
        counts[lab - 1] += e - s
        labels[y, s:e] = lab
    # Roots are minimal run ids, so first-seen order is raster order of first pixels.
    boxes = [Box(x0, y0, x1 - x0 + 1, y1 - y0 + 1) for x0, y0, x1, y1 in extents]
    return labels, boxes, counts


def keep_box(box: Box, params: MarkerParams, image_area: int) -> bool:
    if not params.min_area <= box.area <= params.max_area_frac * image_area:
        return False
    return params.aspect_min <= box.w / box.h <= params.aspect_max


def detect_markers(img: np.ndarray, params: MarkerParams | None = None, bins: int = 256) -> MarkerMask:
    params = params or MarkerParams()
    arr = np.asarray(img, dtype=np.float64)
    h, w = arr.shape
    low = gaussian_blur(arr, params.blur_sigma)
    if params.highpass:
        # Unsharp residual, shifted so mid-grey means "no detail".
        signal = np.clip(arr - low + 0.5, 0.0, 1.0)
    else:
        signal = low
    level = otsu_threshold(histogram(signal, bins))
    binary = binarize(signal, level, bins)
    closed = morph(binary, "close", params.close_kernel_w, params.close_kernel_h)
    _, boxes, _ = connected_components(closed, params.connectivity)
    kept = [b for b in boxes if keep_box(b, params, h * w)]
    out = np.zeros((h, w), dtype=bool)
    for b in kept:
        sl = b.slices()
        out[sl] |= closed[sl]
    return MarkerMask(mask=out, boxes=kept)

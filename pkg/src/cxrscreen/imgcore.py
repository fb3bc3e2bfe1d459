"""Image buffers, PNG/PGM I/O, intensity normalisation and resizing.

An image throughout this package is a 2-D ``float64`` numpy array of shape
``(height, width)`` holding intensities in ``[0, 1]``.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

_PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"


class ImageIOError(Exception):
    """Base class for image read failures. ``path`` names the offending file."""

    def __init__(self, path, message):
        self.path = str(path)
        super().__init__(f"{self.path}: {message}")


class ImageNotFoundError(ImageIOError):
    pass


class UnsupportedFormatError(ImageIOError):
    pass


class TruncatedImageError(ImageIOError):
    pass


def check_image(img: np.ndarray) -> np.ndarray:
    """Validate an image buffer and return it as a float64 array."""
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValueError(f"image must be a non-empty 2-D array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("image contains non-finite values")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise ValueError("image values must lie in [0, 1]")
    return arr


def _read_pgm(path: Path, data: bytes) -> tuple[np.ndarray, int]:
    # Header: magic, width, height, maxval separated by whitespace; '#' starts a comment.
    fields: list[bytes] = []
    pos = 2
    while len(fields) < 3:
        if pos >= len(data):
            raise TruncatedImageError(path, "PGM header ended early")
        ch = data[pos : pos + 1]
        if ch == b"#":
            end = data.find(b"\n", pos)
            pos = len(data) if end < 0 else end + 1
        elif ch.isspace():
            pos += 1
        else:
            start = pos
            while pos < len(data) and not data[pos : pos + 1].isspace():
                pos += 1
            fields.append(data[start:pos])
    pos += 1  # single whitespace byte before the raster
    try:
        width, height, maxval = (int(f) for f in fields)
    except ValueError as exc:
        raise UnsupportedFormatError(path, "malformed PGM header") from exc
    if width < 1 or height < 1 or not 0 < maxval < 65536:
        raise UnsupportedFormatError(path, "invalid PGM dimensions or maxval")
    depth = 8 if maxval < 256 else 16
    dtype = np.uint8 if depth == 8 else np.dtype(">u2")
    need = width * height * np.dtype(dtype).itemsize
    raster = data[pos : pos + need]
    if len(raster) < need:
        raise TruncatedImageError(path, f"expected {need} raster bytes, found {len(raster)}")
    samples = np.frombuffer(raster, dtype=dtype).reshape(height, width)
    return samples.astype(np.uint16 if depth == 16 else np.uint8), depth


def _read_png(path: Path, data: bytes) -> tuple[np.ndarray, int]:
    if len(data) < 29:
        raise TruncatedImageError(path, "PNG header ended early")
    bit_depth = data[24]
    try:
        with Image.open(path) as im:
            im.load()
            mode = im.mode
            if mode in ("L", "1"):
                samples = np.array(im.convert("L") if mode == "1" else im)
                depth = 8 if mode == "L" else 1
                if mode == "1":
                    samples = (samples > 0).astype(np.uint8)
            elif mode.startswith("I"):
                samples = np.array(im).astype(np.uint16)
                depth = 16 if bit_depth == 16 else bit_depth
            else:
                # Palette, RGB(A), LA: collapse colour planes by unweighted mean.
                rgb = np.array(im.convert("RGB"), dtype=np.float64)
                return rgb, 8
    except UnidentifiedImageError as exc:
        raise UnsupportedFormatError(path, "not a decodable PNG") from exc
    except (OSError, SyntaxError) as exc:
        raise TruncatedImageError(path, str(exc)) from exc
    return samples, depth


def read_samples(path) -> tuple[np.ndarray, int]:
    """Decode a PNG or binary PGM into raw integer samples and bit depth.

    Multi-channel PNGs come back as an ``(H, W, 3)`` float array of 8-bit
    samples. Used by :func:`load_image` and by content hashing.
    """
    path = Path(path)
    if not path.is_file():
        raise ImageNotFoundError(path, "no such file")
    data = path.read_bytes()
    if data[:2] == b"P5":
        return _read_pgm(path, data)
    if data[:8] == _PNG_SIGNATURE:
        return _read_png(path, data)
    raise UnsupportedFormatError(path, "only PNG and binary PGM (P5) are supported")


def load_image(path) -> np.ndarray:
    """Load a greyscale image scaled into ``[0, 1]`` by ``1 / (2**depth - 1)``."""
    samples, depth = read_samples(path)
    scale = float(2**depth - 1)
    if samples.ndim == 3:
        return samples.sum(axis=2) / (3.0 * scale)
    return samples.astype(np.float64) / scale


def save_image(img: np.ndarray, path, bit_depth: int = 16) -> None:
    """Write an image as an 8- or 16-bit greyscale PNG."""
    arr = check_image(img)
    if bit_depth == 16:
        out = Image.fromarray(np.round(arr * 65535.0).astype(np.uint16))
    elif bit_depth == 8:
        out = Image.fromarray(np.round(arr * 255.0).astype(np.uint8))
    else:
        raise ValueError("bit_depth must be 8 or 16")
    out.save(Path(path), format="PNG")


def normalize_intensity(img: np.ndarray) -> np.ndarray:
    """Min-max rescale to ``[0, 1]``; a constant image maps to all zeros."""
    arr = np.asarray(img, dtype=np.float64)
    lo, hi = arr.min(), arr.max()
    if hi == lo:
        return np.zeros_like(arr)
    out = (arr - lo) / (hi - lo)
    return np.clip(out, 0.0, 1.0)


def _axis_weights(n_in: int, n_out: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(np.intp)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, src - lo


def resize_bilinear(img: np.ndarray, out_w: int, out_h: int) -> np.ndarray:
    """Pixel-centre aligned bilinear resize with clamped source coordinates."""
    if out_w < 1 or out_h < 1:
        raise ValueError(f"target size must be positive, got {out_w}x{out_h}")
    arr = np.asarray(img, dtype=np.float64)
    h, w = arr.shape
    x0, x1, fx = _axis_weights(w, out_w)
    y0, y1, fy = _axis_weights(h, out_h)
    top = arr[y0][:, x0] * (1.0 - fx) + arr[y0][:, x1] * fx
    bottom = arr[y1][:, x0] * (1.0 - fx) + arr[y1][:, x1] * fx
    out = top * (1.0 - fy)[:, None] + bottom * fy[:, None]
    # Convex combination, but guard against rounding just outside the input range.
    return np.clip(out, arr.min(), arr.max())


def _area_matrix(n_in: int, n_out: int) -> np.ndarray:
    # Row i averages the source interval [i, i+1) * n_in / n_out by overlap length.
    edges = np.arange(n_out + 1) * (n_in / n_out)
    lo, hi = edges[:-1, None], edges[1:, None]
    px = np.arange(n_in)[None, :]
    overlap = np.clip(np.minimum(hi, px + 1) - np.maximum(lo, px), 0.0, None)
    return overlap / overlap.sum(axis=1, keepdims=True)


def resize_area(img: np.ndarray, out_w: int, out_h: int) -> np.ndarray:
    """Area-averaging resize: each output pixel is the mean over its footprint."""
    if out_w < 1 or out_h < 1:
        raise ValueError(f"target size must be positive, got {out_w}x{out_h}")
    arr = np.asarray(img, dtype=np.float64)
    h, w = arr.shape
    out = _area_matrix(h, out_h) @ arr @ _area_matrix(w, out_w).T
    return np.clip(out, arr.min(), arr.max())


@dataclass(frozen=True)
class ModelInput:
    """Three replicated grey planes standardised per channel, shape ``(3, side, side)``."""

    values: np.ndarray
    mean: tuple[float, float, float]
    std: tuple[float, float, float]

    @property
    def side(self) -> int:
        return self.values.shape[1]


def to_model_input(img: np.ndarray, mean=IMAGENET_MEAN, std=IMAGENET_STD) -> ModelInput:
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
        raise ValueError("model input must be a square image; resize first")
    mean = tuple(float(m) for m in mean)
    std = tuple(float(s) for s in std)
    if len(mean) != 3 or len(std) != 3:
        raise ValueError("mean and std must have three components")
    if any(s == 0.0 for s in std):
        raise ValueError("std components must be nonzero")
    planes = np.stack([(arr - mean[c]) / std[c] for c in range(3)])
    return ModelInput(values=planes, mean=mean, std=std)

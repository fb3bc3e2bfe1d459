"""Synthetic chest-like radiographs with controllable confounds.

Every constant here is a calibration knob chosen so that a linear model can
exploit anatomy when population and label are confounded but has to rely on
the (weak) opacity signal otherwise. None of them is a clinical value.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataset import POPULATIONS, SEVERITIES, Manifest, SampleRecord
from .imgcore import save_image
from .markers import Box, gaussian_blur

# chest width fraction, thorax height fraction, rib inclination (deg), rib arch
ANATOMY = {
    "adult": {"chest_frac": 0.80, "height_frac": 0.80, "rib_deg": 20.0, "arch": 1.6},
    "paediatric": {"chest_frac": 0.55, "height_frac": 0.66, "rib_deg": 5.0, "arch": 0.0},
}
# blob count and peak amplitude per severity tier
OPACITY = {
    "none": (0, 0.0),
    "normal_pcr_plus": (0, 0.0),
    "mild": (2, 0.08),
    "moderate": (4, 0.15),
    "severe": (7, 0.25),
}
BLOB_SIGMA = 0.035  # fraction of image side
TEXTURE_AMPLITUDE = 0.025
MARKER_TEXTS = ("AP", "PORTABLE", "SUPINE")
MIN_SIDE = 64

# 5x7 bitmaps for the glyphs needed by the marker texts.
_FONT = {
    "A": ["01110", "10001", "10001", "11111", "10001", "10001", "10001"],
    "B": ["11110", "10001", "10001", "11110", "10001", "10001", "11110"],
    "E": ["11111", "10000", "10000", "11110", "10000", "10000", "11111"],
    "I": ["11111", "00100", "00100", "00100", "00100", "00100", "11111"],
    "L": ["10000", "10000", "10000", "10000", "10000", "10000", "11111"],
    "N": ["10001", "11001", "10101", "10011", "10001", "10001", "10001"],
    "O": ["01110", "10001", "10001", "10001", "10001", "10001", "01110"],
    "P": ["11110", "10001", "10001", "11110", "10000", "10000", "10000"],
    "R": ["11110", "10001", "10001", "11110", "10100", "10010", "10001"],
    "S": ["01111", "10000", "10000", "01110", "00001", "00001", "11110"],
    "T": ["11111", "00100", "00100", "00100", "00100", "00100", "00100"],
    "U": ["10001", "10001", "10001", "10001", "10001", "10001", "01110"],
}


@dataclass(frozen=True)
class SynthSpec:
    side: int = 128
    population: str = "adult"
    severity: str = "none"
    marker: Box | None = None
    marker_text: str = "PORTABLE"
    contrast_jitter: float = 0.05
    noise_sigma: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if self.population not in POPULATIONS:
            raise ValueError(f"unknown population {self.population!r}")
        if self.severity not in SEVERITIES:
            raise ValueError(f"unknown severity {self.severity!r}")
        if self.contrast_jitter < 0 or self.noise_sigma < 0:
            raise ValueError("jitter and noise must be non-negative")


@dataclass
class SynthImage:
    image: np.ndarray
    clean: np.ndarray  # same render without the marker
    lungs: np.ndarray  # boolean lung-field mask
    thorax: np.ndarray  # boolean thorax mask
    opacity: np.ndarray  # additive opacity field before contrast jitter
    population: str
    severity: str
    marker_box: Box | None


def text_bitmap(text: str) -> np.ndarray:
    cols = []
    for i, ch in enumerate(text.upper()):
        if ch not in _FONT:
            raise ValueError(f"no glyph for {ch!r}")
        if i:
            cols.append(np.zeros((7, 1), dtype=bool))
        cols.append(np.array([[c == "1" for c in row] for row in _FONT[ch]]))
    return np.hstack(cols)


def render_text(text: str, w: int, h: int) -> np.ndarray:
    """Nearest-neighbour scale of the text bitmap to exactly ``h x w``."""
    bmp = text_bitmap(text)
    ys, xs = np.nonzero(bmp)
    bmp = bmp[ys.min() : ys.max() + 1, xs.min() : xs.max() + 1]
    bh, bw = bmp.shape
    ri = np.minimum(((np.arange(h) + 0.5) * bh / h).astype(int), bh - 1)
    ci = np.minimum(((np.arange(w) + 0.5) * bw / w).astype(int), bw - 1)
    return bmp[ri][:, ci]


def _ellipse(u, v, cx, cy, a, b):
    return np.sqrt(((u - cx) / a) ** 2 + ((v - cy) / b) ** 2)


def _soft(r, edge):
    return 1.0 / (1.0 + np.exp(np.clip((r - 1.0) / edge, -50, 50)))


def generate_image(spec: SynthSpec) -> SynthImage:
    s = spec.side
    if s < MIN_SIDE:
        raise ValueError(f"side must be >= {MIN_SIDE}")
    if spec.marker is not None:
        m = spec.marker
        if m.w < 1 or m.h < 1 or m.x < 0 or m.y < 0 or m.x + m.w > s or m.y + m.h > s:
            raise ValueError(f"marker {m} does not fit in a {s}x{s} image")
    anat = ANATOMY[spec.population]
    # Independent streams so that, e.g., opacity draws never shift anatomy draws.
    rng_anat = np.random.default_rng([spec.seed, 0])
    rng_blob = np.random.default_rng([spec.seed, 1])
    rng_tex = np.random.default_rng([spec.seed, 2])
    rng_gain = np.random.default_rng([spec.seed, 3])

    v, u = (np.mgrid[0:s, 0:s] + 0.5) / s
    cx = 0.5 + rng_anat.uniform(-0.02, 0.02)
    cy = 0.52 + rng_anat.uniform(-0.02, 0.02)
    scale = rng_anat.uniform(0.96, 1.04)
    a = anat["chest_frac"] / 2 * scale
    b = anat["height_frac"] / 2 * scale
    rib_phase = rng_anat.uniform(0, 2 * math.pi)

    body = _soft(_ellipse(u, v, cx, cy, a, b), 0.03)
    lung_c = [(cx - 0.48 * a, cy - 0.05 * b), (cx + 0.48 * a, cy - 0.05 * b)]
    la, lb = 0.36 * a, 0.72 * b
    lung_r = np.minimum(*[_ellipse(u, v, x0, y0, la, lb) for x0, y0 in lung_c])
    lung = _soft(lung_r, 0.06)

    img = 0.06 + 0.52 * body - 0.26 * lung
    heart = np.exp(-(((u - cx - 0.03) / (0.14 * a)) ** 2 + ((v - cy - 0.15 * b) / (0.3 * b)) ** 2))
    img += 0.12 * heart * body
    lateral = np.abs(u - cx) / a
    rib_v = v - math.tan(math.radians(anat["rib_deg"])) * np.abs(u - cx) + anat["arch"] * 0.05 * lateral**2
    ribs = (0.5 + 0.5 * np.cos(2 * math.pi * rib_v / 0.075 + rib_phase)) ** 4
    img += 0.09 * ribs * body

    # Tissue overlap: smooth random texture inside the lungs.
    texture = gaussian_blur(rng_tex.normal(size=(s, s)), BLOB_SIGMA * s)
    texture *= TEXTURE_AMPLITUDE / max(texture.std(), 1e-12)
    img += texture * lung

    count, amp = OPACITY[spec.severity]
    opacity = np.zeros((s, s))
    lungs_hard = lung_r <= 1.0
    for _ in range(count):
        while True:
            side = rng_blob.integers(0, 2)
            r = math.sqrt(rng_blob.random())
            ang = rng_blob.uniform(0, 2 * math.pi)
            bx = lung_c[side][0] + 0.85 * la * r * math.cos(ang)
            by = lung_c[side][1] + 0.85 * lb * r * math.sin(ang)
            if 0 < bx < 1 and 0 < by < 1:
                break
        opacity += amp * np.exp(-((u - bx) ** 2 + (v - by) ** 2) / (2 * (BLOB_SIGMA) ** 2))
    opacity *= lung
    img += opacity

    j = spec.contrast_jitter
    gain = 1.0 + rng_gain.uniform(-j, j)
    offset = rng_gain.uniform(-j, j) * 0.2
    img = img * gain + offset
    if spec.noise_sigma > 0:
        img += rng_gain.normal(0.0, spec.noise_sigma, size=img.shape)
    clean = np.clip(img, 0.0, 1.0)

    image = clean.copy()
    box = None
    if spec.marker is not None:
        m = spec.marker
        glyphs = render_text(spec.marker_text, m.w, m.h)
        image[m.y : m.y + m.h, m.x : m.x + m.w][glyphs] = 1.0
        ys, xs = np.nonzero(glyphs)
        box = Box(m.x + int(xs.min()), m.y + int(ys.min()),
                  int(xs.max() - xs.min()) + 1, int(ys.max() - ys.min()) + 1)
    return SynthImage(image, clean, lungs_hard, body >= 0.5, opacity,
                      spec.population, spec.severity, box)


def corner_marker(side: int, rng: np.random.Generator, text: str | None = None) -> tuple[Box, str]:
    """Random text box in one of the four corners, clear of the thorax."""
    text = text or MARKER_TEXTS[int(rng.integers(len(MARKER_TEXTS)))]
    n = len(text)
    h = int(rng.integers(max(8, side // 24), max(9, side // 14) + 1))
    w = int(min(side * 0.2, max(h * 1.2, h * 0.6 * n)))
    margin = max(2, side // 40)
    corner = int(rng.integers(4))
    x = margin if corner in (0, 2) else side - margin - w
    y = margin if corner in (0, 1) else side - margin - h
    return Box(x, y, w, h), text


TASKS = ("covid", "population", "severity:1", "severity:2", "severity:3", "severity:4")
_TIER_BY_SETTING = {1: "normal_pcr_plus", 2: "mild", 3: "moderate", 4: "severe"}
COVID_TIERS = ("normal_pcr_plus", "mild", "moderate", "severe")


def dataset_specs(n_per_class: int, mode: str = "confounded", task: str = "covid",
                  seed: int = 0, side: int = 64, **spec_kw) -> list[tuple[SampleRecord, SynthSpec]]:
    """Record/spec pairs for a two-class dataset (class 0 first).

    ``covid``: normal vs covid19 with severities cycling through the four
    tiers. ``severity:K``: normal vs a single tier. ``population``: normal
    paediatric vs normal adult. In ``confounded`` mode class 0 is paediatric
    and class 1 adult; ``deconfounded`` makes every image adult.
    """
    if n_per_class < 4:
        raise ValueError("n_per_class must be >= 4")
    if mode not in ("confounded", "deconfounded"):
        raise ValueError("mode must be 'confounded' or 'deconfounded'")
    neg_pop = "paediatric" if mode == "confounded" else "adult"
    if task == "covid":
        classes = [("normal", neg_pop, lambda i: "none"),
                   ("covid19", "adult", lambda i: COVID_TIERS[i % 4])]
    elif task == "population":
        classes = [("paediatric", "paediatric", lambda i: "none"),
                   ("adult", "adult", lambda i: "none")]
    elif task.startswith("severity:"):
        tier = _TIER_BY_SETTING.get(int(task.split(":", 1)[1]))
        if tier is None:
            raise ValueError(f"unknown task {task!r}")
        classes = [("normal", neg_pop, lambda i: "none"), (tier, "adult", lambda i, t=tier: t)]
    else:
        raise ValueError(f"unknown task {task!r}; expected one of {TASKS}")

    out = []
    k = 0
    for ci, (label, pop, sev) in enumerate(classes):
        for i in range(n_per_class):
            img_seed = (seed * 1_000_003 + k) & 0xFFFFFFFF
            k += 1
            spec = SynthSpec(side=side, population=pop, severity=sev(i), seed=img_seed, **spec_kw)
            rec = SampleRecord(
                path=f"images/{ci}_{label}_{i:05d}.png",
                label=label if ci == 0 or task == "population" else "covid19",
                source="synthetic",
                severity=spec.severity,
                population=pop,
            )
            out.append((rec, spec))
    return out


def generate_dataset(n_per_class: int, mode: str = "confounded", task: str = "covid",
                     seed: int = 0, side: int = 64, **spec_kw) -> tuple[Manifest, list[np.ndarray]]:
    pairs = dataset_specs(n_per_class, mode, task, seed, side, **spec_kw)
    images = [generate_image(spec).image for _, spec in pairs]
    return Manifest([rec for rec, _ in pairs]), images


def write_dataset(out_dir, manifest: Manifest, images) -> Path:
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    for rec, img in zip(manifest.records, images):
        save_image(img, out_dir / rec.path, bit_depth=16)
    path = out_dir / "manifest.csv"
    manifest.root = out_dir
    manifest.write_csv(path)
    return path

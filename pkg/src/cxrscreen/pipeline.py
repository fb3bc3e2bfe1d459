"""The preprocessing chain: normalise, CLAHE, then marker removal."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .enhance import ClaheParams, clahe
from .imgcore import normalize_intensity
from .inpaint import remove_markers
from .markers import MarkerMask, MarkerParams


@dataclass(frozen=True)
class PreprocessConfig:
    normalize: bool = True
    clahe: bool = True
    remove_markers: bool = True
    clahe_params: ClaheParams = field(default_factory=ClaheParams)
    marker_params: MarkerParams = field(default_factory=MarkerParams)
    radius: int = 3


def preprocess_image(img: np.ndarray, config: PreprocessConfig | None = None):
    """Return ``(processed image, MarkerMask or None)``.

    Markers are detected on the image as it stands after the earlier stages.
    """
    config = config or PreprocessConfig()
    out = np.asarray(img, dtype=np.float64)
    if config.normalize:
        out = normalize_intensity(out)
    if config.clahe:
        out = clahe(out, config.clahe_params)
    found: MarkerMask | None = None
    if config.remove_markers:
        out, found = remove_markers(out, config.marker_params, config.radius)
    return out, found

import time

import numpy as np
import pytest

from cxrscreen.inpaint import fmm_inpaint, fmm_inpaint_trace, remove_markers
from cxrscreen.markers import Box
from cxrscreen.synth import SynthSpec, generate_image


def _ramp(n=32):
    return np.tile(np.linspace(0.1, 0.9, n), (n, 1))


def _hole(n, lo, hi):
    m = np.zeros((n, n), bool)
    m[lo:hi, lo:hi] = True
    return m


def test_empty_mask_is_identity(rng):
    img = rng.random((10, 10))
    np.testing.assert_array_equal(fmm_inpaint(img, np.zeros((10, 10), bool)), img)


def test_constant_fill():
    img = np.full((24, 24), 0.6)
    mask = _hole(24, 7, 15)
    img_in = img.copy()
    img_in[mask] = 0.0
    assert np.max(np.abs(fmm_inpaint(img_in, mask) - 0.6)) <= 1e-6


def test_linear_ramp_reproduced():
    img = _ramp()
    mask = _hole(32, 14, 18)
    img_in = img.copy()
    img_in[mask] = 1.0
    t = time.perf_counter()
    out = fmm_inpaint(img_in, mask, radius=3)
    assert time.perf_counter() - t < 1.0
    assert np.max(np.abs(out - img)) <= 0.02
    np.testing.assert_array_equal(out[~mask], img_in[~mask])


def test_vertical_and_diagonal_ramps():
    y, x = np.mgrid[0:32, 0:32] / 31.0
    for field in (0.2 + 0.6 * y, 0.1 + 0.4 * x + 0.4 * y):
        mask = _hole(32, 12, 20)
        out = fmm_inpaint(np.where(mask, 0.0, field), mask)
        assert np.max(np.abs(out - field)) <= 0.02


def test_non_mask_pixels_untouched(rng):
    img = rng.random((30, 30))
    mask = rng.random((30, 30)) < 0.15
    out = fmm_inpaint(img, mask)
    np.testing.assert_array_equal(out[~mask], img[~mask])
    assert np.all(np.isfinite(out)) and out.min() >= 0 and out.max() <= 1


def test_arrival_order_monotone(rng):
    img = rng.random((28, 28))
    mask = np.zeros((28, 28), bool)
    mask[5:20, 8:24] = True
    mask[22:26, 3:6] = True
    out, trace = fmm_inpaint_trace(img, mask)
    assert len(trace.order) == mask.sum()
    arrivals = [trace.arrival[y, x] for y, x in trace.order]
    assert all(a <= b for a, b in zip(arrivals, arrivals[1:]))
    for (y, x), support in zip(trace.order, trace.support_max):
        assert support <= trace.arrival[y, x]
    assert np.all(trace.arrival[mask] >= 0)


def test_errors():
    with pytest.raises(ValueError):
        fmm_inpaint(np.zeros((4, 4)), np.zeros((4, 5), bool))
    with pytest.raises(ValueError):
        fmm_inpaint(np.zeros((4, 4)), np.ones((4, 4), bool))


def test_remove_markers_marker_free():
    img = generate_image(SynthSpec(side=96, seed=4)).image
    out, found = remove_markers(img)
    assert found.boxes == [] and not found.mask.any()
    np.testing.assert_array_equal(out, img)


def _marked(seed, box=Box(6, 6, 40, 12), text="PORTABLE"):
    return generate_image(SynthSpec(side=256, severity="moderate", seed=seed, marker=box,
                                    marker_text=text))


def test_remove_markers_restores_plate():
    for seed in range(3):
        s = _marked(seed)
        out, found = remove_markers(s.image)
        sl = s.marker_box.slices()
        assert np.mean(np.abs(out[sl] - s.clean[sl])) <= 0.1


def test_no_bright_residue_in_box():
    s = _marked(7, Box(212, 236, 38, 12), "SUPINE")
    out, found = remove_markers(s.image)
    assert len(found.boxes) == 1
    b = found.boxes[0]
    ring = np.zeros_like(found.mask)
    ring[max(b.y - 4, 0): b.y + b.h + 4, max(b.x - 4, 0): b.x + b.w + 4] = True
    ring[b.slices()] = False
    ref = np.percentile(out[ring], 99)
    assert out[b.slices()].max() <= ref + 0.1

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from PIL import Image

from cxrscreen.imgcore import (
    IMAGENET_MEAN, IMAGENET_STD, ImageNotFoundError, TruncatedImageError, UnsupportedFormatError,
    load_image, normalize_intensity, resize_area, resize_bilinear, save_image, to_model_input,
)

unit_images = arrays(np.float64, st.tuples(st.integers(1, 12), st.integers(1, 12)),
                     elements=st.floats(0.0, 1.0))


def test_pgm_8bit_scaling(tmp_path):
    p = tmp_path / "a.pgm"
    p.write_bytes(b"P5\n2 2\n255\n" + bytes([0, 128, 255, 64]))
    np.testing.assert_array_equal(load_image(p), np.array([[0.0, 128 / 255], [1.0, 64 / 255]]))


def test_pgm_16bit_with_comment(tmp_path):
    p = tmp_path / "b.pgm"
    raster = np.array([[0, 65535], [1000, 30000]], dtype=">u2").tobytes()
    p.write_bytes(b"P5\n# comment\n2 2\n65535\n" + raster)
    np.testing.assert_allclose(load_image(p), np.array([[0, 65535], [1000, 30000]]) / 65535.0)


def test_png_16bit_max_is_one(tmp_path):
    p = tmp_path / "c.png"
    Image.fromarray(np.array([[65535, 0]], dtype=np.uint16)).save(p)
    np.testing.assert_array_equal(load_image(p), [[1.0, 0.0]])


def test_png_8bit(tmp_path):
    p = tmp_path / "d.png"
    Image.fromarray(np.array([[255, 51]], dtype=np.uint8)).save(p)
    np.testing.assert_allclose(load_image(p), [[1.0, 0.2]])


def test_rgb_png_unweighted_mean(tmp_path):
    p = tmp_path / "e.png"
    Image.fromarray(np.array([[[30, 60, 90]]], dtype=np.uint8), mode="RGB").save(p)
    assert load_image(p)[0, 0] == pytest.approx((30 + 60 + 90) / (3 * 255), abs=1e-15)


def test_missing_file_names_path(tmp_path):
    p = tmp_path / "missing.png"
    with pytest.raises(ImageNotFoundError) as err:
        load_image(p)
    assert err.value.path == str(p)


def test_unsupported_format(tmp_path):
    p = tmp_path / "x.jpg"
    p.write_bytes(b"\xff\xd8\xff\xe0garbage")
    with pytest.raises(UnsupportedFormatError) as err:
        load_image(p)
    assert str(p) in str(err.value)


def test_truncated_pgm(tmp_path):
    p = tmp_path / "t.pgm"
    p.write_bytes(b"P5\n4 4\n255\n" + bytes(5))
    with pytest.raises(TruncatedImageError):
        load_image(p)


def test_truncated_png(tmp_path):
    good = tmp_path / "g.png"
    save_image(np.random.default_rng(0).random((32, 32)), good)
    bad = tmp_path / "bad.png"
    bad.write_bytes(good.read_bytes()[:60])
    with pytest.raises(TruncatedImageError):
        load_image(bad)


def test_error_kinds_are_distinct():
    assert len({ImageNotFoundError, UnsupportedFormatError, TruncatedImageError}) == 3
    assert not issubclass(ImageNotFoundError, TruncatedImageError)


@given(img=unit_images)
def test_png16_round_trip(img, tmp_path_factory):
    p = tmp_path_factory.mktemp("rt") / "img.png"
    save_image(img, p, bit_depth=16)
    assert np.max(np.abs(load_image(p) - img)) <= 1 / 65535


def test_png8_round_trip(tmp_path):
    img = np.random.default_rng(1).random((5, 7))
    save_image(img, tmp_path / "a.png", bit_depth=8)
    assert np.max(np.abs(load_image(tmp_path / "a.png") - img)) <= 0.5 / 255 + 1e-12


def test_normalize_examples():
    np.testing.assert_array_equal(normalize_intensity(np.full((3, 3), 0.2)), np.zeros((3, 3)))
    np.testing.assert_allclose(normalize_intensity(np.array([[0.1, 0.2, 0.3]])), [[0.0, 0.5, 1.0]],
                               atol=1e-15)
    np.testing.assert_array_equal(normalize_intensity(np.array([[0.0, 1.0]])), [[0.0, 1.0]])


@given(unit_images)
def test_normalize_idempotent(img):
    once = normalize_intensity(img)
    assert np.max(np.abs(normalize_intensity(once) - once)) <= 1e-7
    assert once.min() >= 0.0 and once.max() <= 1.0


def test_resize_identity_and_constant():
    img = np.random.default_rng(2).random((7, 9))
    np.testing.assert_allclose(resize_bilinear(img, 9, 7), img, atol=1e-6)
    np.testing.assert_allclose(resize_bilinear(np.full((4, 5), 0.3), 11, 3), np.full((3, 11), 0.3))


def _bilinear_oracle(img, out_w, out_h):
    h, w = img.shape
    out = np.empty((out_h, out_w))
    for j in range(out_h):
        for i in range(out_w):
            x = min(max((i + 0.5) * w / out_w - 0.5, 0.0), w - 1)
            y = min(max((j + 0.5) * h / out_h - 0.5, 0.0), h - 1)
            x0, y0 = int(np.floor(x)), int(np.floor(y))
            x1, y1 = min(x0 + 1, w - 1), min(y0 + 1, h - 1)
            fx, fy = x - x0, y - y0
            out[j, i] = ((1 - fx) * (1 - fy) * img[y0, x0] + fx * (1 - fy) * img[y0, x1]
                         + (1 - fx) * fy * img[y1, x0] + fx * fy * img[y1, x1])
    return out


def test_resize_2x1_to_4x1():
    # Source x coordinates -0.25, 0.25, 0.75, 1.25 clamp to 0, 0.25, 0.75, 1.
    out = resize_bilinear(np.array([[0.0, 1.0]]), 4, 1)
    np.testing.assert_allclose(out, [[0.0, 0.25, 0.75, 1.0]], atol=1e-15)
    np.testing.assert_allclose(out, _bilinear_oracle(np.array([[0.0, 1.0]]), 4, 1), atol=1e-15)


@given(unit_images, st.integers(1, 15), st.integers(1, 15))
def test_resize_matches_oracle_and_stays_in_range(img, ow, oh):
    out = resize_bilinear(img, ow, oh)
    np.testing.assert_allclose(out, _bilinear_oracle(img, ow, oh), atol=1e-12)
    assert out.min() >= img.min() and out.max() <= img.max()


def test_resize_zero_target():
    with pytest.raises(ValueError):
        resize_bilinear(np.zeros((2, 2)), 0, 3)


def test_resize_area_block_mean():
    img = np.random.default_rng(3).random((8, 8))
    expected = img.reshape(4, 2, 4, 2).mean(axis=(1, 3))
    np.testing.assert_allclose(resize_area(img, 4, 4), expected, atol=1e-14)


def test_model_input_examples():
    mi = to_model_input(np.full((4, 4), 0.485))
    assert mi.values.shape == (3, 4, 4)
    np.testing.assert_allclose(mi.values[0], 0.0, atol=1e-15)
    mi = to_model_input(np.ones((2, 2)))
    assert mi.values[0, 0, 0] == (1.0 - 0.485) / 0.229
    mi = to_model_input(np.zeros((3, 3)))
    for c in range(3):
        np.testing.assert_array_equal(mi.values[c], -IMAGENET_MEAN[c] / IMAGENET_STD[c])


def test_model_input_rejects_zero_std_and_non_square():
    with pytest.raises(ValueError):
        to_model_input(np.zeros((2, 2)), std=(0.2, 0.0, 0.2))
    with pytest.raises(ValueError):
        to_model_input(np.zeros((2, 3)))

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from PIL import Image

from typorec.imgproc import (
    CorruptImageError,
    GrayImage,
    ImageNotFoundError,
    UnsupportedFormatError,
    build_pyramid,
    gaussian_blur,
    gaussian_kernel,
    gradients,
    load_image,
    luma,
    save_pgm,
)


def test_p2_pgm_decode(tmp_path):
    p = tmp_path / "a.pgm"
    p.write_text("P2\n# comment\n2 2\n255\n0 255\n255 0\n")
    img = load_image(p)
    assert (img.width, img.height) == (2, 2)
    assert img.data.ravel().tolist() == [0, 255, 255, 0]


def test_pgm_maxval_rescaled(tmp_path):
    p = tmp_path / "m.pgm"
    p.write_text("P2 2 1 15 0 15\n")
    assert load_image(p).data.ravel().tolist() == [0, 255]


def test_p5_round_trip(tmp_path, rng):
    img = GrayImage(rng.integers(0, 256, (17, 23), dtype=np.uint8))
    save_pgm(img, tmp_path / "r.pgm")
    assert load_image(tmp_path / "r.pgm") == img


def test_white_png(tmp_path):
    Image.new("RGB", (4, 3), (255, 255, 255)).save(tmp_path / "w.png")
    img = load_image(tmp_path / "w.png")
    assert img.shape == (3, 4) and np.all(img.data == 255)


def test_luma_hand_value(tmp_path):
    # 0.299*100 + 0.587*150 + 0.114*200 = 140.75 -> 141
    assert int(luma(np.array([100, 150, 200], dtype=np.uint8))) == 141
    Image.new("RGB", (1, 1), (100, 150, 200)).save(tmp_path / "c.png")
    assert int(load_image(tmp_path / "c.png").data[0, 0]) == 141


def test_luma_rounds_half_up():
    rgb = np.array([[5, 0, 0]], dtype=np.uint8)  # 1.495 -> 1
    assert luma(rgb).tolist() == [1]
    rgb = np.array([[0, 0, 75]], dtype=np.uint8)  # 8.55 -> 9
    assert luma(rgb).tolist() == [9]


def test_load_errors_are_distinct(tmp_path):
    with pytest.raises(ImageNotFoundError) as e:
        load_image(tmp_path / "missing.pgm")
    assert "missing.pgm" in str(e.value)
    (tmp_path / "x.bmp").write_bytes(b"BM....")
    with pytest.raises(UnsupportedFormatError):
        load_image(tmp_path / "x.bmp")
    (tmp_path / "bad.pgm").write_bytes(b"P5\n4 4\n255\n\x00\x01")
    with pytest.raises(CorruptImageError):
        load_image(tmp_path / "bad.pgm")
    (tmp_path / "hdr.pgm").write_bytes(b"P2\nfoo 4\n255\n")
    with pytest.raises(CorruptImageError):
        load_image(tmp_path / "hdr.pgm")


def test_grayimage_is_read_only():
    img = GrayImage(np.zeros((2, 2), dtype=np.uint8))
    with pytest.raises(ValueError):
        img.data[0, 0] = 1


@pytest.mark.parametrize("sigma", [0.5, 1.0, 2.5, 4.0])
def test_blur_constant_is_identity(sigma):
    img = GrayImage(np.full((20, 15), 77, dtype=np.uint8))
    assert gaussian_blur(img, sigma) == img


def test_blur_rejects_non_positive_sigma():
    img = GrayImage(np.zeros((5, 5), dtype=np.uint8))
    with pytest.raises(ValueError):
        gaussian_blur(img, 0.0)


def test_impulse_matches_dense_kernel():
    from typorec.imgproc import blur

    arr = np.zeros((9, 9))
    arr[4, 4] = 1.0
    out = blur(arr, 1.0)
    # dense 2-D oracle: normalized sampled Gaussian over the same radius
    r = math.ceil(3.0)
    x = np.arange(-r, r + 1)
    g = np.exp(-(x[:, None] ** 2 + x[None, :] ** 2) / 2.0)
    g /= g.sum()
    assert out[4, 4] == pytest.approx(g[r, r], abs=1e-12)
    assert gaussian_kernel(1.0).size == 7


def test_blur_semigroup():
    # The sampled sigma=0.5 kernel is too coarse for pixel-rate noise, so the
    # composition check uses smooth content (radius ceil(3 sigma) is fixed).
    y, x = np.mgrid[0:48, 0:64]
    img = GrayImage(np.round(128 + 100 * np.sin(x / 3) * np.cos(y / 4.2)).astype(np.uint8))
    twice = gaussian_blur(gaussian_blur(img, 0.5), 0.5)
    once = gaussian_blur(img, math.sqrt(0.5))
    assert np.max(np.abs(twice.data.astype(int) - once.data.astype(int))) <= 2


def test_pyramid_resolutions_and_sigmas():
    img = GrayImage(np.zeros((64, 64), dtype=np.uint8))
    pyr = build_pyramid(img, octaves=3, scales_per_octave=3, base_sigma=1.6)
    assert [o[0].image.shape[0] for o in pyr.octaves] == [64, 32, 16]
    s = [lv.sigma for lv in pyr.octaves[0] if lv.index >= 0][:3]
    assert s == pytest.approx([1.6, 2.016, 2.540], abs=1e-3)
    assert len(build_pyramid(img, 1, 3).octaves[0]) == 6


def test_pyramid_too_small():
    with pytest.raises(ValueError):
        build_pyramid(GrayImage(np.zeros((63, 64), dtype=np.uint8)), 3, 3)


@settings(max_examples=20, deadline=None)
@given(octaves=st.integers(1, 3), S=st.integers(3, 5), base=st.floats(0.8, 2.0))
def test_pyramid_sigma_strictly_increasing(octaves, S, base):
    pyr = build_pyramid(np.zeros((64, 64)), octaves, S, base)
    for o, octave in enumerate(pyr.octaves):
        sig = [lv.sigma for lv in octave]
        assert all(a < b for a, b in zip(sig, sig[1:]))
        for lv in octave:
            assert lv.sigma == pytest.approx(base * 2 ** (o + lv.index / S))
            assert lv.factor == 2 ** o


def test_gradients_ramps():
    x = np.arange(10, dtype=np.float64)
    ramp = np.tile(x * 10, (6, 1))
    g = gradients(ramp)
    assert np.allclose(g.magnitude[1:-1, 1:-1], 10.0)
    assert np.allclose(g.orientation[1:-1, 1:-1], 0.0)
    diag = x[None, :] + np.arange(10)[:, None]
    g = gradients(diag * 3)
    assert np.allclose(g.orientation[1:-1, 1:-1], math.pi / 4, atol=1e-6)
    assert np.all(gradients(np.full((5, 5), 3.0)).magnitude == 0)


def test_gradients_offset_invariant(rng):
    a = rng.integers(0, 200, (12, 12))
    g1, g2 = gradients(a), gradients(a + 37)
    assert np.array_equal(g1.magnitude, g2.magnitude)
    assert np.array_equal(g1.orientation, g2.orientation)
    assert np.all(g1.orientation >= 0) and np.all(g1.orientation < 2 * math.pi)

import math

import cv2
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays
from numpy.testing import assert_allclose, assert_array_equal

from mftools.image import (GaussianKernel, add_noise, as_image, center_crop, encode_png, gaussian_blur,
                           load_png, load_png_raw, psnr, resize_bilinear, rgb_to_gray, save_png, scale_and_crop)
from mftools.utils import derive_rng


class TestAsImage:
    def test_2d_gets_channel_axis(self):
        assert as_image(np.zeros((4, 5))).shape == (4, 5, 1)

    def test_bad_channels(self):
        with pytest.raises(ValueError):
            as_image(np.zeros((4, 5, 2)))

    def test_non_finite(self):
        img = np.zeros((3, 3))
        img[1, 1] = np.nan
        with pytest.raises(ValueError):
            as_image(img)

    def test_gray_is_channel_mean(self):
        img = np.dstack([np.full((2, 2), 0.3), np.full((2, 2), 0.6), np.full((2, 2), 0.9)])
        assert_allclose(rgb_to_gray(img), 0.6)


class TestGaussianKernel:
    def test_sigma_zero_is_identity(self):
        k = GaussianKernel.from_sigma(0)
        assert k.radius == 0
        assert_array_equal(k.taps, [1.0])

    @pytest.mark.parametrize("sigma,radius", [(0.1, 1), (1.0, 3), (1.5, 5), (3.0, 9)])
    def test_radius(self, sigma, radius):
        k = GaussianKernel.from_sigma(sigma)
        assert k.radius == radius
        assert len(k.taps) == 2 * radius + 1

    def test_normalized_and_symmetric(self):
        k = GaussianKernel.from_sigma(2.3)
        assert math.isclose(k.taps.sum(), 1.0, rel_tol=0, abs_tol=1e-15)
        assert_allclose(k.taps, k.taps[::-1], atol=1e-18)

    def test_negative_sigma(self):
        with pytest.raises(ValueError):
            GaussianKernel.from_sigma(-1)


class TestGaussianBlur:
    def test_sigma_zero_copy(self, texture):
        img = texture(16)
        out = gaussian_blur(img, 0)
        assert_array_equal(out, img)
        assert out is not img

    @pytest.mark.parametrize("seed", range(10))
    def test_matches_dense_convolution(self, seed, dense_blur):
        rng = derive_rng(seed, "dense")
        img = rng.uniform(0, 1, (16, 16, 1))
        sigma = rng.uniform(0.5, 2.5)
        assert_allclose(gaussian_blur(img, sigma), dense_blur(img, sigma), atol=1e-10)

    def test_constant_image_preserved(self):
        img = np.full((12, 9, 3), 0.4)
        assert_allclose(gaussian_blur(img, 2.0), 0.4, atol=1e-14)

    def test_mass_is_local(self):
        img = np.zeros((31, 31, 1))
        img[15, 15] = 1.0
        out = gaussian_blur(img, 1.0)
        assert out[15, 15] == out.max()
        assert out[15, 19, 0] == 0.0
        assert out[15, 18, 0] > 0.0
        assert_allclose(out.sum(), 1.0, atol=1e-14)

    def test_impulse_center_value(self):
        img = np.zeros((9, 9, 1))
        img[4, 4] = 1.0
        out = gaussian_blur(img, 1.0)
        assert math.isclose(out[4, 4, 0], 1 / (2 * math.pi), rel_tol=0.02)

    @settings(max_examples=25, deadline=None)
    @given(arrays(np.float64, (8, 8, 1), elements=st.floats(0, 1)),
           arrays(np.float64, (8, 8, 1), elements=st.floats(0, 1)),
           st.floats(0.0, 3.0))
    def test_linear_and_range_preserving(self, a, b, sigma):
        lhs = gaussian_blur(0.3 * a + 0.7 * b, sigma)
        rhs = 0.3 * gaussian_blur(a, sigma) + 0.7 * gaussian_blur(b, sigma)
        assert_allclose(lhs, rhs, atol=1e-12)
        out = gaussian_blur(a, sigma)
        assert out.min() >= -1e-12
        assert out.max() <= 1 + 1e-12


class TestResize:
    def test_identity(self, texture):
        img = texture(10)
        assert_array_equal(resize_bilinear(img, 10, 10), img)

    def test_constant(self):
        out = resize_bilinear(np.full((5, 7, 1), 0.25), 13, 4)
        assert out.shape == (4, 13, 1)
        assert_allclose(out, 0.25, atol=1e-6)

    def test_downscale_by_two_averages_pairs(self):
        img = np.arange(8, dtype=float).reshape(1, 8, 1).repeat(2, axis=0)
        out = resize_bilinear(img, 4, 2)
        assert_allclose(out[0, :, 0], [0.5, 2.5, 4.5, 6.5])

    def test_upscale_two_to_three(self):
        out = resize_bilinear(np.array([[0.0, 1.0]]), 3, 1)
        assert out.shape == (1, 3, 1)
        assert_allclose(out[0, :, 0], [0.0, 0.5, 1.0], atol=1e-7)

    def test_scale_and_crop(self, texture):
        img = texture(40)[:30]
        out = scale_and_crop(img, 20)
        assert out.shape == (20, 20, 3)

    def test_crop_too_large(self, texture):
        with pytest.raises(ValueError):
            center_crop(texture(8), 9, 4)


class TestNoiseAndPsnr:
    def test_noise_is_seeded(self, texture):
        img = texture(8)
        a = add_noise(img, 0.05, derive_rng(3, "noise"))
        b = add_noise(img, 0.05, derive_rng(3, "noise"))
        assert_array_equal(a, b)
        assert not np.array_equal(a, img)
        assert a.min() >= 0 and a.max() <= 1

    def test_psnr(self):
        a = np.zeros((4, 4, 1))
        b = np.full((4, 4, 1), 0.1)
        assert psnr(a, a) == math.inf
        assert math.isclose(psnr(a, b), 20.0)
        mask = np.zeros((4, 4), bool)
        mask[0, 0] = True
        assert psnr(a, np.where(mask[:, :, None], 0.0, 1.0), mask=mask) == math.inf


class TestPng:
    @pytest.mark.parametrize("bit_depth", [8, 16])
    def test_quantization_error(self, tmp_path, texture, bit_depth):
        img = texture(12)
        fn = tmp_path / "img.png"
        save_png(img, fn, bit_depth=bit_depth)
        out = load_png(fn)
        assert out.shape == img.shape
        assert np.max(np.abs(out - img)) <= 0.5 / (2 ** bit_depth - 1) + 1e-12

    def test_channel_order(self, tmp_path):
        img = np.zeros((2, 2, 3))
        img[:, :, 0] = 1.0
        fn = tmp_path / "red.png"
        save_png(img, fn)
        raw = load_png_raw(fn)
        assert raw.dtype == np.uint8
        assert_array_equal(raw[0, 0], [255, 0, 0])

    def test_8bit_scaling(self, tmp_path):
        fn = tmp_path / "levels.png"
        ok, buf = cv2.imencode(".png", np.array([[255, 128, 0]], dtype=np.uint8))
        assert ok
        fn.write_bytes(buf.tobytes())
        assert_allclose(load_png(fn)[0, :, 0], [1.0, 128 / 255, 0.0], rtol=0, atol=1e-15)

    def test_encoding_is_deterministic(self, texture):
        img = texture(9)
        assert encode_png(img, 16) == encode_png(img, 16)

    def test_missing_file(self, tmp_path):
        with pytest.raises(OSError):
            load_png(tmp_path / "missing.png")

    def test_not_a_png(self, tmp_path):
        fn = tmp_path / "junk.png"
        fn.write_bytes(b"not an image")
        with pytest.raises(OSError):
            load_png(fn)

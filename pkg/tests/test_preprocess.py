import numpy as np
import pytest
from PIL import Image

from cxrsearch import preprocess as pp
from cxrsearch.errors import NonFiniteInput, ShapeMismatch
from cxrsearch.preprocess import ImageBuffer


def test_normalize_constant_image():
    out = pp.normalize_intensity(ImageBuffer(np.full((8, 8), 1000.0)))
    assert np.all(out.pixels == 0.0)


def test_normalize_two_values():
    px = np.zeros((10, 10))
    px[::2] = 100.0
    out = pp.normalize_intensity(ImageBuffer(px))
    assert set(np.unique(out.pixels)) == {0.0, 1.0}


def test_normalize_ramp_percentiles():
    # independent arithmetic: p1 = 0.99, p99 = 98.01 on a 0..99 ramp,
    # so value 50 maps to (50 - 0.99) / (98.01 - 0.99)
    ramp = np.arange(100, dtype=np.float64).reshape(10, 10)
    expected = (50 - 0.99) / (98.01 - 0.99)
    out = pp.normalize_intensity(ImageBuffer(ramp))
    assert out.pixels[5, 0] == pytest.approx(expected, abs=1e-6)
    assert out.pixels.min() == 0.0 and out.pixels.max() == 1.0


def test_normalize_rejects_nan():
    px = np.ones((4, 4))
    px[0, 0] = np.nan
    with pytest.raises(NonFiniteInput):
        pp.normalize_intensity(ImageBuffer(px))


def test_resize_landscape_pad():
    img = ImageBuffer(np.ones((512, 384)))
    out = pp.resize_fixed_aspect(img, 256)
    assert out.pixels.shape == (256, 256)
    # content 256 x 192 centered: 32-px zero bands left and right
    assert np.all(out.pixels[:, :32] == 0.0)
    assert np.all(out.pixels[:, -32:] == 0.0)
    assert np.all(out.pixels[:, 32:224] > 0.5)


def test_resize_portrait_pad():
    img = ImageBuffer(np.ones((100, 400)))
    out = pp.resize_fixed_aspect(img, 256)
    assert np.all(out.pixels[:96] == 0.0)
    assert np.all(out.pixels[-96:] == 0.0)
    assert np.all(out.pixels[96:160] > 0.5)


def test_resize_identity():
    rng = np.random.default_rng(0)
    img = ImageBuffer(rng.random((256, 256)))
    out = pp.resize_fixed_aspect(img, 256)
    np.testing.assert_allclose(out.pixels, img.pixels, atol=1e-6)


def test_train_crop_pad_zero_identity():
    img = ImageBuffer(np.random.default_rng(1).random((32, 32)))
    out = pp.train_crop(img, 0, np.random.default_rng(0))
    np.testing.assert_array_equal(out.pixels, img.pixels)


def test_train_crop_deterministic():
    img = ImageBuffer(np.random.default_rng(1).random((32, 32)))
    a = pp.train_crop(img, 4, np.random.default_rng(9))
    b = pp.train_crop(img, 4, np.random.default_rng(9))
    np.testing.assert_array_equal(a.pixels, b.pixels)


def test_train_crop_conserves_centered_content():
    # nonzero content centered with margin >= pad: every crop keeps it whole
    px = np.zeros((64, 64), dtype=np.float32)
    px[24:40, 24:40] = 1.0
    total = px.sum()
    rng = np.random.default_rng(5)
    for _ in range(20):
        out = pp.train_crop(ImageBuffer(px), 8, rng)
        assert out.pixels.sum() == total


class HalfMask:
    def provide(self, image):
        mask = np.zeros_like(image.pixels)
        mask[:, : image.width // 2] = 1.0
        return mask


def test_apply_mask_identity_and_zero():
    img = ImageBuffer(np.random.default_rng(2).random((16, 16)))
    ones = pp.apply_mask(img, pp.IdentityMaskProvider())
    np.testing.assert_array_equal(ones.pixels, img.pixels)

    class Zeros:
        def provide(self, image):
            return np.zeros_like(image.pixels)

    assert np.all(pp.apply_mask(img, Zeros()).pixels == 0.0)


def test_apply_mask_half():
    ramp = np.tile(np.arange(16, dtype=np.float32), (16, 1))
    out = pp.apply_mask(ImageBuffer(ramp), HalfMask())
    np.testing.assert_array_equal(out.pixels[:, :8], ramp[:, :8])
    assert np.all(out.pixels[:, 8:] == 0.0)


def test_apply_mask_idempotent():
    img = ImageBuffer(np.random.default_rng(3).random((16, 16)))
    once = pp.apply_mask(img, HalfMask())
    twice = pp.apply_mask(once, HalfMask())
    np.testing.assert_array_equal(once.pixels, twice.pixels)


def test_apply_mask_shape_mismatch():
    class Bad:
        def provide(self, image):
            return np.ones((2, 2))

    with pytest.raises(ShapeMismatch):
        pp.apply_mask(ImageBuffer(np.ones((8, 8))), Bad())


def test_load_image_8bit_and_16bit(tmp_path):
    arr8 = np.arange(256, dtype=np.uint8).reshape(16, 16)
    Image.fromarray(arr8, mode="L").save(tmp_path / "a8.png")
    out8 = pp.load_image(tmp_path / "a8.png")
    np.testing.assert_allclose(out8.pixels, arr8 / 255.0, atol=1e-7)

    arr16 = (np.arange(256, dtype=np.uint16).reshape(16, 16) * 257).astype(np.uint16)
    Image.fromarray(arr16).save(tmp_path / "a16.png")
    out16 = pp.load_image(tmp_path / "a16.png")
    np.testing.assert_allclose(out16.pixels, arr16 / 65535.0, atol=1e-7)


def test_load_image_rgb_luminance(tmp_path):
    rgb = np.zeros((8, 8, 3), dtype=np.uint8)
    rgb[..., 0] = 255  # pure red -> 0.299
    Image.fromarray(rgb, mode="RGB").save(tmp_path / "rgb.png")
    out = pp.load_image(tmp_path / "rgb.png")
    np.testing.assert_allclose(out.pixels, 0.299, atol=1e-6)


def test_eval_pipeline_pure(tmp_path):
    arr = np.random.default_rng(7).integers(0, 256, (40, 30), dtype=np.uint8)
    Image.fromarray(arr, mode="L").save(tmp_path / "x.png")
    a = pp.preprocess_eval(tmp_path / "x.png", 64)
    b = pp.preprocess_eval(tmp_path / "x.png", 64)
    np.testing.assert_array_equal(a.pixels, b.pixels)
    assert a.pixels.shape == (64, 64)
    assert a.pixels.min() >= 0.0 and a.pixels.max() <= 1.0

"""Deterministic image normalization, resizing, cropping and masking.

The evaluation path (load -> normalize -> resize -> mask) is a pure
function of the input file.  Training additionally pads and randomly
crops; the crop RNG is passed in explicitly so workers own their streams.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Protocol

import numpy as np
from PIL import Image

from .errors import NonFiniteInput, ShapeMismatch

# ITU-R 601 luminance weights for multi-channel inputs
_LUMA = np.array([0.299, 0.587, 0.114], dtype=np.float64)

DEFAULT_SIDE = 256
DEFAULT_CROP_PAD = 16
PERCENTILE_LOW = 1.0
PERCENTILE_HIGH = 99.0


@dataclass
class ImageBuffer:
    """A single-channel image as an H x W float array."""

    pixels: np.ndarray

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float32)
        if self.pixels.ndim != 2:
            raise ShapeMismatch(f"expected 2-d pixels, got shape {self.pixels.shape}")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


class MaskProvider(Protocol):
    """Seam for lung segmentation: returns a binary mask matching the image."""

    def provide(self, image: ImageBuffer) -> np.ndarray: ...


class IdentityMaskProvider:
    """Default provider: keep the whole image."""

    def provide(self, image: ImageBuffer) -> np.ndarray:
        return np.ones_like(image.pixels)


def _decode(im: Image.Image) -> np.ndarray:
    if im.mode in ("I;16", "I;16B", "I"):
        return np.asarray(im, dtype=np.float64) / 65535.0
    if im.mode in ("L", "P"):
        return np.asarray(im.convert("L"), dtype=np.float64) / 255.0
    rgb = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return rgb @ _LUMA


def load_image(path: str | Path) -> ImageBuffer:
    """Read a PNG/JPEG file into a [0, 1] float buffer.

    8-bit images are scaled by 1/255, 16-bit by 1/65535; multi-channel
    inputs are converted to luminance first.
    """
    with Image.open(path) as im:
        im.load()
        arr = _decode(im)
    return ImageBuffer(arr)


def decode_image_bytes(raw: bytes) -> ImageBuffer:
    """load_image for an in-memory PNG/JPEG byte string."""
    import io

    with Image.open(io.BytesIO(raw)) as im:
        im.load()
        arr = _decode(im)
    return ImageBuffer(arr)


def normalize_intensity(raw: ImageBuffer) -> ImageBuffer:
    """Clip to the [p1, p99] percentile window, then map affinely to [0, 1].

    Constant images (window of zero width) map to all zeros.
    """
    px = np.asarray(raw.pixels, dtype=np.float64)
    if px.size < 1:
        raise ShapeMismatch("empty image")
    if not np.all(np.isfinite(px)):
        raise NonFiniteInput("image contains NaN or infinite values")
    lo, hi = np.percentile(px, [PERCENTILE_LOW, PERCENTILE_HIGH])
    if hi <= lo:
        return ImageBuffer(np.zeros_like(px))
    out = (np.clip(px, lo, hi) - lo) / (hi - lo)
    return ImageBuffer(out)


def _bilinear_resize(px: np.ndarray, height: int, width: int) -> np.ndarray:
    im = Image.fromarray(np.ascontiguousarray(px, dtype=np.float32), mode="F")
    return np.asarray(im.resize((width, height), Image.BILINEAR), dtype=np.float32)


def resize_fixed_aspect(img: ImageBuffer, target: int = DEFAULT_SIDE) -> ImageBuffer:
    """Scale the longer side to `target` (bilinear), zero-pad to square.

    Padding is split symmetrically; the extra pixel of an odd band goes
    after the content.
    """
    if target < 8:
        raise ValueError(f"target {target} < 8")
    h, w = img.height, img.width
    scale = target / max(h, w)
    nh = max(1, int(round(h * scale)))
    nw = max(1, int(round(w * scale)))
    content = _bilinear_resize(img.pixels, nh, nw)
    top = (target - nh) // 2
    left = (target - nw) // 2
    out = np.zeros((target, target), dtype=np.float32)
    out[top : top + nh, left : left + nw] = content
    return ImageBuffer(out)


def train_crop(img: ImageBuffer, pad: int, rng: np.random.Generator) -> ImageBuffer:
    """Zero-pad by `pad` on every side, then cut a random window of the
    original size.  pad=0 is the identity.  Evaluation never calls this.
    """
    if pad < 0:
        raise ValueError("pad must be >= 0")
    if pad == 0:
        return ImageBuffer(img.pixels.copy())
    h, w = img.height, img.width
    padded = np.pad(img.pixels, pad)
    dy = int(rng.integers(0, 2 * pad + 1))
    dx = int(rng.integers(0, 2 * pad + 1))
    return ImageBuffer(padded[dy : dy + h, dx : dx + w])


def apply_mask(img: ImageBuffer, provider: MaskProvider) -> ImageBuffer:
    """Element-wise product of the image with the provider's binary mask."""
    mask = np.asarray(provider.provide(img))
    if mask.shape != img.pixels.shape:
        raise ShapeMismatch(
            f"mask shape {mask.shape} != image shape {img.pixels.shape}"
        )
    return ImageBuffer(img.pixels * mask.astype(np.float32))


def preprocess_eval(
    path: str | Path,
    side: int = DEFAULT_SIDE,
    provider: MaskProvider | None = None,
) -> ImageBuffer:
    """Full deterministic evaluation pipeline for one file."""
    buf = resize_fixed_aspect(normalize_intensity(load_image(path)), side)
    if provider is not None:
        buf = apply_mask(buf, provider)
    return buf


def preprocess_train(
    path: str | Path,
    rng: np.random.Generator,
    side: int = DEFAULT_SIDE,
    pad: int = DEFAULT_CROP_PAD,
    provider: MaskProvider | None = None,
) -> ImageBuffer:
    """Evaluation pipeline plus random translation via pad-and-crop."""
    return train_crop(preprocess_eval(path, side, provider), pad, rng)

"""Floating-point image containers, Gaussian kernels, separable blur and PNG I/O.

Images are `numpy.ndarray` of dtype float64 with shape (height, width, channels),
channels 1 or 3, samples nominally in [0, 1]. Single-channel maps (mattes,
guidance maps, weights) use the same layout with channels = 1.
"""
from dataclasses import dataclass
from pathlib import Path
import logging
import math

import cv2
import numpy as np
from scipy import ndimage

from .utils import atomic_write_bytes

logger = logging.getLogger(__name__)

# scipy's 'mirror' is reflect-101: (d c b | a b c d | c b a)
BOUNDARY_MODE = "mirror"


def as_image(arr, copy: bool = False) -> np.ndarray:
    """Coerce `arr` to a float64 (H, W, C) image with C in {1, 3}."""
    img = np.array(arr, dtype=np.float64, copy=copy) if copy else np.asarray(arr, dtype=np.float64)
    if img.ndim == 2:
        img = img[:, :, np.newaxis]
    if img.ndim != 3 or img.shape[2] not in (1, 3):
        raise ValueError(f"Expected an image of shape (H, W), (H, W, 1) or (H, W, 3), got {img.shape}")
    if img.shape[0] < 1 or img.shape[1] < 1:
        raise ValueError(f"Empty image: {img.shape}")
    if not np.all(np.isfinite(img)):
        raise ValueError("Image contains NaN or Inf samples")
    return img


def check_same_shape(*imgs, names=None, channels=False):
    """Raise ValueError unless all images share height and width
    (and the channel count with `channels=True`)."""
    ref = imgs[0].shape if channels else imgs[0].shape[:2]
    for i, img in enumerate(imgs[1:], start=1):
        shape = img.shape if channels else img.shape[:2]
        if shape != ref:
            name = names[i] if names else f"image {i}"
            raise ValueError(f"Dimension mismatch: {name} has shape {img.shape}, expected {ref}")


def rgb_to_gray(img) -> np.ndarray:
    """Unweighted channel mean, returned as a 2-D array."""
    img = as_image(img)
    if img.shape[2] == 1:
        return img[:, :, 0].copy()
    return img.mean(axis=2)


@dataclass(frozen=True)
class GaussianKernel:
    """Truncated, renormalized 1-D Gaussian.

    radius = ceil(3 sigma) (at least 1 when sigma > 0); sigma = 0 gives the
    identity kernel [1].
    """
    sigma: float
    radius: int
    taps: np.ndarray

    @classmethod
    def from_sigma(cls, sigma: float) -> "GaussianKernel":
        sigma = float(sigma)
        if not np.isfinite(sigma) or sigma < 0:
            raise ValueError(f"sigma must be >= 0, got {sigma}")
        if sigma == 0:
            return cls(sigma=0.0, radius=0, taps=np.ones(1))
        radius = max(1, math.ceil(3 * sigma))
        x = np.arange(-radius, radius + 1, dtype=np.float64)
        taps = np.exp(-(x ** 2) / (2 * sigma ** 2))
        taps /= taps.sum()
        taps.setflags(write=False)
        return cls(sigma=sigma, radius=radius, taps=taps)

    def dense(self) -> np.ndarray:
        """Outer-product 2-D kernel."""
        return np.outer(self.taps, self.taps)


def gaussian_blur(img, sigma: float) -> np.ndarray:
    """Separable Gaussian blur (horizontal pass then vertical pass) with
    reflect-101 boundaries. sigma = 0 returns a copy."""
    kernel = GaussianKernel.from_sigma(sigma)
    img = as_image(img)
    if kernel.radius == 0:
        return img.copy()
    out = ndimage.correlate1d(img, kernel.taps, axis=1, mode=BOUNDARY_MODE)
    out = ndimage.correlate1d(out, kernel.taps, axis=0, mode=BOUNDARY_MODE)
    return out


def add_noise(img, stddev: float, rng: np.random.Generator) -> np.ndarray:
    """Additive zero-mean Gaussian noise n(x, y), clipped back to [0, 1]."""
    img = as_image(img)
    if stddev < 0:
        raise ValueError(f"noise stddev must be >= 0, got {stddev}")
    if stddev == 0:
        return img.copy()
    noisy = img + rng.normal(0.0, stddev, size=img.shape)
    return np.clip(noisy, 0.0, 1.0)


def resize_bilinear(img, new_w: int, new_h: int) -> np.ndarray:
    """Bilinear resize with pixel-center alignment and edge clamping.

    Output sample x maps to source coordinate (x + 0.5) * w / new_w - 0.5,
    clamped to [0, w - 1].
    """
    img = as_image(img)
    new_w, new_h = int(new_w), int(new_h)
    if new_w < 1 or new_h < 1:
        raise ValueError(f"Target size must be >= 1, got {new_w}x{new_h}")
    h, w = img.shape[:2]
    if (new_w, new_h) == (w, h):
        return img.copy()
    out = cv2.resize(np.ascontiguousarray(img), (new_w, new_h), interpolation=cv2.INTER_LINEAR)
    return out.reshape(new_h, new_w, img.shape[2])


def center_crop(img, width: int, height: int) -> np.ndarray:
    img = as_image(img)
    h, w = img.shape[:2]
    if width > w or height > h:
        raise ValueError(f"Crop {width}x{height} larger than image {w}x{h}")
    top = (h - height) // 2
    left = (w - width) // 2
    return img[top:top + height, left:left + width, :].copy()


def scale_and_crop(img, size: int) -> np.ndarray:
    """Scale the shorter side to `size`, then center-crop to size x size."""
    img = as_image(img)
    h, w = img.shape[:2]
    scale = size / min(h, w)
    new_w = max(size, int(round(w * scale)))
    new_h = max(size, int(round(h * scale)))
    return center_crop(resize_bilinear(img, new_w, new_h), size, size)


def psnr(a, b, mask=None) -> float:
    """Peak signal-to-noise ratio for peak 1.0; `inf` for identical inputs."""
    a = as_image(a)
    b = as_image(b)
    check_same_shape(a, b, channels=True)
    diff2 = (a - b) ** 2
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.ndim == 3:
            mask = mask[:, :, 0]
        diff2 = diff2[mask]
    if diff2.size == 0:
        raise ValueError("Empty mask")
    mse = float(diff2.mean())
    if mse == 0:
        return math.inf
    return 10 * math.log10(1.0 / mse)


def encode_png(img, bit_depth: int = 8) -> bytes:
    """Quantize to 8 or 16 bits and return the PNG bytes."""
    if bit_depth not in (8, 16):
        raise ValueError(f"bit_depth must be 8 or 16, got {bit_depth}")
    img = as_image(img)
    maxval = 2 ** bit_depth - 1
    dtype = np.uint8 if bit_depth == 8 else np.uint16
    q = np.round(np.clip(img, 0.0, 1.0) * maxval).astype(dtype)
    if q.shape[2] == 1:
        q = q[:, :, 0]
    else:
        q = q[:, :, ::-1]  # RGB -> BGR
    ok, buf = cv2.imencode(".png", np.ascontiguousarray(q))
    if not ok:
        raise OSError("PNG encoding failed")
    return buf.tobytes()


def save_png(img, fn, bit_depth: int = 8):
    """Write `img` as an 8- or 16-bit PNG (atomic)."""
    atomic_write_bytes(fn, encode_png(img, bit_depth=bit_depth))
    logger.debug("Wrote %s (%d-bit)", fn, bit_depth)


def load_png_raw(fn) -> np.ndarray:
    """Decode a PNG without scaling; returns uint8/uint16 (H, W) or (H, W, 3) RGB."""
    fn = Path(fn)
    try:
        data = np.fromfile(fn, dtype=np.uint8)
    except (FileNotFoundError, IsADirectoryError, PermissionError) as e:
        raise OSError(f"Cannot read {fn}: {e}") from e
    arr = cv2.imdecode(data, cv2.IMREAD_UNCHANGED) if data.size else None
    if arr is None:
        raise OSError(f"Cannot decode image file {fn}")
    if arr.dtype not in (np.uint8, np.uint16):
        raise OSError(f"Unsupported sample type {arr.dtype} in {fn}")
    if arr.ndim == 3:
        if arr.shape[2] != 3:
            raise OSError(f"Unsupported channel count {arr.shape[2]} in {fn}")
        arr = arr[:, :, ::-1]  # BGR -> RGB
    return arr


def load_png(fn) -> np.ndarray:
    """Read an 8- or 16-bit grayscale/RGB PNG, mapped linearly to [0, 1]."""
    arr = load_png_raw(fn)
    maxval = np.iinfo(arr.dtype).max
    return as_image(arr.astype(np.float64) / maxval)

"""Grayscale raster images and the pixel-level operations the pipeline builds on.

Images are immutable value objects: intensities are float64 in [0, 1], stored
row-major as ``data[y, x]``, with a physical pixel spacing in micrometers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import correlate1d

from .errors import AllBlackError

__all__ = [
    "GrayImage",
    "RgbImage",
    "CropRect",
    "to_grayscale",
    "trim_black_border",
    "downsample",
    "rotate180",
    "gaussian_blur",
    "bilinear_sample",
    "read_image",
    "read_gray",
    "write_png",
]

# Rec. 601 luma weights.
LUMA_WEIGHTS = (0.299, 0.587, 0.114)

DEFAULT_TRIM_THRESHOLD = 0.02


def _as_locked(data: np.ndarray, ndim: int) -> np.ndarray:
    arr = np.ascontiguousarray(data, dtype=np.float64)
    if arr.ndim != ndim:
        raise ValueError(f"expected a {ndim}-d array, got shape {arr.shape}")
    if arr.size == 0:
        raise ValueError("image must contain at least one pixel")
    arr.setflags(write=False)
    return arr


@dataclass
class GrayImage:
    """Single-channel image with intensities in [0, 1] and spacing in µm/px."""

    data: np.ndarray
    spacing_um: float = 1.0

    def __post_init__(self):
        self.data = _as_locked(self.data, 2)
        lo, hi = float(self.data.min()), float(self.data.max())
        if not (np.isfinite(lo) and np.isfinite(hi)) or lo < 0.0 or hi > 1.0:
            raise ValueError(f"intensities must lie in [0, 1], got [{lo}, {hi}]")
        if not (self.spacing_um > 0.0):
            raise ValueError(f"spacing_um must be positive, got {self.spacing_um}")

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]


@dataclass
class RgbImage:
    """Three-channel image, each channel in [0, 1], stored as ``data[y, x, c]``."""

    data: np.ndarray

    def __post_init__(self):
        self.data = _as_locked(self.data, 3)
        if self.data.shape[2] != 3:
            raise ValueError(f"expected 3 channels, got {self.data.shape[2]}")
        lo, hi = float(self.data.min()), float(self.data.max())
        if not (np.isfinite(lo) and np.isfinite(hi)) or lo < 0.0 or hi > 1.0:
            raise ValueError(f"channel values must lie in [0, 1], got [{lo}, {hi}]")

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]


@dataclass
class CropRect:
    """Retained region of a source image: cropped (i, j) maps to (i + x0, j + y0)."""

    x0: int
    y0: int
    width: int
    height: int

    def to_dict(self) -> dict:
        return {"x0": self.x0, "y0": self.y0, "width": self.width, "height": self.height}


def to_grayscale(img: RgbImage, spacing_um: float = 1.0) -> GrayImage:
    """Convert RGB to luma (Rec. 601 weights); spacing is supplied by the caller."""
    r, g, b = LUMA_WEIGHTS
    luma = r * img.data[:, :, 0] + g * img.data[:, :, 1] + b * img.data[:, :, 2]
    return GrayImage(np.clip(luma, 0.0, 1.0), spacing_um)


def trim_black_border(
    img: GrayImage, threshold: float = DEFAULT_TRIM_THRESHOLD
) -> tuple[GrayImage, CropRect]:
    """Remove black margins: rows/columns whose mean intensity is <= threshold.

    Rows are scanned from the top and bottom, columns from the left and right,
    each scan stopping at the first non-black line. Returns the cropped image
    and the CropRect that maps cropped coordinates back to the source.
    """
    if not (0.0 <= threshold < 1.0):
        raise ValueError(f"threshold must be in [0, 1), got {threshold}")
    row_ok = img.data.mean(axis=1) > threshold
    col_ok = img.data.mean(axis=0) > threshold
    if not row_ok.any() or not col_ok.any():
        raise AllBlackError(f"every row or column has mean intensity <= {threshold}")
    y0 = int(np.argmax(row_ok))
    y1 = img.height - int(np.argmax(row_ok[::-1]))
    x0 = int(np.argmax(col_ok))
    x1 = img.width - int(np.argmax(col_ok[::-1]))
    rect = CropRect(x0, y0, x1 - x0, y1 - y0)
    return GrayImage(img.data[y0:y1, x0:x1], img.spacing_um), rect


def downsample(img: GrayImage, factor: int) -> GrayImage:
    """Box-filter downsampling: average factor x factor blocks.

    Output dimensions are ceil(dim / factor); partial edge blocks average only
    their in-bounds pixels. Spacing is multiplied by the factor.
    """
    if factor < 1:
        raise ValueError(f"factor must be >= 1, got {factor}")
    if factor == 1:
        return GrayImage(img.data, img.spacing_um)
    h, w = img.data.shape
    ys = np.arange(0, h, factor)
    xs = np.arange(0, w, factor)
    sums = np.add.reduceat(np.add.reduceat(img.data, ys, axis=0), xs, axis=1)
    rows = np.minimum(ys + factor, h) - ys
    cols = np.minimum(xs + factor, w) - xs
    counts = rows[:, None] * cols[None, :]
    out = np.clip(sums / counts, 0.0, 1.0)
    return GrayImage(out, img.spacing_um * factor)


def rotate180(img: GrayImage) -> GrayImage:
    """Rotate by 180 degrees: pixel (x, y) maps to (width-1-x, height-1-y)."""
    return GrayImage(img.data[::-1, ::-1], img.spacing_um)


def gaussian_kernel(sigma: float) -> np.ndarray:
    """Normalized 1-d Gaussian kernel truncated at radius ceil(3*sigma)."""
    if not (sigma > 0.0):
        raise ValueError(f"sigma must be positive, got {sigma}")
    radius = math.ceil(3.0 * sigma)
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(img: GrayImage, sigma: float) -> GrayImage:
    """Separable Gaussian blur with clamp-to-edge borders."""
    out = blur_array(img.data, sigma)
    return GrayImage(out, img.spacing_um)


def blur_array(data: np.ndarray, sigma: float) -> np.ndarray:
    """Gaussian-blur a raw float array (same kernel and border policy as images)."""
    k = gaussian_kernel(sigma)
    out = correlate1d(data, k, axis=0, mode="nearest")
    out = correlate1d(out, k, axis=1, mode="nearest")
    return np.clip(out, data.min(), data.max())


def sample_bilinear(data: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Vectorized bilinear sampling with clamp-to-edge for out-of-bounds points."""
    h, w = data.shape
    xc = np.clip(xs, 0.0, w - 1.0)
    yc = np.clip(ys, 0.0, h - 1.0)
    # keep the cell interior to the grid so the top edge samples exactly
    x0 = np.clip(np.floor(xc).astype(np.intp), 0, max(w - 2, 0))
    y0 = np.clip(np.floor(yc).astype(np.intp), 0, max(h - 2, 0))
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = xc - x0
    fy = yc - y0
    top = data[y0, x0] * (1.0 - fx) + data[y0, x1] * fx
    bot = data[y1, x0] * (1.0 - fx) + data[y1, x1] * fx
    return top * (1.0 - fy) + bot * fy


def bilinear_sample(img: GrayImage, x: float, y: float) -> float:
    """Bilinear interpolation at a real-valued point, clamped at the borders."""
    return float(sample_bilinear(img.data, np.asarray(x, float), np.asarray(y, float)))


def _normalize_codes(arr: np.ndarray) -> np.ndarray:
    """Map integer pixel codes to [0, 1] by the source bit depth's max value."""
    if arr.dtype == np.uint8:
        return arr.astype(np.float64) / 255.0
    if arr.dtype == np.uint16:
        return arr.astype(np.float64) / 65535.0
    if np.issubdtype(arr.dtype, np.integer):
        # Pillow reports 16-bit PGM as mode "I" (int32); codes are still 16-bit.
        return np.clip(arr.astype(np.float64) / 65535.0, 0.0, 1.0)
    return np.clip(arr.astype(np.float64), 0.0, 1.0)


def read_image(path: str | Path, spacing_um: float = 1.0) -> GrayImage | RgbImage:
    """Read an 8- or 16-bit grayscale/RGB PNG or PGM/PPM file.

    Spacing is taken from the caller, never from file metadata.
    """
    with Image.open(path) as im:
        if im.mode in ("RGB", "RGBA"):
            arr = np.asarray(im.convert("RGB"))
        else:
            arr = np.asarray(im)
    if arr.ndim == 3:
        return RgbImage(_normalize_codes(arr))
    return GrayImage(_normalize_codes(arr), spacing_um)


def read_gray(path: str | Path, spacing_um: float = 1.0) -> GrayImage:
    """Read an image file and convert to grayscale if it has color channels."""
    img = read_image(path, spacing_um)
    if isinstance(img, RgbImage):
        return to_grayscale(img, spacing_um)
    return img


def write_png(img: GrayImage, path: str | Path) -> None:
    """Write an 8-bit grayscale PNG (intensities scaled to 0..255 and rounded)."""
    codes = np.round(img.data * 255.0).astype(np.uint8)
    Image.fromarray(codes).save(path, format="PNG")

"""Pixel kernels the augmentations are built from.

Images are ``uint8`` arrays of shape ``(H, W, 3)``. Every kernel takes and
returns that form; arithmetic happens in a float working form with samples
in ``[0, 1]`` and is clamped before converting back, so a composition of
kernels never sees an out-of-range sample.
"""

from __future__ import annotations

import math
from pathlib import Path
from typing import NamedTuple

import numpy as np
from numba import njit

FILL = 128

GREY_WEIGHTS = np.array([0.299, 0.587, 0.114])
# PIL's ImageFilter.SMOOTH kernel; border pixels are left untouched.
_SMOOTH_KERNEL = np.array([[1, 1, 1], [1, 5, 1], [1, 1, 1]], dtype=np.float64) / 13.0


class AffineMatrix(NamedTuple):
    """Inverse map from output pixel to source pixel, centered coordinates.

    ``(u, v) = (a*x + b*y + c, d*x + e*y + f)`` where ``(x, y)`` is measured
    from the image center.
    """

    a: float = 1.0
    b: float = 0.0
    c: float = 0.0
    d: float = 0.0
    e: float = 1.0
    f: float = 0.0

    @classmethod
    def identity(cls) -> AffineMatrix:
        return cls()

    @classmethod
    def shear_x(cls, m: float) -> AffineMatrix:
        return cls(1.0, m, 0.0, 0.0, 1.0, 0.0)

    @classmethod
    def shear_y(cls, m: float) -> AffineMatrix:
        return cls(1.0, 0.0, 0.0, m, 1.0, 0.0)

    @classmethod
    def translate(cls, dx: float, dy: float) -> AffineMatrix:
        return cls(1.0, 0.0, dx, 0.0, 1.0, dy)

    @classmethod
    def rotate(cls, degrees: float) -> AffineMatrix:
        """Counter-clockwise rotation about the image center."""
        t = -math.radians(degrees)
        # rounding makes multiples of 90 degrees exact
        cos, sin = round(math.cos(t), 15), round(math.sin(t), 15)
        return cls(cos, sin, 0.0, -sin, cos, 0.0)


def check_image(img: np.ndarray) -> None:
    if img.dtype != np.uint8 or img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected uint8 (H, W, 3) image, got {img.dtype} {img.shape}")
    if img.shape[0] < 1 or img.shape[1] < 1:
        raise ValueError(f"empty image {img.shape}")


def to_float(img: np.ndarray) -> np.ndarray:
    return img.astype(np.float64) / 255.0


def to_uint8(arr: np.ndarray) -> np.ndarray:
    """Float working form back to 8-bit, clamping to [0, 1] first."""
    return np.rint(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)


@njit(cache=True)
def _sample(img, iv, iu, ch, fill):
    h, w, _ = img.shape
    if iv < 0 or iv >= h or iu < 0 or iu >= w:
        return fill
    return float(img[iv, iu, ch])


@njit(cache=True)
def _warp_kernel(img, a, b, c, d, e, f, fill, out):
    h, w, _ = img.shape
    cx = (w - 1) / 2.0
    cy = (h - 1) / 2.0
    for y in range(h):
        yc = y - cy
        for x in range(w):
            xc = x - cx
            u = a * xc + b * yc + c + cx
            v = d * xc + e * yc + f + cy
            if u <= -1.0 or u >= w or v <= -1.0 or v >= h:
                for ch in range(3):
                    out[y, x, ch] = np.uint8(fill)
                continue
            u0 = math.floor(u)
            v0 = math.floor(v)
            fu = u - u0
            fv = v - v0
            iu = int(u0)
            iv = int(v0)
            for ch in range(3):
                val = (
                    _sample(img, iv, iu, ch, fill) * (1 - fu) * (1 - fv)
                    + _sample(img, iv, iu + 1, ch, fill) * fu * (1 - fv)
                    + _sample(img, iv + 1, iu, ch, fill) * (1 - fu) * fv
                    + _sample(img, iv + 1, iu + 1, ch, fill) * fu * fv
                )
                out[y, x, ch] = np.uint8(np.rint(min(max(val, 0.0), 255.0)))


def affine_warp(img: np.ndarray, m: AffineMatrix, fill: int = FILL) -> np.ndarray:
    """Bilinear inverse-mapped warp.

    Each output pixel reads the source at the mapped coordinate; bilinear
    neighbours outside the frame read as ``fill``.
    """
    if not 0 <= fill <= 255:
        raise ValueError(f"fill must be in [0, 255], got {fill}")
    if m == AffineMatrix.identity():
        return img.copy()
    out = np.empty_like(img)
    _warp_kernel(np.ascontiguousarray(img), *map(float, m), float(fill), out)
    return out


def blend(degenerate: np.ndarray, original: np.ndarray, factor: float) -> np.ndarray:
    """``degenerate + factor * (original - degenerate)``, extrapolating past [0, 1]."""
    if degenerate.shape != original.shape:
        raise ValueError(f"shape mismatch: {degenerate.shape} vs {original.shape}")
    if factor == 0.0:
        return degenerate.copy()
    if factor == 1.0:
        return original.copy()
    lo = to_float(degenerate)
    return to_uint8(lo + factor * (to_float(original) - lo))


def posterize(img: np.ndarray, bits: int) -> np.ndarray:
    if not 0 <= bits <= 8:
        raise ValueError(f"posterize bits must be in [0, 8], got {bits}")
    mask = (0xFF << (8 - bits)) & 0xFF
    return img & np.uint8(mask)


def solarize(img: np.ndarray, threshold: int) -> np.ndarray:
    if not 0 <= threshold <= 255:
        raise ValueError(f"solarize threshold must be in [0, 255], got {threshold}")
    return np.where(img >= threshold, 255 - img, img).astype(np.uint8)


def invert(img: np.ndarray) -> np.ndarray:
    return 255 - img


def autocontrast(img: np.ndarray) -> np.ndarray:
    """Stretch each channel to span [0, 255]; constant channels pass through."""
    f = img.astype(np.float64)
    lo = f.min(axis=(0, 1), keepdims=True)
    hi = f.max(axis=(0, 1), keepdims=True)
    span = hi - lo
    flat = span == 0
    scale = np.where(flat, 1.0, 255.0 / np.where(flat, 1.0, span))
    out = np.where(flat, f, (f - lo) * scale)
    return np.rint(np.clip(out, 0, 255)).astype(np.uint8)


def _equalize_lut(channel: np.ndarray) -> np.ndarray:
    hist = np.bincount(channel.ravel(), minlength=256)
    nonzero = np.flatnonzero(hist)
    step = (hist.sum() - hist[nonzero[-1]]) // 255
    if step == 0:
        return np.arange(256, dtype=np.uint8)
    # cumulative count *before* each level, rounded into step-sized bins
    before = np.concatenate(([0], np.cumsum(hist)[:-1]))
    lut = (before + step // 2) // step
    return np.clip(lut, 0, 255).astype(np.uint8)


def equalize(img: np.ndarray) -> np.ndarray:
    """Per-channel histogram equalization with PIL's cumulative-histogram rule."""
    out = np.empty_like(img)
    for c in range(3):
        out[..., c] = _equalize_lut(img[..., c])[img[..., c]]
    return out


def luminance(img: np.ndarray) -> np.ndarray:
    """ITU-R 601 luma as a float (H, W) array on the 8-bit scale."""
    f = img.astype(np.float64)
    return f[..., 0] * 0.299 + f[..., 1] * 0.587 + f[..., 2] * 0.114


def greyscale(img: np.ndarray) -> np.ndarray:
    grey = np.rint(np.clip(luminance(img), 0, 255)).astype(np.uint8)
    return np.repeat(grey[..., None], 3, axis=2)


def mean_grey(img: np.ndarray) -> np.ndarray:
    """Uniform image at the rounded mean luminance (contrast reference)."""
    value = int(np.rint(luminance(img).mean()))
    return np.full_like(img, value)


def smooth(img: np.ndarray) -> np.ndarray:
    """3x3 smoothing blur (sharpness reference); the one-pixel border is kept."""
    h, w, _ = img.shape
    out = img.copy()
    if h < 3 or w < 3:
        return out
    f = img.astype(np.float64)
    acc = np.zeros((h - 2, w - 2, 3))
    for dy in range(3):
        for dx in range(3):
            acc += _SMOOTH_KERNEL[dy, dx] * f[dy : dy + h - 2, dx : dx + w - 2]
    out[1:-1, 1:-1] = np.rint(np.clip(acc, 0, 255)).astype(np.uint8)
    return out


def hflip(img: np.ndarray) -> np.ndarray:
    return img[:, ::-1].copy()


def resize_bilinear(img: np.ndarray, height: int, width: int) -> np.ndarray:
    """Half-pixel-centred bilinear resize; same-size resize is exact."""
    h, w, _ = img.shape
    if (h, w) == (height, width):
        return img.copy()
    ys = np.clip((np.arange(height) + 0.5) * (h / height) - 0.5, 0, h - 1)
    xs = np.clip((np.arange(width) + 0.5) * (w / width) - 0.5, 0, w - 1)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[:, None, None]
    fx = (xs - x0)[None, :, None]
    f = img.astype(np.float64)
    top = f[y0][:, x0] * (1 - fx) + f[y0][:, x1] * fx
    bottom = f[y1][:, x0] * (1 - fx) + f[y1][:, x1] * fx
    out = top * (1 - fy) + bottom * fy
    return np.rint(np.clip(out, 0, 255)).astype(np.uint8)


def read_png(path: str | Path) -> np.ndarray:
    from PIL import Image as PILImage

    with PILImage.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()


def write_png(img: np.ndarray, path: str | Path) -> None:
    from PIL import Image as PILImage

    check_image(img)
    PILImage.fromarray(img, mode="RGB").save(path)

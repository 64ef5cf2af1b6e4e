"""Uniform-sampling augmentation: transform inventory, magnitude ranges,
and the weak / wider pipelines.

One operation is drawn uniformly from the fourteen below, then one
magnitude uniformly from that operation's signed range. There is no
op-count parameter and no separate sign coin.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np
from numba import njit

from dcaug import imaging
from dcaug.imaging import AffineMatrix


class TransformOp(str, enum.Enum):
    SHEAR_X = "ShearX"
    SHEAR_Y = "ShearY"
    TRANSLATE_X = "TranslateX"
    TRANSLATE_Y = "TranslateY"
    ROTATE = "Rotate"
    POSTERIZE = "Posterize"
    SOLARIZE = "Solarize"
    CONTRAST = "Contrast"
    COLOR = "Color"
    BRIGHTNESS = "Brightness"
    SHARPNESS = "Sharpness"
    AUTO_CONTRAST = "AutoContrast"
    EQUALIZE = "Equalize"
    GREY = "Grey"


OPS: tuple[TransformOp, ...] = tuple(TransformOp)
PARAMETERLESS = frozenset({TransformOp.AUTO_CONTRAST, TransformOp.EQUALIZE, TransformOp.GREY})
INTEGER_OPS = frozenset({TransformOp.POSTERIZE, TransformOp.SOLARIZE})
_TRANSLATE = frozenset({TransformOp.TRANSLATE_X, TransformOp.TRANSLATE_Y})
REFERENCE_SIDE = 224


class SpaceVariant(str, enum.Enum):
    DEFAULT = "default"
    WIDE = "wide"
    WIDER = "wider"


def _space(shear, translate, rotate, posterize, enhance, brightness):
    T = TransformOp
    return {
        T.SHEAR_X: shear,
        T.SHEAR_Y: shear,
        T.TRANSLATE_X: translate,
        T.TRANSLATE_Y: translate,
        T.ROTATE: rotate,
        T.POSTERIZE: posterize,
        T.SOLARIZE: (0, 255),
        T.CONTRAST: enhance,
        T.COLOR: enhance,
        T.SHARPNESS: enhance,
        T.BRIGHTNESS: brightness,
    }


# Ranges at the 224-pixel reference side. Parameterless ops are absent.
RANGES: dict[SpaceVariant, dict[TransformOp, tuple[float, float]]] = {
    SpaceVariant.DEFAULT: _space(
        (-0.3, 0.3), (-32.0, 32.0), (-30.0, 30.0), (4, 8), (-1.0, 1.0), (-1.0, 1.0)
    ),
    SpaceVariant.WIDE: _space(
        (-1.0, 1.0), (-32.0, 32.0), (-135.0, 135.0), (2, 8), (-1.0, 1.0), (-1.0, 1.0)
    ),
    SpaceVariant.WIDER: _space(
        (-1.0, 1.0), (-224.0, 224.0), (-135.0, 135.0), (0, 8), (-10.0, 10.0), (-1.0, 10.0)
    ),
}


@dataclass(frozen=True)
class SearchSpace:
    variant: SpaceVariant = SpaceVariant.WIDER
    side: int = REFERENCE_SIDE

    def __post_init__(self):
        object.__setattr__(self, "variant", SpaceVariant(self.variant))
        if self.side < 1:
            raise ValueError(f"side must be >= 1, got {self.side}")

    @classmethod
    def named(cls, name: str, side: int = REFERENCE_SIDE) -> SearchSpace:
        return cls(SpaceVariant(name.lower()), side)


def get_range(space: SearchSpace, op: TransformOp) -> tuple[float, float] | None:
    """Magnitude range of ``op`` in ``space``; ``None`` for parameterless ops.

    Translate ranges scale with the image side so that a full-frame shift
    stays a full-frame shift on small images.
    """
    op = TransformOp(op)
    if op in PARAMETERLESS:
        return None
    lo, hi = RANGES[space.variant][op]
    if op in _TRANSLATE and space.side != REFERENCE_SIDE:
        limit = float(round(hi / REFERENCE_SIDE * space.side))
        return (-limit, limit)
    return (lo, hi)


@dataclass(frozen=True)
class AppliedTransform:
    op: TransformOp
    magnitude: float | int | None = None
    provenance: tuple = ()

    def to_dict(self) -> dict:
        return {"op": self.op.value, "magnitude": self.magnitude}


def sample(space: SearchSpace, rng: np.random.Generator, provenance: tuple = ()) -> AppliedTransform:
    op = OPS[int(rng.integers(len(OPS)))]
    rng_range = get_range(space, op)
    if rng_range is None:
        return AppliedTransform(op, None, provenance)
    lo, hi = rng_range
    if op in INTEGER_OPS:
        magnitude = int(rng.integers(int(lo), int(hi) + 1))
    else:
        magnitude = float(rng.uniform(lo, hi))
    return AppliedTransform(op, magnitude, provenance)


def _check_magnitude(t: AppliedTransform, img: np.ndarray) -> None:
    if t.op in PARAMETERLESS:
        return
    if t.magnitude is None:
        raise ValueError(f"{t.op.value} requires a magnitude")
    # the widest variant envelopes the other two
    lo, hi = get_range(SearchSpace(SpaceVariant.WIDER, max(img.shape[:2])), t.op)
    if not lo <= t.magnitude <= hi:
        raise ValueError(f"{t.op.value} magnitude {t.magnitude} outside [{lo}, {hi}]")


def apply(t: AppliedTransform, img: np.ndarray) -> np.ndarray:
    _check_magnitude(t, img)
    T, m = TransformOp, t.magnitude
    if t.op is T.SHEAR_X:
        return imaging.affine_warp(img, AffineMatrix.shear_x(m))
    if t.op is T.SHEAR_Y:
        return imaging.affine_warp(img, AffineMatrix.shear_y(m))
    if t.op is T.TRANSLATE_X:
        return imaging.affine_warp(img, AffineMatrix.translate(m, 0.0))
    if t.op is T.TRANSLATE_Y:
        return imaging.affine_warp(img, AffineMatrix.translate(0.0, m))
    if t.op is T.ROTATE:
        return imaging.affine_warp(img, AffineMatrix.rotate(m))
    if t.op is T.POSTERIZE:
        return imaging.posterize(img, int(m))
    if t.op is T.SOLARIZE:
        return imaging.solarize(img, int(m))
    if t.op is T.CONTRAST:
        return imaging.blend(imaging.mean_grey(img), img, 1.0 + m)
    if t.op is T.COLOR:
        return imaging.blend(imaging.greyscale(img), img, 1.0 + m)
    if t.op is T.BRIGHTNESS:
        return imaging.blend(np.zeros_like(img), img, 1.0 + m)
    if t.op is T.SHARPNESS:
        return imaging.blend(imaging.smooth(img), img, 1.0 + m)
    if t.op is T.AUTO_CONTRAST:
        return imaging.autocontrast(img)
    if t.op is T.EQUALIZE:
        return imaging.equalize(img)
    if t.op is T.GREY:
        return imaging.greyscale(img)
    raise ValueError(f"unknown op {t.op!r}")


def identity_magnitude(op: TransformOp) -> float | int | None:
    """Magnitude at which ``op`` is the identity, or ``None`` if there is none."""
    if op is TransformOp.POSTERIZE:
        return 8
    if op in PARAMETERLESS or op is TransformOp.SOLARIZE:
        return None
    return 0.0


@dataclass(frozen=True)
class WeakConfig:
    flip: float = 0.5
    scale: tuple[float, float] = (0.7, 1.0)
    brightness: float = 0.3
    contrast: float = 0.3
    saturation: float = 0.3

    def __post_init__(self):
        object.__setattr__(self, "scale", tuple(self.scale))
        if not 0.0 <= self.flip <= 1.0:
            raise ValueError(f"flip probability must be in [0, 1], got {self.flip}")
        lo, hi = self.scale
        if not 0.0 < lo <= hi <= 1.0:
            raise ValueError(f"scale range must lie in (0, 1], got {self.scale}")
        if min(self.brightness, self.contrast, self.saturation) < 0:
            raise ValueError("jitter strengths must be >= 0")

    @classmethod
    def identity(cls) -> WeakConfig:
        return cls(flip=0.0, scale=(1.0, 1.0), brightness=0.0, contrast=0.0, saturation=0.0)


def _weak_draws(cfg: WeakConfig, rng: np.random.Generator, h: int, w: int):
    """All random draws of one weak augmentation, in stream order.

    The stream is consumed identically whatever the config, so two configs
    sharing a seed see the same draws.
    """
    flip = rng.random() < cfg.flip
    side_scale = float(np.sqrt(rng.uniform(*cfg.scale)))
    ch, cw = max(1, round(h * side_scale)), max(1, round(w * side_scale))
    top = int(rng.integers(0, h - ch + 1))
    left = int(rng.integers(0, w - cw + 1))
    b = rng.uniform(1 - cfg.brightness, 1 + cfg.brightness)
    c = rng.uniform(1 - cfg.contrast, 1 + cfg.contrast)
    s = rng.uniform(1 - cfg.saturation, 1 + cfg.saturation)
    return flip, (top, left, ch, cw), (b, c, s)


@njit(cache=True)
def _luma(r, g, b):
    return r * 0.299 + g * 0.587 + b * 0.114


@njit(cache=True)
def _to_u8(x):
    return np.rint(min(max(x, 0.0), 1.0) * 255.0)


@njit(cache=True)
def _weak_kernel(images, flips, crops, factors, out):
    """Flip, crop-resize and jitter each image; every stage rounds to 8 bits."""
    n, h, w, _ = images.shape
    buf = np.empty((h, w, 3))
    for i in range(n):
        img = images[i]
        top, left, ch, cw = crops[i, 0], crops[i, 1], crops[i, 2], crops[i, 3]
        sy = ch / h
        sx = cw / w
        for y in range(h):
            ys = min(max((y + 0.5) * sy - 0.5, 0.0), ch - 1.0)
            y0 = int(math.floor(ys))
            y1 = min(y0 + 1, ch - 1)
            fy = ys - y0
            for x in range(w):
                xs = min(max((x + 0.5) * sx - 0.5, 0.0), cw - 1.0)
                x0 = int(math.floor(xs))
                x1 = min(x0 + 1, cw - 1)
                fx = xs - x0
                c0 = left + x0
                c1 = left + x1
                if flips[i]:
                    c0 = w - 1 - c0
                    c1 = w - 1 - c1
                for c in range(3):
                    t = img[top + y0, c0, c] * (1 - fx) + img[top + y0, c1, c] * fx
                    bt = img[top + y1, c0, c] * (1 - fx) + img[top + y1, c1, c] * fx
                    buf[y, x, c] = np.rint(min(max(t * (1 - fy) + bt * fy, 0.0), 255.0))

        bright, contrast, sat = factors[i, 0], factors[i, 1], factors[i, 2]
        if bright != 1.0:
            for y in range(h):
                for x in range(w):
                    for c in range(3):
                        buf[y, x, c] = _to_u8(bright * (buf[y, x, c] / 255.0))
        if contrast != 1.0:
            total = 0.0
            for y in range(h):
                for x in range(w):
                    total += _luma(buf[y, x, 0], buf[y, x, 1], buf[y, x, 2])
            lo = np.rint(total / (h * w)) / 255.0
            for y in range(h):
                for x in range(w):
                    for c in range(3):
                        buf[y, x, c] = _to_u8(lo + contrast * (buf[y, x, c] / 255.0 - lo))
        if sat != 1.0:
            for y in range(h):
                for x in range(w):
                    g = _luma(buf[y, x, 0], buf[y, x, 1], buf[y, x, 2])
                    lo = np.rint(min(max(g, 0.0), 255.0)) / 255.0
                    for c in range(3):
                        buf[y, x, c] = _to_u8(lo + sat * (buf[y, x, c] / 255.0 - lo))
        for y in range(h):
            for x in range(w):
                for c in range(3):
                    out[i, y, x, c] = np.uint8(buf[y, x, c])


def weak_augment_batch(
    images: np.ndarray, cfg: WeakConfig, rngs: list[np.random.Generator]
) -> np.ndarray:
    """``weak_augment`` over a batch, one stream per image."""
    n, h, w, _ = images.shape
    draws = [_weak_draws(cfg, r, h, w) for r in rngs]
    flips = np.array([d[0] for d in draws], dtype=np.bool_)
    crops = np.array([d[1] for d in draws], dtype=np.int64).reshape(n, 4)
    factors = np.array([d[2] for d in draws], dtype=np.float64).reshape(n, 3)
    out = np.empty_like(images)
    _weak_kernel(np.ascontiguousarray(images), flips, crops, factors, out)
    return out


def weak_augment(img: np.ndarray, cfg: WeakConfig, rng: np.random.Generator) -> np.ndarray:
    """Flip, square random-resized crop, then brightness/contrast/saturation jitter.

    Jitter factors are drawn from ``[1 - s, 1 + s]`` and applied in that
    order, each as a blend against black, the mean-luma grey, and the
    greyscale image respectively.
    """
    return weak_augment_batch(img[None], cfg, [rng])[0]


def wider_augment(
    weak_img: np.ndarray,
    space: SearchSpace,
    rng: np.random.Generator,
    provenance: tuple = (),
) -> tuple[np.ndarray, AppliedTransform]:
    """One uniformly sampled transform from ``space`` applied on top of the weak view."""
    t = sample(space, rng, provenance)
    return apply(t, weak_img), t


def augment_pair(
    img: np.ndarray,
    weak_cfg: WeakConfig,
    space: SearchSpace,
    rng: np.random.Generator,
    provenance: tuple = (),
) -> tuple[np.ndarray, np.ndarray, AppliedTransform]:
    """Both candidates for one sample; the wider view is built on the weak one."""
    weak_img = weak_augment(img, weak_cfg, rng)
    wider_img, t = wider_augment(weak_img, space, rng, provenance)
    return weak_img, wider_img, t

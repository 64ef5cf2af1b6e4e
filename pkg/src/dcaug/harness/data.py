"""Synthetic style-shifted shape domains.

Every domain draws the same set of shape classes but renders them in its
own style (background palette and texture, foreground colour, outline vs
fill), so a held-out domain shares the classes and not the look.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

SHAPES = ("circle", "square", "triangle", "cross", "ring")


@dataclass(frozen=True)
class DomainStyle:
    name: str
    background: tuple[tuple[int, int, int], tuple[int, int, int]]
    foreground: tuple[int, int, int]
    texture: str = "solid"  # solid | stripes | noise
    stroke: float = 0.0  # outline width in pixels; 0 fills the shape
    hue_jitter: int = 20

    def __post_init__(self):
        if self.texture not in ("solid", "stripes", "noise"):
            raise ValueError(f"unknown texture {self.texture!r}")


# Shapes are darker than their background in every domain; the domains
# differ in hue and texture, and sketch draws outlines only.
DEFAULT_STYLES = (
    DomainStyle("photo", ((214, 196, 160), (190, 170, 130)), (40, 60, 140), "solid", 0.0),
    DomainStyle("cartoon", ((250, 230, 120), (235, 200, 90)), (200, 30, 110), "stripes", 0.0),
    DomainStyle("sketch", ((245, 245, 245), (225, 225, 225)), (20, 20, 20), "solid", 2.5),
    DomainStyle("noise", ((150, 200, 150), (110, 160, 110)), (120, 50, 10), "noise", 0.0),
)


@dataclass(frozen=True)
class SyntheticDomainSpec:
    styles: tuple[DomainStyle, ...] = DEFAULT_STYLES
    classes: tuple[str, ...] = SHAPES
    side: int = 32
    samples_per_domain: int = 200

    def __post_init__(self):
        if not self.styles:
            raise ValueError("at least one domain style is required")
        if not self.classes:
            raise ValueError("at least one class is required")
        if self.samples_per_domain < 1:
            raise ValueError("samples_per_domain must be >= 1")
        unknown = set(self.classes) - set(SHAPES)
        if unknown:
            raise ValueError(f"unknown shapes {sorted(unknown)}")
        looks = [(s.background, s.foreground, s.texture, s.stroke) for s in self.styles]
        if len(set(looks)) != len(looks):
            raise ValueError("domain styles must be pairwise distinct")

    @classmethod
    def default(cls, domains: int = 4, classes: int = 5, side: int = 32, samples_per_domain: int = 200):
        if not 1 <= domains <= len(DEFAULT_STYLES):
            raise ValueError(f"between 1 and {len(DEFAULT_STYLES)} built-in domains, got {domains}")
        if not 1 <= classes <= len(SHAPES):
            raise ValueError(f"between 1 and {len(SHAPES)} built-in classes, got {classes}")
        return cls(DEFAULT_STYLES[:domains], SHAPES[:classes], side, samples_per_domain)


@dataclass
class DomainDataset:
    """Flat sample arrays; ``ids`` are stable sample identities across subsets."""

    images: np.ndarray
    labels: np.ndarray
    domains: np.ndarray
    num_classes: int
    domain_names: tuple[str, ...]
    ids: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.ids is None:
            self.ids = np.arange(len(self.images))
        n = len(self.images)
        if not (len(self.labels) == len(self.domains) == len(self.ids) == n):
            raise ValueError("images, labels, domains and ids must have equal length")
        if n and (self.labels.max() >= self.num_classes or self.labels.min() < 0):
            raise ValueError("label out of range")
        if n and (self.domains.max() >= self.num_domains or self.domains.min() < 0):
            raise ValueError("domain out of range")

    @property
    def num_domains(self) -> int:
        return len(self.domain_names)

    @property
    def image_shape(self) -> tuple[int, ...]:
        return self.images.shape[1:]

    def __len__(self) -> int:
        return len(self.images)

    def subset(self, index) -> DomainDataset:
        index = np.asarray(index)
        return DomainDataset(
            self.images[index], self.labels[index], self.domains[index],
            self.num_classes, self.domain_names, self.ids[index],
        )

    def domain(self, d: int) -> DomainDataset:
        return self.subset(np.flatnonzero(self.domains == d))

    def digest(self) -> str:
        h = hashlib.sha256()
        for arr in (self.images, self.labels.astype("<i8"), self.domains.astype("<i8")):
            h.update(np.ascontiguousarray(arr).tobytes())
        h.update(repr((self.num_classes, self.domain_names)).encode())
        return h.hexdigest()

    def save(self, path: str | Path) -> None:
        np.savez_compressed(
            path,
            images=self.images,
            labels=self.labels,
            domains=self.domains,
            ids=self.ids,
            num_classes=self.num_classes,
            domain_names=np.array(self.domain_names),
        )

    @classmethod
    def load(cls, path: str | Path) -> DomainDataset:
        with np.load(path) as z:
            return cls(
                z["images"], z["labels"], z["domains"], int(z["num_classes"]),
                tuple(str(s) for s in z["domain_names"]), z["ids"],
            )


def _sdf(shape: str, px: np.ndarray, py: np.ndarray, r: float) -> np.ndarray:
    """Signed distance in pixels, negative inside."""
    if shape == "circle":
        return np.hypot(px, py) - r
    if shape == "ring":
        return np.abs(np.hypot(px, py) - 0.72 * r) - 0.28 * r
    if shape == "square":
        s = 0.82 * r
        qx, qy = np.abs(px) - s, np.abs(py) - s
        return np.hypot(np.maximum(qx, 0), np.maximum(qy, 0)) + np.minimum(np.maximum(qx, qy), 0)
    if shape == "cross":
        arm, half = r, 0.3 * r

        def box(ax, ay):
            qx, qy = np.abs(px) - ax, np.abs(py) - ay
            return np.hypot(np.maximum(qx, 0), np.maximum(qy, 0)) + np.minimum(np.maximum(qx, qy), 0)

        return np.minimum(box(arm, half), box(half, arm))
    if shape == "triangle":
        # equilateral, apex up, circumradius r; max of edge half-planes
        sides = (np.sqrt(3.0) * np.abs(px) - py - r) / 2.0
        return np.maximum(sides, py - 0.5 * r)
    raise ValueError(f"unknown shape {shape!r}")


def _background(style: DomainStyle, side: int, rng: np.random.Generator) -> np.ndarray:
    c0 = np.array(style.background[0], dtype=np.float64) + rng.integers(-12, 13, 3)
    c1 = np.array(style.background[1], dtype=np.float64) + rng.integers(-12, 13, 3)
    if style.texture == "solid":
        return np.broadcast_to(c0, (side, side, 3)).copy()
    if style.texture == "stripes":
        period = rng.integers(5, 9)
        angle = rng.uniform(0, np.pi)
        ys, xs = np.mgrid[0:side, 0:side]
        phase = (xs * np.cos(angle) + ys * np.sin(angle)) / period + rng.uniform()
        mask = (np.floor(phase) % 2)[..., None]
        return c0 * (1 - mask) + c1 * mask
    t = rng.uniform(0, 1, (side, side, 1))
    return c0 * (1 - t) + c1 * t


def render(shape: str, style: DomainStyle, side: int, rng: np.random.Generator) -> np.ndarray:
    """One anti-aliased sample of ``shape`` drawn in ``style``."""
    bg = _background(style, side, rng)
    fg = np.clip(np.array(style.foreground) + rng.integers(-style.hue_jitter, style.hue_jitter + 1, 3), 0, 255)
    r = side * rng.uniform(0.26, 0.36)
    cx = (side - 1) / 2 + rng.uniform(-2.5, 2.5)
    cy = (side - 1) / 2 + rng.uniform(-2.5, 2.5)
    theta = np.deg2rad(rng.uniform(-15, 15))
    ys, xs = np.mgrid[0:side, 0:side].astype(np.float64)
    dx, dy = xs - cx, ys - cy
    px = np.cos(theta) * dx + np.sin(theta) * dy
    py = -np.sin(theta) * dx + np.cos(theta) * dy
    d = _sdf(shape, px, py, r)
    if style.stroke > 0:
        d = np.abs(d) - style.stroke / 2.0
    cover = np.clip(0.5 - d, 0.0, 1.0)[..., None]
    img = bg * (1 - cover) + fg * cover
    return np.rint(np.clip(img, 0, 255)).astype(np.uint8)


def generate_dataset(spec: SyntheticDomainSpec, seed: int = 0) -> DomainDataset:
    """Class-balanced samples for every domain; deterministic in ``(spec, seed)``."""
    k = len(spec.classes)
    images, labels, domains = [], [], []
    for d, style in enumerate(spec.styles):
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(d,)))
        for i in range(spec.samples_per_domain):
            y = i % k
            images.append(render(spec.classes[y], style, spec.side, rng))
            labels.append(y)
            domains.append(d)
    return DomainDataset(
        np.stack(images),
        np.array(labels, dtype=np.int64),
        np.array(domains, dtype=np.int64),
        k,
        tuple(s.name for s in spec.styles),
    )


def spec_to_dict(spec: SyntheticDomainSpec) -> dict:
    return asdict(spec)

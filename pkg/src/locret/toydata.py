"""Synthetic shapes-on-clutter dataset with ground-truth masks.

Each class is one textured shape (disk, square, triangle, cross, ring)
rendered at a random position and scale over smoothed random clutter.
The foreground mask is recorded per sample for measuring localization
quality only; training never sees it. Everything is deterministic per
seed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .seeds import rng_for

SHAPES = ("disk", "square", "triangle", "cross", "ring")
MIN_AREA_FRAC = 0.05
MAX_AREA_FRAC = 0.50


@dataclass
class ToySample:
    image: np.ndarray        # (h, w, 3) floats in [0, 1]
    class_id: int
    foreground_mask: np.ndarray  # (h, w) binary, evaluation-only

    def __post_init__(self):
        if self.foreground_mask.shape != self.image.shape[:2]:
            raise ValueError("mask extents must match the image")


def _shape_mask(kind: str, size: int, cy: float, cx: float, radius: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    if kind == "disk":
        return dy * dy + dx * dx <= radius * radius
    if kind == "square":
        return (np.abs(dy) <= radius) & (np.abs(dx) <= radius)
    if kind == "triangle":
        # upward triangle: inside three half-planes
        return (dy <= radius) & (dy + 2.0 * dx >= -2.0 * radius) & (dy - 2.0 * dx >= -2.0 * radius)
    if kind == "cross":
        arm = radius * 0.38
        return ((np.abs(dy) <= arm) & (np.abs(dx) <= radius)) | \
               ((np.abs(dx) <= arm) & (np.abs(dy) <= radius))
    if kind == "ring":
        r2 = dy * dy + dx * dx
        return (r2 <= radius * radius) & (r2 >= (0.55 * radius) ** 2)
    raise ValueError(f"unknown shape {kind!r}")


def _texture(kind_index: int, size: int, phase: float, rng: np.random.Generator) -> np.ndarray:
    """Class-specific texture: stripes whose orientation encodes the class.

    Every class shares one warm two-tone palette, so globally pooled color
    statistics carry no class signal; only the stripe orientation (and the
    shape silhouette) discriminates.
    """
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    angle = (kind_index * 60.0) % 180.0
    freq = 1.3
    t = np.cos(np.deg2rad(angle))
    s = np.sin(np.deg2rad(angle))
    wave = 0.5 + 0.5 * np.sin(freq * (t * xx + s * yy) + phase)
    lo = np.array([0.15, 0.12, 0.10])
    hi = np.array([0.95, 0.90, 0.85])
    tex = lo[None, None, :] + wave[:, :, None] * (hi - lo)[None, None, :]
    tex += rng.normal(0.0, 0.03, size=tex.shape)
    return np.clip(tex, 0.0, 1.0)


def _area_coeff(kind: str) -> float:
    """Mask area divided by radius^2, measured once per shape kind."""
    if kind not in _area_coeff.cache:
        m = _shape_mask(kind, 512, 256.0, 256.0, 100.0)
        _area_coeff.cache[kind] = float(m.sum()) / 100.0 ** 2
    return _area_coeff.cache[kind]


_area_coeff.cache = {}


def _clutter(size: int, level: float, rng: np.random.Generator) -> np.ndarray:
    """Mosaic of small stripe patches at random orientations plus grain.

    The clutter is built from the same stripe family as the foreground
    textures but in incoherent patches, so globally pooled statistics are
    confusing and only a spatially coherent region identifies the class.
    ``level`` scales the patch contrast relative to the foreground.
    """
    cell = max(4, size // 6)
    ncell = (size + cell - 1) // cell
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    canvas = np.zeros((size, size))
    for gy in range(ncell):
        for gx in range(ncell):
            angle = rng.uniform(0.0, np.pi)
            freq = 1.3 * rng.uniform(0.75, 1.3)
            phase = rng.uniform(0.0, 2 * np.pi)
            sl = (slice(gy * cell, min((gy + 1) * cell, size)),
                  slice(gx * cell, min((gx + 1) * cell, size)))
            wave = np.sin(freq * (np.cos(angle) * xx[sl] + np.sin(angle) * yy[sl]) + phase)
            canvas[sl] = wave
    lo = np.array([0.15, 0.12, 0.10])
    hi = np.array([0.95, 0.90, 0.85])
    mid = (lo + hi) / 2.0
    amp = (hi - lo) / 2.0 * (0.8 * level)
    img = mid[None, None, :] + canvas[:, :, None] * amp[None, None, :]
    img += rng.normal(0.0, 0.04, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def gen_toy_dataset(num_classes: int, per_class: int, image_size: int = 32,
                    clutter_level: float = 1.0, seed: int = 0) -> list[ToySample]:
    """Render ``num_classes * per_class`` samples, mask area in [5%, 50%]."""
    if num_classes < 2:
        raise ValueError("need at least two classes")
    if image_size < 8:
        raise ValueError("image_size must be at least 8")
    samples = []
    for cls in range(num_classes):
        kind = SHAPES[cls % len(SHAPES)]
        for k in range(per_class):
            rng = rng_for(seed, "toy", cls, k)
            img = _clutter(image_size, clutter_level, rng)
            for _ in range(64):
                # target area drawn first and radius solved per shape, so the
                # foreground fraction carries no class information
                target = rng.uniform(0.06, 0.16)
                radius = np.sqrt(target * image_size ** 2 / _area_coeff(kind))
                radius = min(radius, image_size / 2.0 - 1.0)
                cy = rng.uniform(radius, image_size - radius)
                cx = rng.uniform(radius, image_size - radius)
                mask = _shape_mask(kind, image_size, cy, cx, radius)
                frac = mask.mean()
                if MIN_AREA_FRAC <= frac <= MAX_AREA_FRAC:
                    break
            else:
                raise RuntimeError("could not place a shape within area bounds")
            tex = _texture(cls, image_size, phase=rng.uniform(0, 2 * np.pi), rng=rng)
            img = np.where(mask[:, :, None], tex, img)
            samples.append(ToySample(image=img, class_id=cls,
                                     foreground_mask=mask.astype(np.float64)))
    return samples

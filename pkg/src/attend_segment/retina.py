"""Retina-like glimpses and pixel-budget accounting.

A retina glimpse is a square window whose resolution drops with the distance
from its center.  It is made of concentric square rings; ring ``i`` covers the
annulus between ``ring_sizes[i - 1]`` and ``ring_sizes[i]`` and is sampled at
``1 / ring_scales[i]`` of the full resolution.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

ALIGNMENT = 4


class GlimpseBoundsError(ValueError):
    """Raised when a glimpse window does not fit inside the image."""


def default_rings(glimpse_size: int, num_scales: int) -> tuple[list[int], list[int]]:
    """Ring sizes and downscale factors for a retina with ``num_scales`` rings.

    For a 48 pixel glimpse these are ``[48]``, ``[16, 48]`` and ``[16, 32, 48]``
    with scales ``[1]``, ``[1, 2]`` and ``[1, 2, 3]``.
    """
    if num_scales not in (1, 2, 3):
        raise ValueError(f"num_scales must be 1, 2 or 3, got {num_scales}")
    if num_scales > 1 and glimpse_size % 3:
        raise ValueError("glimpse_size must be divisible by 3 for multi-scale retinas")
    third = glimpse_size // 3
    if num_scales == 1:
        return [glimpse_size], [1]
    if num_scales == 2:
        return [third, glimpse_size], [1, 2]
    return [third, 2 * third, glimpse_size], [1, 2, 3]


@dataclass(frozen=True)
class RetinaConfig:
    num_scales: int = 3
    glimpse_size: int = 48
    ring_sizes: Optional[tuple[int, ...]] = None
    ring_scales: Optional[tuple[int, ...]] = None

    def __post_init__(self):
        sizes, scales = self.ring_sizes, self.ring_scales
        if sizes is None or scales is None:
            default_sizes, default_scales = default_rings(self.glimpse_size, self.num_scales)
            sizes = default_sizes if sizes is None else sizes
            scales = default_scales if scales is None else scales
        object.__setattr__(self, "ring_sizes", tuple(int(s) for s in sizes))
        object.__setattr__(self, "ring_scales", tuple(int(s) for s in scales))
        self._validate()

    def _validate(self):
        sizes, scales = self.ring_sizes, self.ring_scales
        if not (len(sizes) == len(scales) == self.num_scales):
            raise ValueError("ring_sizes and ring_scales must have num_scales entries")
        if any(b <= a for a, b in zip(sizes, sizes[1:])):
            raise ValueError(f"ring_sizes must be strictly increasing, got {sizes}")
        if sizes[-1] != self.glimpse_size:
            raise ValueError("the outermost ring must span the whole glimpse")
        if scales[0] != 1:
            raise ValueError("the central ring must be full resolution")
        for size, scale in zip(sizes, scales):
            if scale < 1 or size % scale:
                raise ValueError(f"ring of size {size} cannot be tiled by {scale}x{scale} cells")
            if (self.glimpse_size - size) % 2:
                raise ValueError("rings must be centered on whole pixels")


@dataclass(frozen=True)
class GlimpseSpec:
    top: int
    left: int
    config: RetinaConfig = field(default_factory=RetinaConfig)

    @property
    def size(self) -> int:
        return self.config.glimpse_size

    @property
    def center(self) -> tuple[float, float]:
        half = self.size / 2
        return self.top + half, self.left + half

    def check(self, image_h: int, image_w: int) -> None:
        g = self.size
        if not (0 <= self.top <= image_h - g and 0 <= self.left <= image_w - g):
            raise GlimpseBoundsError(
                f"glimpse at ({self.top}, {self.left}) of size {g} "
                f"does not fit in a {image_h}x{image_w} image")
        if self.top % ALIGNMENT or self.left % ALIGNMENT:
            raise GlimpseBoundsError(
                f"glimpse position ({self.top}, {self.left}) is not a multiple of {ALIGNMENT}")


@dataclass
class RetinaGlimpse:
    pixels: np.ndarray
    source_pixel_count: int


def analytic_pixel_count(config: RetinaConfig) -> int:
    """Number of source pixels one glimpse charges against the budget.

    Each ring contributes ``floor(ring_area / scale**2)``, ``ring_area`` being the
    area between this ring and the one inside it.
    """
    total = 0
    inner = 0
    for size, scale in zip(config.ring_sizes, config.ring_scales):
        total += (size * size - inner * inner) // (scale * scale)
        inner = size
    return total


def budget_ratio(config: RetinaConfig, n_glimpses: int, image_h: int, image_w: int) -> float:
    """Percentage of the image pixels read by ``n_glimpses`` glimpses.

    Truncated (not rounded) to one decimal, which is how the reference budget
    table is reported (e.g. 5 full-resolution glimpses on 128x256 give 35.16%,
    listed as 35.1).
    """
    if n_glimpses < 1:
        raise ValueError("n_glimpses must be at least 1")
    exact = 100.0 * n_glimpses * analytic_pixel_count(config) / (image_h * image_w)
    # small epsilon keeps values like 7.0000000001 / 6.9999999999 stable
    return math.floor(exact * 10 + 1e-9) / 10


def snap_location(row: float, col: float, image_h: int, image_w: int,
                  glimpse_size: int) -> tuple[int, int]:
    """Top-left corner of a glimpse centered on ``(row, col)``.

    The corner is rounded down to a multiple of 4 and clamped into the image.
    """
    half = glimpse_size // 2
    top = int(math.floor(row)) - half
    left = int(math.floor(col)) - half
    top -= top % ALIGNMENT
    left -= left % ALIGNMENT
    max_top = (image_h - glimpse_size) // ALIGNMENT * ALIGNMENT
    max_left = (image_w - glimpse_size) // ALIGNMENT * ALIGNMENT
    return min(max(top, 0), max_top), min(max(left, 0), max_left)


def _pool_ring(window: np.ndarray, scale: int) -> np.ndarray:
    """Average-pool ``window`` (s x s x C) by ``scale`` and expand it back."""
    if scale == 1:
        return window
    s, _, c = window.shape
    n = s // scale
    pooled = window.reshape(n, scale, n, scale, c).mean(axis=(1, 3))
    return np.repeat(np.repeat(pooled, scale, axis=0), scale, axis=1)


def extract_glimpse(image: np.ndarray, spec: GlimpseSpec) -> RetinaGlimpse:
    """Cut a mixed-resolution glimpse out of an ``H x W x C`` image.

    Rings are painted from the outside in, so a coarse cell that straddles the
    boundary of a finer ring only shows on the pixels outside that ring.
    """
    if image.ndim != 3:
        raise ValueError(f"expected an H x W x C image, got shape {image.shape}")
    h, w, _ = image.shape
    spec.check(h, w)
    cfg = spec.config
    g = cfg.glimpse_size
    crop = image[spec.top:spec.top + g, spec.left:spec.left + g]
    out = np.empty(crop.shape, dtype=np.result_type(crop.dtype, np.float32))
    for size, scale in reversed(list(zip(cfg.ring_sizes, cfg.ring_scales))):
        o = (g - size) // 2
        out[o:o + size, o:o + size] = _pool_ring(crop[o:o + size, o:o + size], scale)
    return RetinaGlimpse(pixels=out, source_pixel_count=analytic_pixel_count(cfg))


def extract_glimpses(images: np.ndarray, specs: Sequence[GlimpseSpec]) -> np.ndarray:
    """Batched :func:`extract_glimpse`; returns ``B x g x g x C``."""
    return np.stack([extract_glimpse(img, spec).pixels for img, spec in zip(images, specs)])

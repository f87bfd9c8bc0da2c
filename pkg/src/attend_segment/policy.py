"""Where to look next.

The certainty map is cut into non-overlapping 16x16 patches and the patch with
the lowest certainty sum is attended.  The horizon and restricted baselines use
the same rule over a subset of patches; the random baseline samples a patch
uniformly.  Ties go to the smallest row-major patch index.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .retina import GlimpseSpec, RetinaConfig, snap_location

PATCH_SIZE = 16
POLICIES = ("uncertainty", "random", "horizon", "restricted")


def _as_map(certainty) -> np.ndarray:
    c = np.asarray(certainty, dtype=np.float64)
    if c.ndim == 3:
        c = c[..., 0] if c.shape[-1] == 1 else c[0]
    if c.ndim != 2:
        raise ValueError(f"expected an H x W certainty map, got shape {np.shape(certainty)}")
    h, w = c.shape
    if h % PATCH_SIZE or w % PATCH_SIZE:
        raise ValueError(f"certainty map {h}x{w} is not divisible into {PATCH_SIZE}px patches")
    return c


def patch_sums(certainty, patch_size: int = PATCH_SIZE) -> np.ndarray:
    c = _as_map(certainty)
    h, w = c.shape
    return c.reshape(h // patch_size, patch_size, w // patch_size, patch_size).sum(axis=(1, 3))


@dataclass
class PatchGrid:
    grid: np.ndarray
    visited: np.ndarray
    patch_size: int = PATCH_SIZE

    @classmethod
    def from_certainty(cls, certainty, visited: Optional[np.ndarray] = None) -> "PatchGrid":
        grid = patch_sums(certainty)
        if visited is None:
            visited = np.zeros(grid.shape, dtype=bool)
        return cls(grid, visited)

    def mark(self, spec: GlimpseSpec) -> None:
        p = self.patch_size
        g = spec.size
        self.visited[spec.top // p:-(-(spec.top + g) // p), spec.left // p:-(-(spec.left + g) // p)] = True


def patch_center(index: tuple[int, int], patch_size: int = PATCH_SIZE) -> tuple[int, int]:
    r, c = index
    return r * patch_size + patch_size // 2, c * patch_size + patch_size // 2


def _spec_for_patch(index, image_h, image_w, retina: RetinaConfig) -> GlimpseSpec:
    row, col = patch_center(index)
    top, left = snap_location(row, col, image_h, image_w, retina.glimpse_size)
    return GlimpseSpec(top, left, retina)


def masked_argmin(sums: np.ndarray, candidates: Optional[np.ndarray] = None) -> tuple[int, int]:
    """Row-major first minimum of ``sums`` over the ``candidates`` mask."""
    values = sums if candidates is None else np.where(candidates, sums, np.inf)
    if candidates is not None and not candidates.any():
        raise ValueError("empty candidate set")
    return tuple(int(i) for i in np.unravel_index(np.argmin(values), sums.shape))


def horizon_candidates(grid_shape, band: float = 1 / 3) -> np.ndarray:
    """Patch rows in the middle ``band`` fraction of the image."""
    rows, cols = grid_shape
    # rounding guards against 2.0000000000000004-style float noise
    lo = math.floor(round(rows * (1 - band) / 2, 9))
    hi = max(math.ceil(round(rows * (1 + band) / 2, 9)), lo + 1)
    mask = np.zeros(grid_shape, dtype=bool)
    mask[lo:hi] = True
    return mask


def restricted_candidates(grid_shape, current: GlimpseSpec, radius: float) -> np.ndarray:
    """Patches whose centers are within Chebyshev ``radius`` of the glimpse center."""
    rows, cols = grid_shape
    cy, cx = current.center
    py = np.arange(rows) * PATCH_SIZE + PATCH_SIZE / 2
    px = np.arange(cols) * PATCH_SIZE + PATCH_SIZE / 2
    return (np.abs(py - cy)[:, None] <= radius) & (np.abs(px - cx)[None, :] <= radius)


def select_uncertainty(certainty, retina: RetinaConfig) -> GlimpseSpec:
    sums = patch_sums(certainty)
    h, w = _as_map(certainty).shape
    return _spec_for_patch(masked_argmin(sums), h, w, retina)


def select_horizon(certainty, retina: RetinaConfig, band: float = 1 / 3) -> GlimpseSpec:
    sums = patch_sums(certainty)
    h, w = _as_map(certainty).shape
    return _spec_for_patch(masked_argmin(sums, horizon_candidates(sums.shape, band)), h, w, retina)


def select_restricted(certainty, current: GlimpseSpec, retina: RetinaConfig,
                      radius: float = 48) -> GlimpseSpec:
    sums = patch_sums(certainty)
    h, w = _as_map(certainty).shape
    mask = restricted_candidates(sums.shape, current, radius)
    return _spec_for_patch(masked_argmin(sums, mask), h, w, retina)


def select_random(rng: np.random.Generator, image_h: int, image_w: int,
                  retina: RetinaConfig) -> GlimpseSpec:
    """Glimpse centered on a uniformly drawn patch."""
    rows, cols = image_h // PATCH_SIZE, image_w // PATCH_SIZE
    flat = int(rng.integers(rows * cols))
    return _spec_for_patch(divmod(flat, cols), image_h, image_w, retina)


@dataclass
class GlimpsePolicy:
    """Bundles a policy kind with its settings.

    ``select`` is called once per step; ``certainty`` is ``None`` when no
    certainty map exists yet (the first glimpse of a glimpse-only rollout),
    in which case the location is drawn at random.
    """

    kind: str = "uncertainty"
    horizon_band: float = 1 / 3
    restricted_radius_px: float = 48

    def __post_init__(self):
        if self.kind not in POLICIES:
            raise ValueError(f"unknown policy {self.kind!r}; expected one of {POLICIES}")

    def select(self, certainty, current: Optional[GlimpseSpec], rng: np.random.Generator,
               image_h: int, image_w: int, retina: RetinaConfig) -> GlimpseSpec:
        if self.kind == "random" or certainty is None:
            return select_random(rng, image_h, image_w, retina)
        if self.kind == "horizon":
            return select_horizon(certainty, retina, self.horizon_band)
        if self.kind == "restricted" and current is not None:
            return select_restricted(certainty, current, retina, self.restricted_radius_px)
        return select_uncertainty(certainty, retina)

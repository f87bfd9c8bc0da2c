"""Spatial feature memories filled glimpse by glimpse.

Three grids are kept, one per encoder level: ``level1`` at image resolution,
``level2`` at half and ``bottleneck`` at quarter resolution.  A glimpse whose
top-left corner is ``(top, left)`` is written at ``(top, left) / stride`` of each
grid; where glimpses overlap, the newest one wins.

Grids are torch tensors laid out ``B x C x h x w`` so that writes stay
differentiable with respect to the encoder that produced the features.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Union

import torch

from .retina import ALIGNMENT, GlimpseSpec

BOTTLENECK_CHANNELS = 32
STRIDES = (1, 2, 4)


class MemoryAlignmentError(ValueError):
    """Raised for writes that do not land on whole cells of every level."""


@dataclass
class GlimpseFeatures:
    """Encoder activations of one batch of glimpses (``B x C x g/s x g/s``)."""

    f1: torch.Tensor
    f2: torch.Tensor
    fb: torch.Tensor

    def levels(self):
        return self.f1, self.f2, self.fb


@dataclass
class MemoryState:
    level1: torch.Tensor
    level2: torch.Tensor
    bottleneck: torch.Tensor
    occupancy: tuple[torch.Tensor, torch.Tensor, torch.Tensor]

    @classmethod
    def empty(cls, batch: int, height: int, width: int, c1: int = 8, c2: int = 16,
              cb: int = BOTTLENECK_CHANNELS, dtype=torch.float32) -> "MemoryState":
        if height % 16 or width % 16:
            raise ValueError(f"memory size must be divisible by 16, got {height}x{width}")
        grids = []
        masks = []
        for stride, c in zip(STRIDES, (c1, c2, cb)):
            shape = (batch, c, height // stride, width // stride)
            grids.append(torch.zeros(shape, dtype=dtype))
            masks.append(torch.zeros((batch, 1) + shape[2:], dtype=torch.bool))
        return cls(*grids, occupancy=tuple(masks))

    @property
    def grids(self):
        return self.level1, self.level2, self.bottleneck

    @property
    def batch_size(self) -> int:
        return self.level1.shape[0]

    @property
    def image_size(self) -> tuple[int, int]:
        return tuple(self.level1.shape[2:])


def _place(grid: torch.Tensor, mask: torch.Tensor, feats: torch.Tensor,
           tops: torch.Tensor, lefts: torch.Tensor):
    """Overwrite per-sample blocks of ``grid`` with ``feats``; gather based."""
    b, _, h, w = grid.shape
    gh, gw = feats.shape[2:]
    rows = torch.arange(h).view(1, h) - tops.view(b, 1)
    cols = torch.arange(w).view(1, w) - lefts.view(b, 1)
    in_rows = (rows >= 0) & (rows < gh)
    in_cols = (cols >= 0) & (cols < gw)
    block = (in_rows[:, :, None] & in_cols[:, None, :])[:, None]
    ri = rows.clamp(0, gh - 1)[:, :, None].expand(b, h, w)
    ci = cols.clamp(0, gw - 1)[:, None, :].expand(b, h, w)
    bi = torch.arange(b).view(b, 1, 1).expand(b, h, w)
    placed = feats.permute(0, 2, 3, 1)[bi, ri, ci].permute(0, 3, 1, 2)
    return torch.where(block, placed, grid), mask | block


def _positions(spec: Union[GlimpseSpec, Sequence[GlimpseSpec]], batch: int):
    specs = [spec] * batch if isinstance(spec, GlimpseSpec) else list(spec)
    if len(specs) != batch:
        raise ValueError(f"got {len(specs)} glimpse positions for a batch of {batch}")
    for s in specs:
        if s.top % ALIGNMENT or s.left % ALIGNMENT:
            raise MemoryAlignmentError(
                f"glimpse position ({s.top}, {s.left}) is not a multiple of {ALIGNMENT}")
    tops = torch.tensor([s.top for s in specs], dtype=torch.long)
    lefts = torch.tensor([s.left for s in specs], dtype=torch.long)
    return tops, lefts


def write(memory: MemoryState, feats: GlimpseFeatures,
          spec: Union[GlimpseSpec, Sequence[GlimpseSpec]]) -> MemoryState:
    """Return a new state with ``feats`` written at the glimpse positions.

    ``spec`` is one position for the whole batch or one per sample.
    """
    tops, lefts = _positions(spec, memory.batch_size)
    grids, masks = [], []
    for grid, mask, f, stride in zip(memory.grids, memory.occupancy, feats.levels(), STRIDES):
        if f.shape[1] != grid.shape[1]:
            raise ValueError(f"feature depth {f.shape[1]} does not match memory depth {grid.shape[1]}")
        g, m = _place(grid, mask, f.to(grid.dtype), tops // stride, lefts // stride)
        grids.append(g)
        masks.append(m)
    return MemoryState(*grids, occupancy=tuple(masks))


def occupancy_fraction(memory: MemoryState) -> list[torch.Tensor]:
    """Fraction of written cells per level, one value per batch sample."""
    return [m.flatten(1).float().mean(dim=1) for m in memory.occupancy]


def reset(memory: MemoryState) -> MemoryState:
    return MemoryState(*(torch.zeros_like(g) for g in memory.grids),
                       occupancy=tuple(torch.zeros_like(m) for m in memory.occupancy))

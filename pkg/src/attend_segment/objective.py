"""Certainty-weighted cumulative losses.

Every step adds, for each of the local, global and final streams,

    mean over pixels of  C_t * e_t + exp(-C_t)

to that stream's running total, where ``e_t`` is the per-pixel binary
cross-entropy of the stream's segmentation and ``C_t`` the certainty map of the
same step.  The training objective is the sum of the three running totals.
For a fixed error ``e`` the per-pixel term is minimised at ``C = -ln(e)``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn.functional as F

EPS = 1e-7
STREAMS = ("local", "global", "final")


def one_hot(labels: torch.Tensor, num_classes: int, dtype=torch.float32) -> torch.Tensor:
    """``B x H x W`` integer labels to a ``B x K x H x W`` one-hot tensor."""
    return F.one_hot(labels.long(), num_classes).permute(0, 3, 1, 2).to(dtype)


def bce_error_map(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Per-pixel binary cross-entropy averaged over the class channel (dim 1)."""
    if pred.shape != target.shape:
        raise ValueError(f"prediction {tuple(pred.shape)} and target {tuple(target.shape)} differ")
    p = pred.clamp(EPS, 1 - EPS)
    bce = -(target * torch.log(p) + (1 - target) * torch.log1p(-p))
    return bce.mean(dim=1, keepdim=True)


@dataclass
class ErrorMaps:
    local: torch.Tensor
    global_: torch.Tensor
    final: torch.Tensor

    @classmethod
    def from_outputs(cls, outputs, target: torch.Tensor) -> "ErrorMaps":
        return cls(bce_error_map(outputs.local_seg, target),
                   bce_error_map(outputs.global_seg, target),
                   bce_error_map(outputs.final_seg, target))

    def streams(self):
        return self.local, self.global_, self.final


@dataclass
class LossState:
    """Running totals, one value per rollout in the batch."""

    cum_local: torch.Tensor
    cum_global: torch.Tensor
    cum_final: torch.Tensor

    @classmethod
    def zero(cls, batch: int = 1, dtype=torch.float32) -> "LossState":
        z = torch.zeros(batch, dtype=dtype)
        return cls(z, z.clone(), z.clone())

    @property
    def total(self) -> torch.Tensor:
        return self.cum_local + self.cum_global + self.cum_final

    def streams(self):
        return self.cum_local, self.cum_global, self.cum_final


def certainty_weighted(error: torch.Tensor, certainty: torch.Tensor) -> torch.Tensor:
    """Spatial mean of ``C * e + exp(-C)``; one value per batch sample."""
    return (certainty * error + torch.exp(-certainty)).flatten(1).mean(dim=1)


def step_contributions(errors: ErrorMaps, certainty: torch.Tensor) -> tuple[torch.Tensor, ...]:
    return tuple(certainty_weighted(e, certainty) for e in errors.streams())


def step_loss(prev: LossState, errors: ErrorMaps, certainty: torch.Tensor) -> LossState:
    local, global_, final = step_contributions(errors, certainty)
    return LossState(prev.cum_local + local, prev.cum_global + global_, prev.cum_final + final)


def rollout_loss(outputs: Sequence, target: torch.Tensor) -> LossState:
    """Fold :func:`step_loss` over the per-step outputs of one rollout batch."""
    if not outputs:
        raise ValueError("a rollout needs at least one step")
    state = LossState.zero(target.shape[0], dtype=target.dtype)
    for out in outputs:
        state = step_loss(state, ErrorMaps.from_outputs(out, target), out.certainty)
    return state


def overview_loss(seg: torch.Tensor, certainty: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Certainty-weighted loss of the overview segmentation, per sample."""
    return certainty_weighted(bce_error_map(seg, target), certainty)

"""Rollouts of the glimpse-only, hybrid and scale-only agents.

A rollout batch runs ``B`` independent scenes in lock-step: at every step each
scene picks its own glimpse location, the glimpse features are written into
that scene's memories, and the networks produce new segmentation and certainty
maps.  The previous segmentation enters the fusion head detached, so gradients
flow through the memories but not across the segmentation recurrence.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch

from . import memory as mem
from .metrics import mean_iou, pixel_accuracy
from .model import ActiveSegmentationNet, StepOutputs
from .objective import (ErrorMaps, LossState, STREAMS, one_hot, overview_loss,
                        step_contributions)
from .policy import GlimpsePolicy
from .retina import GlimpseSpec, RetinaConfig, analytic_pixel_count, extract_glimpses

AGENTS = ("glimpse_only", "hybrid", "scale_only")


class NonFiniteLossError(FloatingPointError):
    pass


@dataclass
class StepRecord:
    t: int
    top: Optional[int]
    left: Optional[int]
    loss_local: Optional[float]
    loss_global: Optional[float]
    loss_final: Optional[float]
    acc: Optional[float]
    budget_px: int

    def to_json(self) -> str:
        return json.dumps(asdict(self))


@dataclass
class RolloutTrace:
    steps: list[StepRecord] = field(default_factory=list)
    final_seg: Optional[np.ndarray] = None  # H x W x K
    final_certainty: Optional[np.ndarray] = None  # H x W x 1
    outputs: list = field(default_factory=list)  # per-step H x W x * maps when kept

    @property
    def locations(self) -> list[tuple[int, int]]:
        return [(s.top, s.left) for s in self.steps if s.top is not None]

    @property
    def accuracy_curve(self) -> list[float]:
        return [s.acc for s in self.steps]

    def to_jsonl(self) -> str:
        return "".join(s.to_json() + "\n" for s in self.steps)

    @staticmethod
    def read_jsonl(text: str) -> list[dict]:
        return [json.loads(line) for line in text.splitlines() if line.strip()]


@dataclass
class RolloutBatch:
    traces: list[RolloutTrace]
    loss: LossState
    objective: torch.Tensor  # per-sample training objective
    overview_loss: Optional[torch.Tensor] = None


def _check_kind(kind: str, num_glimpses: int) -> None:
    if kind not in AGENTS:
        raise ValueError(f"unknown agent {kind!r}; expected one of {AGENTS}")
    if kind == "scale_only" and num_glimpses != 0:
        raise ValueError("scale_only agents take no glimpses; use num_glimpses=0")
    if kind != "scale_only" and num_glimpses < 1:
        raise ValueError(f"{kind} agents need at least one glimpse")


def _to_hwc(t: torch.Tensor) -> np.ndarray:
    return t.detach().cpu().numpy().transpose(0, 2, 3, 1)


def run_rollouts(model: ActiveSegmentationNet, images: np.ndarray, labels: Optional[np.ndarray],
                 kind: str, num_glimpses: int, policy: GlimpsePolicy, retina: RetinaConfig,
                 rngs: Sequence[np.random.Generator],
                 locations: Optional[Sequence[Sequence[tuple[int, int]]]] = None,
                 keep_outputs: bool = False, detach_prev: bool = True) -> RolloutBatch:
    """Run a batch of rollouts.

    Parameters
    ----------
    images : B x H x W x C array in [0, 1]
    labels : B x H x W class ids, or None (no losses or accuracies)
    rngs : one generator per rollout, used by random location draws
    locations : optional per-rollout ``(top, left)`` lists that replace the
        policy (used for replaying traces and gradient checks)
    keep_outputs : store every step's maps in the traces
    detach_prev : feed the previous segmentation to the fusion head as a
        constant; ``False`` backpropagates through it across steps
    """
    _check_kind(kind, num_glimpses)
    dtype = model.dtype
    b, h, w, _ = images.shape
    k = model.config.num_classes
    images = np.asarray(images, dtype=np.float64 if dtype == torch.float64 else np.float32)
    x = torch.from_numpy(np.ascontiguousarray(images.transpose(0, 3, 1, 2)))
    target = one_hot(torch.from_numpy(np.asarray(labels)), k, dtype) if labels is not None else None
    traces = [RolloutTrace() for _ in range(b)]
    loss = LossState.zero(b, dtype)
    budget = 0
    ov_loss = None

    if kind == "glimpse_only":
        prev_seg = torch.zeros(b, k, h, w, dtype=dtype)
        certainty = None
    else:
        prev_seg, ov_certainty, charge = model.overview_segment(x)
        budget += charge
        certainty = ov_certainty.detach().numpy()[:, 0]
        if target is not None:
            ov_loss = overview_loss(prev_seg, ov_certainty, target)
        if kind == "scale_only":
            seg = _to_hwc(prev_seg)
            for i, tr in enumerate(traces):
                acc = pixel_accuracy(seg[i], labels[i]) if labels is not None else None
                lo = float(ov_loss[i].detach()) if ov_loss is not None else None
                tr.steps.append(StepRecord(0, None, None, None, None, lo, acc, budget))
                tr.final_seg = seg[i]
                tr.final_certainty = _to_hwc(ov_certainty)[i]
            objective = ov_loss if ov_loss is not None else torch.zeros(b, dtype=dtype)
            return RolloutBatch(traces, loss, objective, ov_loss)

    memory = model.empty_memory(b)
    current: list[Optional[GlimpseSpec]] = [None] * b
    per_glimpse = analytic_pixel_count(retina)
    out = None
    for t in range(1, num_glimpses + 1):
        specs = []
        for i in range(b):
            if locations is not None:
                top, left = locations[i][t - 1]
                spec = GlimpseSpec(int(top), int(left), retina)
            else:
                c_i = None if certainty is None else certainty[i]
                spec = policy.select(c_i, current[i], rngs[i], h, w, retina)
            specs.append(spec)
        current = specs
        glimpses = extract_glimpses(images, specs)
        feats = model.encode(torch.from_numpy(np.ascontiguousarray(glimpses.transpose(0, 3, 1, 2))))
        memory = mem.write(memory, feats, specs)
        out = model.step(memory, prev_seg.detach() if detach_prev else prev_seg)
        budget += per_glimpse
        certainty = out.certainty.detach().numpy()[:, 0]

        contrib = None
        if target is not None:
            contrib = step_contributions(ErrorMaps.from_outputs(out, target), out.certainty)
            for stream, c in zip(STREAMS, contrib):
                if not torch.isfinite(c).all():
                    raise NonFiniteLossError(f"non-finite {stream} loss at step {t}")
            loss = LossState(*(cum + c for cum, c in zip(loss.streams(), contrib)))

        seg = _to_hwc(out.final_seg)
        kept = _step_maps(out) if keep_outputs else None
        for i, tr in enumerate(traces):
            acc = pixel_accuracy(seg[i], labels[i]) if labels is not None else None
            vals = [float(c[i].detach()) for c in contrib] if contrib is not None else [None] * 3
            tr.steps.append(StepRecord(t, specs[i].top, specs[i].left, *vals, acc, budget))
            if kept is not None:
                tr.outputs.append({name: m[i] for name, m in kept.items()})
        prev_seg = out.final_seg

    seg, cert = _to_hwc(out.final_seg), _to_hwc(out.certainty)
    for i, tr in enumerate(traces):
        tr.final_seg, tr.final_certainty = seg[i], cert[i]
    objective = loss.total if ov_loss is None else loss.total + ov_loss
    return RolloutBatch(traces, loss, objective, ov_loss)


def _step_maps(out: StepOutputs) -> dict[str, np.ndarray]:
    return {
        "local": _to_hwc(out.local_seg),
        "global": _to_hwc(out.global_seg),
        "final": _to_hwc(out.final_seg),
        "certainty": _to_hwc(out.certainty),
        "uncertainty": _to_hwc(out.uncertainty),
    }


def rollout(model: ActiveSegmentationNet, image: np.ndarray, label: Optional[np.ndarray],
            kind: str = "glimpse_only", num_glimpses: int = 10,
            policy: Optional[GlimpsePolicy] = None, retina: Optional[RetinaConfig] = None,
            seed: int = 0, locations=None, keep_outputs: bool = False) -> RolloutTrace:
    """Single-scene rollout; ``seed`` drives the random location draws."""
    policy = policy or GlimpsePolicy()
    retina = retina or RetinaConfig()
    with torch.no_grad():
        batch = run_rollouts(model, image[None], None if label is None else label[None], kind,
                             num_glimpses, policy, retina, [np.random.default_rng(seed)],
                             locations=None if locations is None else [locations],
                             keep_outputs=keep_outputs)
    return batch.traces[0]


def batch_rollout(model: ActiveSegmentationNet, samples: Sequence, kind: str, num_glimpses: int,
                  policy: GlimpsePolicy, retina: RetinaConfig, seed: int = 0,
                  batch_size: int = 8) -> dict:
    """Evaluate a dataset slice; metrics are averaged per image.

    Rollout ``i`` draws its random locations from ``default_rng([seed, i])``
    so results do not depend on ``batch_size``'s effect on generator state.
    """
    if not samples:
        raise ValueError("batch_rollout needs at least one sample")
    k = model.config.num_classes
    curves, finals, ious = [], [], []
    was_training = model.training
    model.eval()
    with torch.no_grad():
        for start in range(0, len(samples), batch_size):
            chunk = samples[start:start + batch_size]
            images = np.stack([s.image for s in chunk])
            labels = np.stack([s.label for s in chunk])
            rngs = [np.random.default_rng([seed, start + j]) for j in range(len(chunk))]
            res = run_rollouts(model, images, labels, kind, num_glimpses, policy, retina, rngs)
            for tr, lab in zip(res.traces, labels):
                curves.append(tr.accuracy_curve)
                finals.append(tr.steps[-1].acc)
                ious.append(mean_iou(tr.final_seg, lab, k)[0])
    model.train(was_training)
    with warnings.catch_warnings():
        # classes never present in the slice stay nan
        warnings.simplefilter("ignore", RuntimeWarning)
        per_class = np.nanmean(np.array(ious, dtype=np.float64), axis=0)
    present = ~np.isnan(per_class)
    return {
        "num_images": len(samples),
        "accuracy_curve": [float(v) for v in np.mean(np.array(curves), axis=0)],
        "final_accuracy": float(np.mean(finals)),
        "per_class_iou": [None if np.isnan(v) else float(v) for v in per_class],
        "mean_iou": float(per_class[present].mean()) if present.any() else None,
    }

"""Scene data: a synthetic road-scene generator and an image/label folder loader."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

log = logging.getLogger(__name__)

# sky, flat, construction, nature, vehicle, human, object
CLASS_COLORS = np.array([
    [0.55, 0.75, 0.95],
    [0.45, 0.45, 0.48],
    [0.70, 0.45, 0.35],
    [0.25, 0.60, 0.25],
    [0.15, 0.20, 0.65],
    [0.90, 0.20, 0.30],
    [0.95, 0.85, 0.20],
])
OBJECT_KINDS = ("construction", "nature", "vehicle", "human", "object")


class DatasetError(ValueError):
    pass


@dataclass
class Sample:
    image: np.ndarray  # H x W x 3 float32 in [0, 1]
    label: np.ndarray  # H x W int64 class ids

    def __post_init__(self):
        if self.image.shape[:2] != self.label.shape:
            raise DatasetError(f"image {self.image.shape} and label {self.label.shape} differ")


@dataclass(frozen=True)
class SyntheticSceneConfig:
    num_classes: int = 7
    height: int = 128
    width: int = 256
    seed: int = 0
    density: float = 1.0

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("num_classes must be at least 2")


def class_color(k: int) -> np.ndarray:
    if k < len(CLASS_COLORS):
        return CLASS_COLORS[k]
    return np.random.default_rng(k).uniform(0.1, 0.9, 3)


def _rect(label, image, color, k, top, bottom, left, right):
    label[top:bottom, left:right] = k
    image[top:bottom, left:right] = color


def _ellipse(label, image, color, k, cy, cx, ry, rx):
    h, w = label.shape
    yy, xx = np.ogrid[:h, :w]
    mask = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
    label[mask] = k
    image[mask] = color


def _place_object(rng, label, image, k, horizon):
    h, w = label.shape
    kind = OBJECT_KINDS[(k - 2) % len(OBJECT_KINDS)]
    color = np.clip(class_color(k) + rng.uniform(-0.06, 0.06, 3), 0, 1)
    if kind == "construction":
        # blocks standing on the horizon, mostly towards the sides
        bw = int(rng.uniform(0.12, 0.3) * w)
        bh = int(rng.uniform(0.25, 0.8) * horizon) + 1
        side = rng.random() < 0.5
        left = int(rng.uniform(0, 0.35) * w) if side else int(rng.uniform(0.5, 1.0) * w) - bw
        left = max(left, 0)
        _rect(label, image, color, k, horizon - bh, horizon + h // 32, left, left + bw)
    elif kind == "nature":
        cx = rng.uniform(0, w)
        _ellipse(label, image, color, k, horizon - rng.uniform(0.05, 0.2) * h, cx,
                 rng.uniform(0.06, 0.16) * h, rng.uniform(0.06, 0.14) * w)
    elif kind == "vehicle":
        vw = int(rng.uniform(0.08, 0.16) * w)
        vh = max(int(vw * rng.uniform(0.35, 0.6)), 2)
        top = horizon + int(rng.uniform(0.02, 0.25) * (h - horizon))
        left = int(rng.uniform(0, w - vw))
        _rect(label, image, color, k, top, min(top + vh, h), left, left + vw)
    elif kind == "human":
        pw = max(int(0.025 * w), 2)
        ph = int(rng.uniform(0.12, 0.22) * h)
        left = int(rng.choice([rng.uniform(0, 0.25), rng.uniform(0.75, 1.0)]) * (w - pw))
        top = horizon + int(rng.uniform(0.0, 0.2) * (h - horizon)) - ph // 2
        _rect(label, image, color, k, max(top, 0), min(top + ph, h), left, left + pw)
    else:
        pw = max(int(0.015 * w), 2)
        ph = int(rng.uniform(0.2, 0.4) * h)
        left = int(rng.uniform(0, w - pw))
        _rect(label, image, color, k, max(horizon - ph, 0), horizon + h // 16, left, left + pw)


def generate_scene(config: SyntheticSceneConfig, index: int) -> Sample:
    """Deterministic synthetic road scene for ``(config.seed, index)``.

    Sky above a random horizon, flat ground below it, and objects of the
    remaining classes placed with class-specific position priors.
    """
    rng = np.random.default_rng([config.seed, index])
    h, w, k = config.height, config.width, config.num_classes
    horizon = int(rng.uniform(0.35, 0.6) * h)
    label = np.empty((h, w), dtype=np.int64)
    image = np.empty((h, w, 3), dtype=np.float64)
    jitter = rng.uniform(-0.05, 0.05, 3)
    label[:horizon], image[:horizon] = 0, class_color(0) + jitter
    label[horizon:], image[horizon:] = 1 % k, class_color(1 % k) + jitter
    if k > 2:
        for cls in range(2, k):
            for _ in range(rng.poisson(config.density * 1.5)):
                _place_object(rng, label, image, cls, horizon)
    image += rng.normal(0.0, 0.03, image.shape)
    return Sample(np.clip(image, 0.0, 1.0).astype(np.float32), label)


def generate_dataset(config: SyntheticSceneConfig, count: int, start: int = 0) -> list[Sample]:
    return [generate_scene(config, i) for i in range(start, start + count)]


def _resize_image(img: Image.Image, size, resample) -> Image.Image:
    h, w = size
    return img if img.size == (w, h) else img.resize((w, h), resample=resample)


def load_folder(images_dir, labels_dir, resize_to, num_classes: int) -> list[Sample]:
    """Load ``images/<stem>.png`` / ``labels/<stem>.png`` pairs in stem order."""
    images_dir, labels_dir = Path(images_dir), Path(labels_dir)
    image_files = {p.stem: p for p in sorted(images_dir.glob("*.png"))}
    label_files = {p.stem: p for p in sorted(labels_dir.glob("*.png"))}
    for stem in sorted(set(image_files) ^ set(label_files)):
        where = "labels" if stem in image_files else "images"
        raise DatasetError(f"no matching file in {where} for stem {stem!r}")
    samples = []
    for stem in sorted(image_files):
        img = _resize_image(Image.open(image_files[stem]).convert("RGB"), resize_to,
                            Image.BILINEAR)
        lab = Image.open(label_files[stem])
        if lab.mode not in ("L", "P", "I", "I;16"):
            raise DatasetError(f"label {stem!r} must be single-channel, got mode {lab.mode}")
        lab = _resize_image(lab, resize_to, Image.NEAREST)
        label = np.asarray(lab, dtype=np.int64)
        if label.size and label.max() >= num_classes:
            raise DatasetError(f"label {stem!r} has class {label.max()} >= {num_classes}")
        samples.append(Sample(np.asarray(img, dtype=np.float32) / 255.0, label))
    log.info("loaded %d samples from %s", len(samples), images_dir)
    return samples


def split(dataset: Sequence, val_fraction: float, seed: int):
    """Seeded shuffle, then the last ``round(n * val_fraction)`` go to validation."""
    if not 0 < val_fraction < 1:
        raise ValueError("val_fraction must lie strictly between 0 and 1")
    n = len(dataset)
    order = np.random.default_rng(seed).permutation(n)
    n_val = int(round(n * val_fraction))
    train = [dataset[i] for i in sorted(order[:n - n_val])]
    val = [dataset[i] for i in sorted(order[n - n_val:])]
    return train, val


def stack(samples: Sequence[Sample]) -> tuple[np.ndarray, np.ndarray]:
    return np.stack([s.image for s in samples]), np.stack([s.label for s in samples])

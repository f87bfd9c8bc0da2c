"""Per-step panel images of a rollout.

Each panel stacks, top to bottom: the input with glimpse boxes, the local,
global and final segmentations (color-coded argmax) and the uncertainty map in
grayscale.  The current glimpse is outlined in red, earlier ones in yellow.
"""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

PANEL_ROWS = ("input", "local", "global", "final", "uncertainty")
CURRENT_BOX = (255, 0, 0)
PAST_BOX = (255, 255, 0)

PALETTE = np.array([
    (70, 130, 180),   # sky
    (128, 64, 128),   # flat
    (70, 70, 70),     # construction
    (107, 142, 35),   # nature
    (0, 0, 142),      # vehicle
    (220, 20, 60),    # human
    (220, 220, 0),    # object
    (244, 35, 232),
    (152, 251, 152),
    (250, 170, 30),
    (0, 60, 100),
    (119, 11, 32),
], dtype=np.uint8)


def colorize(seg: np.ndarray) -> np.ndarray:
    """``H x W x K`` scores to an ``H x W x 3`` uint8 image of argmax classes."""
    labels = np.asarray(seg).argmax(axis=-1)
    return PALETTE[labels % len(PALETTE)]


def grayscale(values: np.ndarray) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)[..., 0]
    top = v.max()
    scaled = v / top if top > 0 else v
    g = np.round(np.clip(scaled, 0, 1) * 255).astype(np.uint8)
    return np.repeat(g[..., None], 3, axis=-1)


def draw_box(canvas: np.ndarray, top: int, left: int, size: int, color) -> None:
    h, w, _ = canvas.shape
    bottom, right = min(top + size, h) - 1, min(left + size, w) - 1
    canvas[top, left:right + 1] = color
    canvas[bottom, left:right + 1] = color
    canvas[top:bottom + 1, left] = color
    canvas[top:bottom + 1, right] = color


def step_panel(image: np.ndarray, maps: dict, boxes: Sequence[tuple[int, int]],
               glimpse_size: int) -> np.ndarray:
    """One step's panel, ``len(PANEL_ROWS) * H`` by ``W``."""
    base = np.round(np.clip(image[..., :3], 0, 1) * 255).astype(np.uint8).copy()
    for i, (top, left) in enumerate(boxes):
        draw_box(base, top, left, glimpse_size, CURRENT_BOX if i == len(boxes) - 1 else PAST_BOX)
    rows = [base, colorize(maps["local"]), colorize(maps["global"]), colorize(maps["final"]),
            grayscale(maps["uncertainty"])]
    return np.concatenate(rows, axis=0)


def render_trace(image: np.ndarray, trace, glimpse_size: int, out_dir) -> list[Path]:
    """Write ``step_XX.png`` for each step of a trace run with kept outputs."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    locations = trace.locations
    for t, maps in enumerate(trace.outputs, 1):
        panel = step_panel(image, maps, locations[:t], glimpse_size)
        path = out_dir / f"step_{t:02d}.png"
        Image.fromarray(panel).save(path)
        paths.append(path)
    return paths

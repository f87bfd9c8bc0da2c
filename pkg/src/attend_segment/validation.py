"""Input checks shared by the estimator and the CLI."""
from __future__ import annotations

from typing import Optional

import numpy as np


def check_images(X, *, allow_single: bool = False) -> np.ndarray:
    """Return ``X`` as a float32 ``n x H x W x C`` array in [0, 1].

    uint8 input is scaled by 1/255.  A single ``H x W x C`` image is promoted to
    a batch of one when ``allow_single`` is set.
    """
    X = np.asarray(X)
    if X.ndim == 3 and allow_single:
        X = X[None]
    if X.ndim != 4:
        raise ValueError(f"expected images shaped (n, H, W, C), got {X.shape}")
    if X.shape[0] == 0:
        raise ValueError("got an empty batch of images")
    h, w = X.shape[1:3]
    if h % 16 or w % 16:
        raise ValueError(f"image size {h}x{w} must be divisible by 16")
    if X.dtype == np.uint8:
        X = X.astype(np.float32) / 255.0
    X = X.astype(np.float32, copy=False)
    if not np.isfinite(X).all():
        raise ValueError("images contain NaN or infinite values")
    if X.min() < 0 or X.max() > 1:
        raise ValueError("image values must lie in [0, 1]")
    return X


def check_labels(y, X: np.ndarray, num_classes: Optional[int] = None) -> np.ndarray:
    y = np.asarray(y)
    if y.shape != X.shape[:3]:
        raise ValueError(f"labels {y.shape} do not match images {X.shape[:3]}")
    if not np.issubdtype(y.dtype, np.integer):
        if not np.all(np.mod(y, 1) == 0):
            raise ValueError("labels must be integer class ids")
    y = y.astype(np.int64)
    if y.min() < 0:
        raise ValueError("labels must be non-negative")
    if num_classes is not None and y.max() >= num_classes:
        raise ValueError(f"label {y.max()} out of range for {num_classes} classes")
    return y

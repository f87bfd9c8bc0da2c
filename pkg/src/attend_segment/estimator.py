"""scikit-learn style wrapper around the agent.

>>> seg = ActiveSegmenter(num_glimpses=5, glimpse_size=24, epochs=10)
>>> seg.fit(images, labels)           # images: n x H x W x 3, labels: n x H x W
>>> seg.predict(images)               # n x H x W class ids
>>> seg.score(images, labels)         # mean per-image pixel accuracy
"""
from __future__ import annotations

from typing import Optional

import numpy as np
import torch
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .agent import rollout, run_rollouts
from .data import Sample, split
from .model import ActiveSegmentationNet
from .train import TrainConfig, fit, seed_everything
from .validation import check_images, check_labels


class ActiveSegmenter(BaseEstimator):
    """Segments whole scenes from a handful of retina glimpses.

    Parameters mirror the run configuration of :mod:`attend_segment.train`.
    ``num_classes=None`` infers the class count from the training labels.
    ``val_fraction=0`` trains on everything and keeps the last epoch;
    otherwise the best epoch on a held-out split is kept.
    """

    def __init__(self, num_classes: Optional[int] = None, glimpse_size: int = 48,
                 retina_scales: int = 3, num_glimpses: int = 10, agent: str = "glimpse_only",
                 policy: str = "uncertainty", horizon_band: float = 1 / 3,
                 restricted_radius_px: float = 48.0, overview_size: int = 32, lr: float = 1e-3,
                 batch_size: int = 8, epochs: int = 10, val_fraction: float = 0.0,
                 seed: int = 0):
        self.num_classes = num_classes
        self.glimpse_size = glimpse_size
        self.retina_scales = retina_scales
        self.num_glimpses = num_glimpses
        self.agent = agent
        self.policy = policy
        self.horizon_band = horizon_band
        self.restricted_radius_px = restricted_radius_px
        self.overview_size = overview_size
        self.lr = lr
        self.batch_size = batch_size
        self.epochs = epochs
        self.val_fraction = val_fraction
        self.seed = seed

    def _config(self, height: int, width: int, num_classes: int) -> TrainConfig:
        return TrainConfig(
            num_classes=num_classes, image_height=height, image_width=width,
            glimpse_size=self.glimpse_size, retina_scales=self.retina_scales,
            num_glimpses=self.num_glimpses, agent=self.agent, policy=self.policy,
            horizon_band=self.horizon_band, restricted_radius_px=self.restricted_radius_px,
            overview_size=self.overview_size, lr=self.lr, batch_size=self.batch_size,
            epochs=self.epochs, seed=self.seed, val_fraction=self.val_fraction or 0.2,
        )

    def fit(self, X, y):
        X = check_images(X)
        y = check_labels(y, X, self.num_classes)
        k = self.num_classes or max(int(y.max()) + 1, 2)
        config = self._config(X.shape[1], X.shape[2], k)
        seed_everything(self.seed)
        samples = [Sample(img, lab) for img, lab in zip(X, y)]
        if self.val_fraction:
            train_set, val_set = split(samples, self.val_fraction, self.seed)
        else:
            train_set, val_set = samples, []
        model = ActiveSegmentationNet(config.model_config())
        self.history_ = fit(model, config, train_set, val_set)
        self.model_ = model
        self.config_ = config
        self.classes_ = np.arange(k)
        return self

    def _run(self, X):
        check_is_fitted(self, "model_")
        X = check_images(X)
        cfg = self.config_
        if X.shape[1:3] != (cfg.image_height, cfg.image_width):
            raise ValueError(f"estimator was fitted on {cfg.image_height}x{cfg.image_width} "
                             f"images, got {X.shape[1]}x{X.shape[2]}")
        return X, cfg

    def predict_proba(self, X) -> np.ndarray:
        """Per-class scores of the final segmentation, ``n x H x W x K``."""
        X, cfg = self._run(X)
        out = []
        self.model_.eval()
        with torch.no_grad():
            for start in range(0, len(X), cfg.batch_size):
                chunk = X[start:start + cfg.batch_size]
                rngs = [np.random.default_rng([cfg.seed, start + j]) for j in range(len(chunk))]
                res = run_rollouts(self.model_, chunk, None, cfg.agent, cfg.steps,
                                   cfg.glimpse_policy, cfg.retina, rngs)
                out.extend(tr.final_seg for tr in res.traces)
        return np.stack(out)

    def predict(self, X) -> np.ndarray:
        return self.predict_proba(X).argmax(axis=-1)

    def score(self, X, y) -> float:
        """Mean per-image pixel accuracy."""
        pred = self.predict(X)
        y = check_labels(y, check_images(X))
        return float(np.mean([(p == t).mean() for p, t in zip(pred, y)]))

    def rollout(self, image, label=None, seed: int = 0, keep_outputs: bool = False):
        """Trace of a single rollout (locations, per-step losses and accuracy)."""
        X, cfg = self._run(np.asarray(image)[None])
        return rollout(self.model_, X[0], label, cfg.agent, cfg.steps, cfg.glimpse_policy,
                       cfg.retina, seed=seed, keep_outputs=keep_outputs)

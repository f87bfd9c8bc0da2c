"""Training loop, run configuration and checkpoint files.

Config files are flat ``key = value`` text; ``#`` starts a comment.
Checkpoints are ``.npz`` archives holding one array per network parameter and
a ``__meta__`` entry with JSON (format version, model and run configuration).
"""
from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .agent import NonFiniteLossError, batch_rollout, run_rollouts
from .data import SyntheticSceneConfig, generate_dataset, load_folder, split
from .model import ActiveSegmentationNet, ModelConfig
from .policy import GlimpsePolicy
from .retina import RetinaConfig, budget_ratio

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


class ConfigError(ValueError):
    pass


class CheckpointMismatchError(ValueError):
    pass


@dataclass
class TrainConfig:
    dataset: str = "synthetic"
    data_dir: str = ""
    num_classes: int = 7
    image_height: int = 128
    image_width: int = 256
    glimpse_size: int = 48
    retina_scales: int = 3
    num_glimpses: int = 10
    agent: str = "glimpse_only"
    policy: str = "uncertainty"
    horizon_band: float = 1 / 3
    restricted_radius_px: float = 48.0
    overview_size: int = 32
    lr: float = 1e-3
    batch_size: int = 8
    epochs: int = 10
    seed: int = 0
    num_samples: int = 200
    val_fraction: float = 0.2
    density: float = 1.0
    out_dir: str = "runs/default"

    def __post_init__(self):
        for f in fields(self):
            value = getattr(self, f.name)
            try:
                setattr(self, f.name, _coerce(f.type, value))
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"bad value for {f.name}: {value!r}") from exc
        if self.dataset not in ("synthetic", "folder"):
            raise ConfigError(f"dataset must be 'synthetic' or 'folder', got {self.dataset!r}")
        if self.agent not in ("glimpse_only", "hybrid", "scale_only"):
            raise ConfigError(f"unknown agent {self.agent!r}")
        if self.policy not in ("uncertainty", "random", "horizon", "restricted"):
            raise ConfigError(f"unknown policy {self.policy!r}")

    @property
    def retina(self) -> RetinaConfig:
        return RetinaConfig(num_scales=self.retina_scales, glimpse_size=self.glimpse_size)

    @property
    def glimpse_policy(self) -> GlimpsePolicy:
        return GlimpsePolicy(self.policy, self.horizon_band, self.restricted_radius_px)

    @property
    def steps(self) -> int:
        return 0 if self.agent == "scale_only" else self.num_glimpses

    def model_config(self) -> ModelConfig:
        return ModelConfig(num_classes=self.num_classes, image_height=self.image_height,
                           image_width=self.image_width,
                           overview_size=self.overview_size if self.agent != "glimpse_only" else 0)

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_text(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in self.to_dict().items())


def _coerce(type_name, value):
    kind = {"int": int, "float": float, "str": str}[type_name if isinstance(type_name, str)
                                                      else type_name.__name__]
    if kind is int and isinstance(value, str):
        value = value.strip()
        as_float = float(value)
        if not as_float.is_integer():
            raise ValueError(value)
        return int(as_float)
    if kind is int and isinstance(value, float):
        if not value.is_integer():
            raise ValueError(value)
    return kind(value.strip() if isinstance(value, str) else value)


def parse_config_text(text: str) -> dict:
    values = {}
    known = {f.name for f in fields(TrainConfig)}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in known:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[key] = value
    return values


def load_config(path=None, **overrides) -> TrainConfig:
    values = parse_config_text(Path(path).read_text()) if path else {}
    values.update({k: v for k, v in overrides.items() if v is not None})
    return TrainConfig(**values)


def seed_everything(seed: int) -> None:
    torch.manual_seed(seed)
    np.random.seed(seed % 2 ** 32)


def build_datasets(config: TrainConfig):
    if config.dataset == "synthetic":
        scenes = SyntheticSceneConfig(config.num_classes, config.image_height, config.image_width,
                                      config.seed, config.density)
        samples = generate_dataset(scenes, config.num_samples)
    else:
        root = Path(config.data_dir)
        if not root.is_dir():
            raise ConfigError(f"dataset directory {root} does not exist")
        samples = load_folder(root / "images", root / "labels",
                              (config.image_height, config.image_width), config.num_classes)
    if not samples:
        raise ConfigError("dataset is empty")
    return split(samples, config.val_fraction, config.seed)


def build_model(config: TrainConfig) -> ActiveSegmentationNet:
    torch.manual_seed(config.seed)
    return ActiveSegmentationNet(config.model_config())


# -- checkpoints ---------------------------------------------------------------

def save_checkpoint(path, model: ActiveSegmentationNet, config: Optional[TrainConfig] = None,
                    extra: Optional[dict] = None) -> None:
    meta = {
        "format_version": CHECKPOINT_VERSION,
        "model": model.config.to_dict(),
        "run": config.to_dict() if config is not None else None,
        "extra": extra or {},
    }
    arrays = {name: t.detach().cpu().numpy() for name, t in model.state_dict().items()}
    arrays["__meta__"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path):
    """Return ``(model, run_config_or_None, meta)``."""
    with np.load(path, allow_pickle=False) as archive:
        if "__meta__" not in archive.files:
            raise CheckpointMismatchError(f"{path} has no metadata entry")
        meta = json.loads(archive["__meta__"].tobytes().decode())
        version = meta.get("format_version")
        if version != CHECKPOINT_VERSION:
            raise CheckpointMismatchError(
                f"checkpoint format version {version}, expected {CHECKPOINT_VERSION}")
        model = ActiveSegmentationNet(ModelConfig(**meta["model"]))
        state = model.state_dict()
        missing = set(state) - set(archive.files)
        if missing:
            raise CheckpointMismatchError(f"checkpoint lacks parameters {sorted(missing)}")
        for name, tensor in state.items():
            array = archive[name]
            if tuple(array.shape) != tuple(tensor.shape):
                raise CheckpointMismatchError(
                    f"parameter {name} has shape {array.shape}, expected {tuple(tensor.shape)}")
            tensor.copy_(torch.from_numpy(array))
    run = TrainConfig(**meta["run"]) if meta.get("run") else None
    return model, run, meta


def check_compatible(model: ActiveSegmentationNet, config: TrainConfig) -> None:
    expected = config.model_config()
    have = model.config
    for name in ("num_classes", "image_height", "image_width"):
        if getattr(have, name) != getattr(expected, name):
            raise CheckpointMismatchError(
                f"checkpoint {name}={getattr(have, name)} but config asks for "
                f"{getattr(expected, name)}")
    if config.agent != "glimpse_only" and model.overview is None:
        raise CheckpointMismatchError(f"checkpoint has no overview network for a {config.agent} agent")


# -- training ------------------------------------------------------------------

def validate(model, samples, config: TrainConfig, policy: Optional[str] = None,
             num_glimpses: Optional[int] = None, agent: Optional[str] = None,
             seed: Optional[int] = None) -> dict:
    agent = agent or config.agent
    steps = 0 if agent == "scale_only" else (num_glimpses or config.num_glimpses)
    pol = GlimpsePolicy(policy or config.policy, config.horizon_band, config.restricted_radius_px)
    return batch_rollout(model, samples, agent, steps, pol, config.retina,
                         seed=config.seed if seed is None else seed,
                         batch_size=config.batch_size)


def fit(model: ActiveSegmentationNet, config: TrainConfig, train_set: Sequence,
        val_set: Sequence = (), checkpoint_path=None) -> dict:
    """Optimise ``model`` in place; returns the training history.

    With a validation set, the best epoch by validation accuracy is written to
    ``checkpoint_path`` (when given) and its weights are restored at the end.
    """
    if not train_set:
        raise ConfigError("training set is empty")
    optimizer = torch.optim.Adam(model.parameters(), lr=config.lr)
    rng = np.random.default_rng([config.seed, 1])
    policy, retina = config.glimpse_policy, config.retina
    history = {"epochs": [], "best_epoch": None, "best_val_accuracy": None}
    best_state = None
    for epoch in range(1, config.epochs + 1):
        model.train()
        order = rng.permutation(len(train_set))
        total, count = 0.0, 0
        for start in range(0, len(order), config.batch_size):
            chunk = [train_set[i] for i in order[start:start + config.batch_size]]
            images = np.stack([s.image for s in chunk])
            labels = np.stack([s.label for s in chunk])
            rngs = [np.random.default_rng(rng.integers(2 ** 63)) for _ in chunk]
            result = run_rollouts(model, images, labels, config.agent, config.steps, policy,
                                  retina, rngs)
            loss = result.objective.mean()
            if not torch.isfinite(loss):
                raise NonFiniteLossError(f"non-finite training objective in epoch {epoch}")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            total += loss.item() * len(chunk)
            count += len(chunk)
        record = {"epoch": epoch, "train_loss": total / count}
        if val_set:
            report = validate(model, val_set, config)
            record["val_accuracy"] = report["final_accuracy"]
            record["val_curve"] = report["accuracy_curve"]
            best = history["best_val_accuracy"]
            if best is None or report["final_accuracy"] > best:
                history["best_epoch"] = epoch
                history["best_val_accuracy"] = report["final_accuracy"]
                best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
                if checkpoint_path is not None:
                    save_checkpoint(checkpoint_path, model, config, {"epoch": epoch})
        history["epochs"].append(record)
        log.info("epoch %d: %s", epoch, record)
    if best_state is not None:
        model.load_state_dict(best_state)
    elif checkpoint_path is not None:
        save_checkpoint(checkpoint_path, model, config, {"epoch": config.epochs})
    return history


def train(config: TrainConfig):
    """Train from a run configuration and persist everything to ``out_dir``.

    Writes ``checkpoint.npz`` (best validation epoch), ``history.json`` and
    ``config.txt`` (the fully resolved configuration).
    """
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(config.to_text())
    seed_everything(config.seed)
    train_set, val_set = build_datasets(config)
    model = build_model(config)
    history = fit(model, config, train_set, val_set, out / "checkpoint.npz")
    (out / "history.json").write_text(json.dumps(history, indent=2, sort_keys=True) + "\n")
    return model, history


def evaluate(checkpoint, config: TrainConfig, num_glimpses: Optional[int] = None,
             policy: Optional[str] = None) -> dict:
    """Metrics of a checkpoint on the validation split described by ``config``."""
    model, _, _ = load_checkpoint(checkpoint) if not isinstance(checkpoint, ActiveSegmentationNet) \
        else (checkpoint, None, None)
    check_compatible(model, config)
    _, val_set = build_datasets(config)
    report = validate(model, val_set, config, policy=policy, num_glimpses=num_glimpses)
    steps = 0 if config.agent == "scale_only" else (num_glimpses or config.num_glimpses)
    retina = config.retina
    report["agent"] = config.agent
    report["policy"] = policy or config.policy
    report["num_glimpses"] = steps
    report["budget_ratio"] = [budget_ratio(retina, n, config.image_height, config.image_width)
                              for n in range(1, steps + 1)]
    if config.agent != "glimpse_only":
        report["overview_ratio"] = 100.0 * config.overview_size ** 2 / (
            config.image_height * config.image_width)
    return report

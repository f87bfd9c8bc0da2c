"""Command-line entry points.

    attend-segment train    --config run.cfg [--epochs 5 ...]
    attend-segment evaluate --config run.cfg --checkpoint ckpt.npz
    attend-segment rollout  --checkpoint ckpt.npz --image x.png --out trace.jsonl
    attend-segment render   --checkpoint ckpt.npz --trace trace.jsonl --image x.png --out-dir panels
    attend-segment budget   [--image-height 128 --image-width 256 --glimpse-size 48]

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np
from PIL import Image

from .agent import RolloutTrace, rollout
from .data import SyntheticSceneConfig, generate_scene
from .policy import POLICIES
from .render import render_trace
from .retina import GlimpseSpec, RetinaConfig, budget_ratio
from .train import (ConfigError, CheckpointMismatchError, TrainConfig, evaluate, load_checkpoint,
                    load_config, train)

log = logging.getLogger("attend_segment")


class CommandError(RuntimeError):
    """Runtime failure reported with exit code 1."""


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="flat key = value config file")
    for f in fields(TrainConfig):
        kind = {"int": int, "float": float, "str": str}[f.type]
        parser.add_argument("--" + f.name.replace("_", "-"), dest=f.name, type=kind, default=None)


def _config_from(args) -> TrainConfig:
    overrides = {f.name: getattr(args, f.name, None) for f in fields(TrainConfig)}
    if args.config and not Path(args.config).is_file():
        raise ConfigError(f"config file {args.config} not found")
    return load_config(args.config, **overrides)


def cmd_train(args) -> int:
    config = _config_from(args)
    _, history = train(config)
    best = history["best_val_accuracy"]
    print(f"trained {config.epochs} epochs; best validation accuracy "
          f"{best if best is None else round(best, 4)}; outputs in {config.out_dir}")
    return 0


def cmd_evaluate(args) -> int:
    config = _config_from(args)
    report = evaluate(args.checkpoint, config, policy=args.eval_policy)
    text = json.dumps(report, indent=2, sort_keys=True)
    if args.report:
        Path(args.report).write_text(text + "\n")
    print(text)
    return 0


def format_budget_table(image_h: int, image_w: int, glimpse_size: int, max_glimpses: int = 10) -> str:
    configs = [RetinaConfig(n, glimpse_size) for n in (1, 2, 3)]
    lines = [f"# Glimpses | Full resolution | 2 Scales | 3 Scales   ({image_h}x{image_w}, "
             f"{glimpse_size}px glimpse)"]
    for n in range(1, max_glimpses + 1):
        cells = " | ".join(f"{budget_ratio(c, n, image_h, image_w):.1f}%" for c in configs)
        lines.append(f"{n} | {cells}")
    return "\n".join(lines)


def cmd_budget(args) -> int:
    print(format_budget_table(args.image_height, args.image_width, args.glimpse_size,
                              args.max_glimpses))
    return 0


def _read_image(path, height: int, width: int) -> np.ndarray:
    try:
        img = Image.open(path).convert("RGB")
    except (OSError, ValueError) as exc:
        raise CommandError(f"cannot read image {path}: {exc}") from exc
    if img.size != (width, height):
        img = img.resize((width, height), Image.BILINEAR)
    return np.asarray(img, dtype=np.float32) / 255.0


def _read_label(path, height: int, width: int) -> np.ndarray:
    try:
        lab = Image.open(path)
    except (OSError, ValueError) as exc:
        raise CommandError(f"cannot read label {path}: {exc}") from exc
    if lab.size != (width, height):
        lab = lab.resize((width, height), Image.NEAREST)
    return np.asarray(lab, dtype=np.int64)


def _scene(args, run: TrainConfig):
    if args.synthetic_index is not None:
        sample = generate_scene(SyntheticSceneConfig(run.num_classes, run.image_height,
                                                     run.image_width, run.seed, run.density),
                                args.synthetic_index)
        return sample.image, sample.label
    if not args.image:
        raise CommandError("give --image or --synthetic-index")
    image = _read_image(args.image, run.image_height, run.image_width)
    label = _read_label(args.label, run.image_height, run.image_width) if args.label else None
    return image, label


def _load_run(args):
    model, run, _ = load_checkpoint(args.checkpoint)
    if run is None:
        c = model.config
        run = TrainConfig(num_classes=c.num_classes, image_height=c.image_height,
                          image_width=c.image_width)
    changes = {k: v for k, v in (("agent", args.agent), ("policy", args.policy),
                                 ("num_glimpses", args.num_glimpses)) if v is not None}
    return model, run.replace(**changes)


def cmd_rollout(args) -> int:
    model, run = _load_run(args)
    image, label = _scene(args, run)
    trace = rollout(model, image, label, run.agent, run.steps, run.glimpse_policy, run.retina,
                    seed=args.seed)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_text(trace.to_jsonl())
    print(f"wrote {len(trace.steps)} steps to {args.out}")
    return 0


def cmd_render(args) -> int:
    model, run = _load_run(args)
    image, label = _scene(args, run)
    try:
        records = RolloutTrace.read_jsonl(Path(args.trace).read_text())
    except (OSError, ValueError) as exc:
        raise CommandError(f"cannot read trace {args.trace}: {exc}") from exc
    glimpses = [r for r in records if r.get("top") is not None]
    if not glimpses:
        raise CommandError("trace has no glimpses to render")
    locations = []
    for expected_t, r in enumerate(glimpses, 1):
        if r.get("t") != expected_t:
            raise CheckpointMismatchError(f"trace step {r.get('t')} out of order")
        try:
            GlimpseSpec(int(r["top"]), int(r["left"]), run.retina).check(run.image_height,
                                                                         run.image_width)
        except ValueError as exc:
            raise CheckpointMismatchError(f"trace does not fit the checkpoint: {exc}") from exc
        locations.append((int(r["top"]), int(r["left"])))
    kind = "glimpse_only" if run.agent == "scale_only" else run.agent
    trace = rollout(model, image, label, kind, len(locations), run.glimpse_policy, run.retina,
                    locations=locations, keep_outputs=True)
    if label is not None:
        for r, step in zip(glimpses, trace.steps):
            if r.get("loss_final") is not None and abs(r["loss_final"] - step.loss_final) > 1e-5:
                raise CheckpointMismatchError(
                    f"step {r['t']}: trace loss {r['loss_final']} but checkpoint replays "
                    f"{step.loss_final}")
    paths = render_trace(image, trace, run.glimpse_size, args.out_dir)
    print(f"wrote {len(paths)} panels to {args.out_dir}")
    return 0


def _add_scene_flags(parser):
    parser.add_argument("--checkpoint", required=True)
    parser.add_argument("--image")
    parser.add_argument("--label")
    parser.add_argument("--synthetic-index", type=int)
    parser.add_argument("--agent", choices=("glimpse_only", "hybrid", "scale_only"))
    parser.add_argument("--policy", choices=POLICIES)
    parser.add_argument("--num-glimpses", type=int)
    parser.add_argument("--seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="attend-segment", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train an agent")
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint on the validation split")
    _add_config_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--eval-policy", choices=POLICIES)
    p.add_argument("--report", help="also write the JSON report here")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("rollout", help="run one rollout and write a JSON-lines trace")
    _add_scene_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_rollout)

    p = sub.add_parser("render", help="render per-step panels for a trace")
    _add_scene_flags(p)
    p.add_argument("--trace", required=True)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("budget", help="print the pixel-budget ratio table")
    p.add_argument("--image-height", type=int, default=128)
    p.add_argument("--image-width", type=int, default=256)
    p.add_argument("--glimpse-size", type=int, default=48)
    p.add_argument("--max-glimpses", type=int, default=10)
    p.set_defaults(func=cmd_budget)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, CheckpointMismatchError, CommandError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

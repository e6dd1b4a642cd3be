"""Command-line entry point: synth, train, eval, gradcheck, predict.

Exit codes: 0 success, 1 usage, 2 data or format problem, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .data import DataFormatError, Sample, SynthConfig, load_dataset, load_samples, synth_generate
from .data.augment import nearest_resize, resize_image
from .data.io import read_image, write_image, write_mask
from .engine import (
    CheckpointFormatError,
    TrainConfig,
    TrainingDiverged,
    desk_config,
    evaluate,
    load_checkpoint,
    predict,
    save_checkpoint,
    train,
    tta_predict,
)
from .losses import ablation_weights

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ----------------------------------------------------------------- configuration
def flatten(tree: dict, prefix: str = "") -> dict:
    flat = {}
    for key, value in tree.items():
        name = f"{prefix}{key}"
        if isinstance(value, dict):
            flat.update(flatten(value, name + "."))
        else:
            flat[name] = value
    return flat


def unflatten(flat: dict) -> dict:
    tree: dict = {}
    for key, value in flat.items():
        node = tree
        *parents, leaf = key.split(".")
        for p in parents:
            node = node.setdefault(p, {})
        node[leaf] = value
    return tree


def _coerce(key: str, value, default):
    if isinstance(value, str) and not isinstance(default, str):
        try:
            value = json.loads(value)
        except json.JSONDecodeError as exc:
            raise UsageError(f"cannot parse value for {key!r}: {value!r}") from exc
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise UsageError(f"{key} expects true/false")
    elif isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, float) and value.is_integer():
            value = int(value)
        if not isinstance(value, int) or isinstance(value, bool):
            raise UsageError(f"{key} expects an integer")
    elif isinstance(default, float):
        if not isinstance(value, (int, float)) or isinstance(value, bool):
            raise UsageError(f"{key} expects a number")
        value = float(value)
    elif isinstance(default, list) and not isinstance(value, list):
        raise UsageError(f"{key} expects a list")
    return value


def effective_config(base: TrainConfig, config_file: str | None, overrides: list[str]) -> dict:
    """Defaults, then the JSON file, then ``key=value`` overrides; unknown keys are rejected."""
    flat = flatten(base.to_dict())
    updates: list[tuple[str, object]] = []
    if config_file:
        try:
            loaded = json.loads(Path(config_file).read_text())
        except FileNotFoundError as exc:
            raise DataFormatError(f"config file not found: {config_file}") from exc
        except json.JSONDecodeError as exc:
            raise DataFormatError(f"config file is not valid JSON: {exc}") from exc
        if not isinstance(loaded, dict):
            raise DataFormatError("config file must hold a JSON object")
        updates.extend(flatten(loaded).items())
    for item in overrides:
        if "=" not in item:
            raise UsageError(f"override {item!r} is not key=value")
        key, value = item.split("=", 1)
        updates.append((key.strip(), value))
    for key, value in updates:
        if key not in flat:
            raise UsageError(f"unknown config key {key!r}")
        flat[key] = _coerce(key, value, flat[key])
    return flat


def build_train_config(flat: dict) -> TrainConfig:
    try:
        return TrainConfig(**unflatten(flat))
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid configuration: {exc}") from exc


def _write_json(path: Path, payload) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _load_split(root: str, input_size: int) -> list[Sample]:
    if not Path(root).is_dir():
        raise DataFormatError(f"dataset directory not found: {root}")
    samples = load_samples(load_dataset(root))
    for s in samples:
        if s.image.shape[:2] != (input_size, input_size):
            raise DataFormatError(
                f"{s.id}: image is {s.image.shape[0]}x{s.image.shape[1]}, model expects {input_size}x{input_size}")
    return samples


# ----------------------------------------------------------------- commands
def cmd_synth(args) -> int:
    cfg = SynthConfig(count=args.count, size=args.size, seed=args.seed,
                      unlabeled_fraction=args.unlabeled_fraction, hair_probability=args.hair_probability)
    root = synth_generate(cfg, args.out)
    print(f"wrote {cfg.count} samples to {root}")
    return EXIT_OK


def cmd_train(args) -> int:
    base = desk_config() if args.preset == "desk" else TrainConfig()
    overrides = list(args.set or [])
    if args.ablation is not None:
        weights = ablation_weights(args.ablation, base.weights)
        overrides = [f"weights.{k}={v}" for k, v in asdict(weights).items()] + overrides
    if args.iters is not None:
        overrides.append(f"total_iters={args.iters}")
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    flat = effective_config(base, args.config, overrides)
    config = build_train_config(flat)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "config.json", flat)
    samples = _load_split(args.data, config.model.input_size)
    val = _load_split(args.val, config.model.input_size) if args.val else None

    def on_eval(step, model):
        _write_json(out / f"metrics_step{step:06d}.json", evaluate(model, val))

    with dc.single_threaded():
        model, optimizer, rows = train(config, samples, log_path=out / "losses.csv",
                                       on_eval=on_eval if val else None)
    ckpt = out / Path(config.checkpoint).name
    save_checkpoint(ckpt, model, optimizer, extra={"seed": config.seed, "train_config": flat})
    if val:
        _write_json(out / "metrics.json", evaluate(model, val))
    print(f"trained {len(rows)} steps; checkpoint {ckpt}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model, _, _ = load_checkpoint(args.checkpoint)
    samples = _load_split(args.data, model.config.input_size)
    with dc.single_threaded():
        report = evaluate(model, samples, use_tta=args.tta)
    text = json.dumps(report, indent=2, sort_keys=True)
    if args.out:
        _write_json(Path(args.out), report)
    print(text)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradsuite import all_cases, results_as_dicts, run_suite

    if args.inject_bug is not None and args.inject_bug not in all_cases():
        raise UsageError(f"unknown check {args.inject_bug!r}; choose from {', '.join(all_cases())}")
    results = run_suite(instances=args.instances, seed=args.seed, tol=args.tol, inject_bug=args.inject_bug)
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"{status} {r.kind:9s} {r.name:18s} max_rel_err={r.max_rel_err:.3e} instances={r.instances}")
    failed = [r.name for r in results if not r.passed]
    if args.out:
        _write_json(Path(args.out), {"tol": args.tol, "checks": results_as_dicts(results), "failed": failed})
    if failed:
        print(f"{len(failed)} check(s) failed: {', '.join(failed)}", file=sys.stderr)
        return EXIT_NUMERIC
    print(f"all {len(results)} checks passed (tol {args.tol:g})")
    return EXIT_OK


def attention_overlay(image: np.ndarray, attention: np.ndarray, alpha: float = 0.6) -> np.ndarray:
    """Blend a red heat map of the token attention over the image."""
    h, w = image.shape[:2]
    heat = nearest_resize(attention, h, w)
    heat = heat / heat.max() if heat.max() > 0 else heat
    red = np.zeros_like(image)
    red[..., 0] = 1.0
    a = alpha * heat[..., None]
    return (1 - a) * image + a * red


def cmd_predict(args) -> int:
    model, _, _ = load_checkpoint(args.checkpoint)
    path = Path(args.image)
    if not path.is_file():
        raise DataFormatError(f"image not found: {path}")
    image = read_image(path)
    h, w = image.shape[:2]
    size = model.config.input_size
    resized = image if (h, w) == (size, size) else resize_image(image, size, size)
    with dc.single_threaded():
        fg, probs, attn = predict(model, [resized])
        fg, probs, attn = fg[0], probs[0], attn[0]
        if args.tta:
            fg, probs = tta_predict(model, resized)
    if (h, w) != (size, size):
        fg = dc.resize_array(fg, h, w)
    g = model.config.token_grid
    grid = attn.reshape(g, g)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_mask(out / "mask.png", (fg >= 0.5).astype(np.uint8))
    write_image(out / "attention.png", attention_overlay(image, grid))
    _write_json(out / "attention.json", {"grid": g, "attention": grid.tolist(), "sum": float(grid.sum())})
    _write_json(out / "probabilities.json",
                {"probabilities": probs.tolist(), "predicted_class": int(np.argmax(probs)), "tta": bool(args.tta)})
    print(f"predicted class {int(np.argmax(probs))}; outputs in {out}")
    return EXIT_OK


# ----------------------------------------------------------------- parser
def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="lesiontokens", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic lesion dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--unlabeled-fraction", type=float, default=0.0)
    p.add_argument("--hair-probability", type=float, default=0.3)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model on a dataset directory")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--val", help="dataset scored every eval_every steps and at the end")
    p.add_argument("--config", help="JSON file with flat dotted keys")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    p.add_argument("--preset", choices=["desk", "long"], default="desk",
                   help="desk: 2000 steps at lr 1e-3; long: 40000 steps at lr 1e-5")
    p.add_argument("--ablation", type=int, choices=range(1, 7), help="loss-composition setting 1-6")
    p.add_argument("--iters", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--tta", action="store_true")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of primitives and losses")
    p.add_argument("--instances", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--inject-bug", metavar="CHECK", help="corrupt one gradient (negative control)")
    p.add_argument("--out")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("predict", help="mask, attention map and class probabilities for one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--tta", action="store_true")
    p.set_defaults(func=cmd_predict)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"lesiontokens: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingDiverged as exc:
        print(f"lesiontokens: training diverged at step {exc.step} in term {exc.term!r}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataFormatError, CheckpointFormatError, dc.DimensionError) as exc:
        print(f"lesiontokens: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())

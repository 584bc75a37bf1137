"""Command-line interface: train-source, adapt, ablate, compare-measures, sweep, visualize.

Configuration comes from a JSON file (--config); any field can be overridden
with --set dotted.path=value. Output directories default to
$ATTNADAPT_OUTPUT_ROOT/<verb> (or ./runs/<verb>).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .harness import (
    ExperimentConfig,
    cmd_ablate,
    cmd_adapt,
    cmd_compare_measures,
    cmd_sweep,
    cmd_train_source,
    cmd_visualize,
)


def _coerce(value: str):
    try:
        return json.loads(value)
    except json.JSONDecodeError:
        return value


def _apply_overrides(config_dict: dict, overrides: list[str]) -> dict:
    for item in overrides:
        if "=" not in item:
            raise ValueError(f"--set expects dotted.path=value, got {item!r}")
        path, raw = item.split("=", 1)
        keys = path.split(".")
        node = config_dict
        for key in keys[:-1]:
            if key not in node or not isinstance(node[key], dict):
                raise ValueError(f"--set: unknown config path {path!r}")
            node = node[key]
        if keys[-1] not in node:
            raise ValueError(f"--set: unknown config field {path!r}")
        node[keys[-1]] = _coerce(raw)
    return config_dict


def _load_config(args) -> ExperimentConfig:
    if args.config:
        config_dict = json.loads(Path(args.config).read_text())
    else:
        config_dict = ExperimentConfig().to_dict()
    config_dict = _apply_overrides(config_dict, args.set or [])
    if getattr(args, "seed", None) is not None:
        config_dict["seed"] = args.seed
    if getattr(args, "steps", None) is not None:
        config_dict["steps"] = args.steps
    return ExperimentConfig.from_dict(config_dict)


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="experiment config JSON file")
    parser.add_argument("--set", action="append", metavar="PATH=VALUE", help="override a config field (repeatable)")
    parser.add_argument("--out", help="output directory")
    parser.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")
    parser.add_argument("--seed", type=int, help="override config seed")
    parser.add_argument("--steps", type=int, help="override adaptation steps")


def _seeds(arg: str | None) -> tuple[int, ...]:
    if not arg:
        return (1, 2, 3)
    return tuple(int(s) for s in arg.split(","))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="attnadapt", description=__doc__)
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("train-source", help="train and checkpoint the source network")
    _add_common(p)

    p = sub.add_parser("adapt", help="adapt the target network from a source checkpoint")
    _add_common(p)
    p.add_argument("--source-checkpoint", required=True, help="directory from train-source")

    p = sub.add_parser("ablate", help="run the EM-variant x alignment grid")
    _add_common(p)
    p.add_argument("--seeds", help="comma-separated seeds (default 1,2,3)")

    p = sub.add_parser("compare-measures", help="compare alignment measures and attention modes")
    _add_common(p)
    p.add_argument("--seeds", help="comma-separated seeds (default 1,2,3)")

    p = sub.add_parser("sweep", help="accuracy vs p_t or beta")
    _add_common(p)
    p.add_argument("--param", required=True, choices=["p_t", "beta"])
    p.add_argument("--values", required=True, help="comma-separated values")
    p.add_argument("--seeds", help="comma-separated seeds (default 1,2,3)")

    p = sub.add_parser("visualize", help="export attention overlays for target samples")
    _add_common(p)
    p.add_argument("--checkpoint", required=True, help="network checkpoint directory")
    p.add_argument("--layer", type=int, help="tap layer index (default: last tap)")
    p.add_argument("--mode", help="attention mode (default: config value)")
    p.add_argument("--num-samples", type=int, default=8)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        config = _load_config(args)
        if args.verb == "train-source":
            cmd_train_source(config, out_dir=args.out, force=args.force)
        elif args.verb == "adapt":
            cmd_adapt(config, args.source_checkpoint, out_dir=args.out, force=args.force)
        elif args.verb == "ablate":
            result = cmd_ablate(config, out_dir=args.out, seeds=_seeds(args.seeds), force=args.force)
            print(f"ablate table -> {result.table_path}")
        elif args.verb == "compare-measures":
            result = cmd_compare_measures(config, out_dir=args.out, seeds=_seeds(args.seeds), force=args.force)
            print(f"measure table -> {result.table_path}")
        elif args.verb == "sweep":
            values = [float(v) for v in args.values.split(",")]
            result = cmd_sweep(config, args.param, values, out_dir=args.out, seeds=_seeds(args.seeds), force=args.force)
            print(f"sweep table -> {result.table_path}")
        elif args.verb == "visualize":
            files = cmd_visualize(
                config,
                args.checkpoint,
                out_dir=args.out,
                layer=args.layer,
                mode=args.mode,
                num_samples=args.num_samples,
                force=args.force,
            )
            print(f"visualize: wrote {len(files)} files")
    except Exception as exc:  # CLI boundary: report and signal failure
        print(f"attnadapt {args.verb}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

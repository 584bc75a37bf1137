"""Run the desk-scale trend experiments: domain gap, adaptation gain,
EM-variant ablations, and alignment-curve behaviour.

Writes one summary JSON with every number the trend checks need, plus the
usual per-run artifacts under the output directory. Intended both for
exploring configurations and for reproducing the shipped trend results:

    python scripts/run_trends.py --out runs/trends --seeds 1,2,3
"""

from __future__ import annotations

import argparse
import json
import time
from dataclasses import replace
from pathlib import Path

from attnadapt.datagen import BatchComposition
from attnadapt.em_trainer import EMConfig, ScheduleConfig, TrainFlags
from attnadapt.harness import DatasetConfig, ExperimentConfig, cmd_adapt, cmd_train_source
from attnadapt.model import convnet_spec
from attnadapt.translation import StyleMapConfig

VARIANTS = {
    "full_at": {},
    "full_noat": {"beta": 0.0},
    "em_a_at": {"sync_period": 1},
    "em_b_at": {"use_filter": False},
    "em_c_at": {"use_lr_reset": False},
}


def trend_config(args) -> ExperimentConfig:
    widths = tuple(int(w) for w in args.widths.split(","))
    return ExperimentConfig(
        dataset=DatasetConfig(n=args.n, num_classes=10, seed=11, test_fraction=args.test_fraction),
        style_map=StyleMapConfig(),
        net=convnet_spec(num_classes=10, widths=widths),
        composition=BatchComposition(batch_size=args.batch_size),
        em=EMConfig(
            sync_period=args.sync_period,
            p_t=0.95,
            p_t_initial=1.0,
            beta=args.beta,
            lr_schedule=ScheduleConfig(lr0=1e-3, gamma=0.5, decay_every=args.decay_every),
        ),
        flags=TrainFlags(),
        steps=args.steps,
        source_steps=args.source_steps,
        eval_every=args.eval_every,
    )


def variant_config(config: ExperimentConfig, name: str, seed: int) -> ExperimentConfig:
    overrides = VARIANTS[name]
    em, flags = config.em, config.flags
    if "beta" in overrides:
        em = replace(em, beta=overrides["beta"])
    if "sync_period" in overrides:
        em = replace(em, sync_period=overrides["sync_period"])
    if "use_filter" in overrides:
        flags = replace(flags, use_filter=overrides["use_filter"])
    if "use_lr_reset" in overrides:
        flags = replace(flags, use_lr_reset=overrides["use_lr_reset"])
    return replace(config, em=em, flags=flags, seed=seed)


def tail_mean_at(records_path: Path) -> float:
    records = [json.loads(line) for line in records_path.read_text().splitlines()]
    tail = records[int(0.75 * len(records)) :]
    return sum(r["at"] for r in tail) / len(tail)


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="runs/trends")
    parser.add_argument("--seeds", default="1,2,3")
    parser.add_argument("--n", type=int, default=2400)
    parser.add_argument("--test-fraction", type=float, default=1 / 6)
    parser.add_argument("--widths", default="16,32,64")
    parser.add_argument("--batch-size", type=int, default=64)
    parser.add_argument("--steps", type=int, default=1500)
    parser.add_argument("--source-steps", type=int, default=1200)
    parser.add_argument("--eval-every", type=int, default=250)
    parser.add_argument("--sync-period", type=int, default=250)
    parser.add_argument("--beta", type=float, default=1.0)
    parser.add_argument("--decay-every", type=int, default=1000)
    parser.add_argument("--variants", default=",".join(VARIANTS))
    args = parser.parse_args()

    seeds = [int(s) for s in args.seeds.split(",")]
    variants = args.variants.split(",")
    config = trend_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    summary = {"config": config.to_dict(), "seeds": seeds, "sources": {}, "runs": {}}
    t0 = time.time()
    for seed in seeds:
        src = cmd_train_source(replace(config, seed=seed), out_dir=out / f"source-s{seed}", force=True)
        src_report = json.loads((out / f"source-s{seed}" / "report.json").read_text())
        summary["sources"][str(seed)] = {"source_test_acc": src_report["source_test_acc"]}
        for name in variants:
            run_id = f"{name}-s{seed}"
            result = cmd_adapt(
                variant_config(config, name, seed),
                src.checkpoint_dir,
                out_dir=out / "runs" / run_id,
                force=True,
                run_id=run_id,
            )
            summary["runs"][run_id] = {
                "variant": name,
                "seed": seed,
                "source_only_acc": result.source_only_acc,
                "adapted_acc": result.adapted_acc,
                "tail_mean_at": tail_mean_at(result.metrics_path),
            }
            print(f"[{time.time() - t0:7.1f}s] {run_id}: source-only {result.source_only_acc:.4f} "
                  f"adapted {result.adapted_acc:.4f} tail-at {summary['runs'][run_id]['tail_mean_at']:.4f}")

    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))

    print("\n=== trend summary ===")
    for seed in seeds:
        src_acc = summary["sources"][str(seed)]["source_test_acc"]
        runs = {v: summary["runs"][f"{v}-s{seed}"] for v in variants if f"{v}-s{seed}" in summary["runs"]}
        any_run = next(iter(runs.values()))
        print(f"seed {seed}: source-test {src_acc:.4f}  source-only-target {any_run['source_only_acc']:.4f}")
        for name, r in runs.items():
            print(f"    {name:10s} adapted {r['adapted_acc']:.4f}  tail-at {r['tail_mean_at']:.4f}")
    print(f"total wall time {time.time() - t0:.0f}s -> {out/'summary.json'}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())

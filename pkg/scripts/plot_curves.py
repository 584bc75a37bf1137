"""Plot accuracy and alignment-penalty curves from adaptation run directories.

Each argument is a run directory containing metrics.jsonl (as written by
`attnadapt adapt`). Produces two PNGs next to the chosen output prefix:
<prefix>_accuracy.png and <prefix>_alignment.png.

    python scripts/plot_curves.py runs/adapt-a runs/adapt-b --out curves
"""

from __future__ import annotations

import argparse
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt


def load_metrics(run_dir: Path) -> list[dict]:
    path = run_dir / "metrics.jsonl"
    return [json.loads(line) for line in path.read_text().splitlines()]


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("runs", nargs="+", help="run directories with metrics.jsonl")
    parser.add_argument("--out", default="curves", help="output file prefix")
    parser.add_argument("--smooth", type=int, default=25, help="moving-average window for the alignment curve")
    args = parser.parse_args()

    fig_acc, ax_acc = plt.subplots(figsize=(6, 4))
    fig_at, ax_at = plt.subplots(figsize=(6, 4))
    for run in args.runs:
        run_dir = Path(run)
        records = load_metrics(run_dir)
        label = run_dir.name
        evals = [(r["step"], r["eval_target_acc"]) for r in records if "eval_target_acc" in r]
        if evals:
            ax_acc.plot(*zip(*evals), marker="o", label=label)
        steps = [r["step"] for r in records]
        at = [r["at"] for r in records]
        w = max(1, args.smooth)
        smoothed = [sum(at[max(0, i - w + 1) : i + 1]) / len(at[max(0, i - w + 1) : i + 1]) for i in range(len(at))]
        ax_at.plot(steps, smoothed, label=label)

    ax_acc.set_xlabel("step")
    ax_acc.set_ylabel("target test accuracy")
    ax_acc.legend()
    ax_acc.grid(alpha=0.3)
    fig_acc.tight_layout()
    fig_acc.savefig(f"{args.out}_accuracy.png", dpi=150)

    ax_at.set_xlabel("step")
    ax_at.set_ylabel("attention alignment penalty")
    ax_at.legend()
    ax_at.grid(alpha=0.3)
    fig_at.tight_layout()
    fig_at.savefig(f"{args.out}_alignment.png", dpi=150)
    print(f"wrote {args.out}_accuracy.png and {args.out}_alignment.png")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())

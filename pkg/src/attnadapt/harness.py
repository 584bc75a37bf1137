"""Experiment orchestration: configs, source pre-training, adaptation runs,
ablation/measure/sweep grids, evaluation, and attention-overlay export.

Every run writes a metrics JSONL plus a report JSON under its own run
directory, and every aggregated CSV row references the run ids it came from.
"""

from __future__ import annotations

import csv
import json
import os
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch
from PIL import Image

from .attention import ATTENTION_MODES, MEASURES, attention_map
from .datagen import (
    BatchComposition,
    Dataset,
    Domain,
    load_idx_dataset,
    make_domain_pair_datasets,
    synth_glyph_dataset,
)
from .em_trainer import EMConfig, MetricsRecord, TrainFlags, run_training
from .model import (
    ConvNetSpec,
    Network,
    build_network,
    load_checkpoint,
    load_network,
    save_checkpoint,
    snapshot_params,
)
from .translation import Direction, StyleMapConfig, analytic_translate, build_style_map

OUTPUT_ROOT_ENV = "ATTNADAPT_OUTPUT_ROOT"


@dataclass(frozen=True)
class DatasetConfig:
    kind: str = "glyphs"  # "glyphs" | "idx"
    n: int = 4000
    num_classes: int = 10
    seed: int = 11
    test_fraction: float = 0.2
    images_path: str | None = None
    labels_path: str | None = None

    def __post_init__(self):
        if self.kind not in ("glyphs", "idx"):
            raise ValueError(f"unknown dataset kind {self.kind!r}")
        if not 0 < self.test_fraction < 1:
            raise ValueError(f"test_fraction must lie in (0, 1), got {self.test_fraction}")
        if self.kind == "idx" and (self.images_path is None or self.labels_path is None):
            raise ValueError("idx datasets need images_path and labels_path")

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "n": self.n,
            "num_classes": self.num_classes,
            "seed": self.seed,
            "test_fraction": self.test_fraction,
            "images_path": self.images_path,
            "labels_path": self.labels_path,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "DatasetConfig":
        return cls(
            kind=str(d["kind"]),
            n=int(d["n"]),
            num_classes=int(d["num_classes"]),
            seed=int(d["seed"]),
            test_fraction=float(d["test_fraction"]),
            images_path=d.get("images_path"),
            labels_path=d.get("labels_path"),
        )


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    style_map: StyleMapConfig = field(default_factory=StyleMapConfig)
    net: ConvNetSpec = field(default_factory=ConvNetSpec)
    composition: BatchComposition = field(default_factory=BatchComposition)
    em: EMConfig = field(default_factory=EMConfig)
    flags: TrainFlags = field(default_factory=TrainFlags)
    steps: int = 4000
    source_steps: int = 2000
    eval_every: int = 200
    seed: int = 1
    out_dir: str | None = None

    def to_dict(self) -> dict:
        return {
            "dataset": self.dataset.to_dict(),
            "style_map": self.style_map.to_dict(),
            "net": self.net.to_dict(),
            "composition": self.composition.to_dict(),
            "em": self.em.to_dict(),
            "flags": self.flags.to_dict(),
            "steps": self.steps,
            "source_steps": self.source_steps,
            "eval_every": self.eval_every,
            "seed": self.seed,
            "out_dir": self.out_dir,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ExperimentConfig":
        return cls(
            dataset=DatasetConfig.from_dict(d["dataset"]),
            style_map=StyleMapConfig.from_dict(d["style_map"]),
            net=ConvNetSpec.from_dict(d["net"]),
            composition=BatchComposition.from_dict(d["composition"]),
            em=EMConfig.from_dict(d["em"]),
            flags=TrainFlags.from_dict(d["flags"]),
            steps=int(d["steps"]),
            source_steps=int(d["source_steps"]),
            eval_every=int(d["eval_every"]),
            seed=int(d["seed"]),
            out_dir=d.get("out_dir"),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        return cls.from_dict(json.loads(text))


@dataclass
class DomainBundle:
    """The four training streams plus held-out evaluation sets."""

    source: Dataset
    synth_target: Dataset
    target: Dataset
    synth_source: Dataset
    source_test: Dataset
    target_test: Dataset

    def streams(self) -> tuple[Dataset, Dataset, Dataset, Dataset]:
        return (self.source, self.synth_target, self.target, self.synth_source)


def build_bundle(dataset_cfg: DatasetConfig, style_cfg: StyleMapConfig) -> DomainBundle:
    if dataset_cfg.kind == "glyphs":
        base = synth_glyph_dataset(dataset_cfg.n, dataset_cfg.num_classes, dataset_cfg.seed)
    else:
        base = load_idx_dataset(dataset_cfg.images_path, dataset_cfg.labels_path)
        if dataset_cfg.n < len(base):
            base = base.subset(slice(0, dataset_cfg.n))
    if tuple(base.pixels.shape[-2:]) != tuple(style_cfg.shape):
        raise ValueError(
            f"style map shape {style_cfg.shape} does not match image shape {base.pixels.shape[-2:]}"
        )
    params = build_style_map(style_cfg)
    n_total = len(base)
    n_test = int(round(dataset_cfg.test_fraction * n_total))
    if n_test < 1 or n_total - n_test < 2:
        raise ValueError(f"dataset of {n_total} images too small for test_fraction {dataset_cfg.test_fraction}")
    pool = base.subset(slice(0, n_total - n_test))
    test = base.subset(slice(n_total - n_test, None))
    source, synth_target, target, synth_source = make_domain_pair_datasets(pool, params)
    target_test = Dataset(
        analytic_translate(test.pixels, params, Direction.S2T),
        None,
        Domain.REAL_TARGET,
        test.pair_ids.copy(),
        eval_labels=test.labels.copy(),
    )
    return DomainBundle(source, synth_target, target, synth_source, test, target_test)


def evaluate_accuracy(network: Network, dataset: Dataset, batch_size: int = 256) -> float:
    """Fraction of argmax-correct predictions; ties go to the lowest class index."""
    if dataset.labels is None:
        raise ValueError("evaluate_accuracy needs a labeled dataset (use .for_evaluation())")
    dtype = next(network.parameters()).dtype
    correct = 0
    with torch.no_grad():
        for lo in range(0, len(dataset), batch_size):
            x = torch.as_tensor(dataset.pixels[lo : lo + batch_size], dtype=dtype)
            logits = network(x).cpu().numpy()
            pred = np.argmax(logits, axis=1)
            correct += int((pred == dataset.labels[lo : lo + batch_size]).sum())
    return correct / len(dataset)


def train_source_network(
    spec: ConvNetSpec, dataset: Dataset, steps: int, batch_size: int, lr: float, seed: int
) -> Network:
    """Plain cross-entropy training on the labeled real-source stream."""
    if dataset.labels is None:
        raise ValueError("source training needs labels")
    net = build_network(spec, seed=seed)
    optimizer = torch.optim.Adam(net.parameters(), lr=lr)
    labels_all = torch.as_tensor(dataset.labels, dtype=torch.long)
    for t in range(steps):
        rng = np.random.default_rng([seed, t, 1])
        idx = rng.choice(len(dataset), size=min(batch_size, len(dataset)), replace=False)
        x = torch.as_tensor(dataset.pixels[idx])
        loss = torch.nn.functional.cross_entropy(net(x), labels_all[idx])
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
    return net


# ---------------------------------------------------------------------------
# run directories and file outputs


def resolve_out_dir(explicit, config_out: str | None, verb: str) -> Path:
    if explicit is not None:
        return Path(explicit)
    if config_out is not None:
        return Path(config_out)
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs")) / verb


def prepare_out_dir(path: Path, force: bool) -> Path:
    path = Path(path)
    if path.exists() and any(path.iterdir()) and not force:
        raise FileExistsError(f"output directory {path} is not empty; pass force=True/--force to overwrite")
    path.mkdir(parents=True, exist_ok=True)
    return path


def write_metrics_jsonl(path: Path, records: Sequence[MetricsRecord]) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_json_dict()) + "\n")


def write_curves_csv(path: Path, records: Sequence[MetricsRecord]) -> None:
    fields = ["step", "ce", "em", "at", "kept_fraction", "lr", "eval_source_acc", "eval_target_acc"]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(fields)
        for rec in records:
            writer.writerow(
                [
                    rec.step,
                    f"{rec.ce:.6f}",
                    f"{rec.em:.6f}",
                    f"{rec.at:.6f}",
                    f"{rec.kept_fraction:.4f}",
                    f"{rec.lr:.6g}",
                    "" if rec.eval_source_acc is None else f"{rec.eval_source_acc:.4f}",
                    "" if rec.eval_target_acc is None else f"{rec.eval_target_acc:.4f}",
                ]
            )


# ---------------------------------------------------------------------------
# commands


@dataclass
class SourceTrainResult:
    checkpoint_dir: Path
    source_test_acc: float
    report_path: Path


def cmd_train_source(config: ExperimentConfig, out_dir=None, force: bool = False) -> SourceTrainResult:
    out = prepare_out_dir(resolve_out_dir(out_dir, config.out_dir, "train-source"), force)
    bundle = build_bundle(config.dataset, config.style_map)
    net = train_source_network(
        config.net,
        bundle.source,
        config.source_steps,
        config.composition.batch_size,
        config.em.lr_schedule.lr0,
        config.seed,
    )
    acc = evaluate_accuracy(net, bundle.source_test.for_evaluation())
    save_checkpoint(out, config.net, snapshot_params(net), seed=config.seed, step=config.source_steps)
    report = {"source_test_acc": acc, "config": config.to_dict()}
    report_path = out / "report.json"
    report_path.write_text(json.dumps(report, indent=2, sort_keys=True))
    print(f"train-source: source-test accuracy {acc:.4f} -> {out}")
    return SourceTrainResult(checkpoint_dir=out, source_test_acc=acc, report_path=report_path)


@dataclass
class AdaptResult:
    run_dir: Path
    run_id: str
    source_only_acc: float
    adapted_acc: float
    metrics_path: Path
    curves_path: Path
    report_path: Path
    checkpoint_dir: Path
    records: list[MetricsRecord]


def cmd_adapt(
    config: ExperimentConfig,
    source_checkpoint,
    out_dir=None,
    force: bool = False,
    run_id: str | None = None,
) -> AdaptResult:
    run_id = run_id or f"adapt-s{config.seed}"
    out = prepare_out_dir(resolve_out_dir(out_dir, config.out_dir, "adapt"), force)
    ckpt = load_checkpoint(source_checkpoint)
    if ckpt.spec.spec_hash() != config.net.spec_hash():
        raise ValueError("source checkpoint spec hash does not match the configured network spec")
    bundle = build_bundle(config.dataset, config.style_map)
    source_net = load_network(source_checkpoint)
    source_only_acc = evaluate_accuracy(source_net, bundle.target_test.for_evaluation())

    source_test = bundle.source_test.for_evaluation()
    target_test = bundle.target_test.for_evaluation()

    def eval_hook(net: Network) -> tuple[float, float]:
        return evaluate_accuracy(net, source_test), evaluate_accuracy(net, target_test)

    net, records = run_training(
        ckpt.snapshot,
        config.net,
        bundle.streams(),
        config.composition,
        config.em,
        config.flags,
        config.steps,
        config.seed,
        eval_every=config.eval_every,
        eval_hook=eval_hook,
    )
    # the final eval row (when present) used this same final network
    adapted_acc = evaluate_accuracy(net, target_test)

    metrics_path = out / "metrics.jsonl"
    write_metrics_jsonl(metrics_path, records)
    curves_path = out / "curves.csv"
    write_curves_csv(curves_path, records)
    checkpoint_dir = out / "target_checkpoint"
    save_checkpoint(checkpoint_dir, config.net, snapshot_params(net), seed=config.seed, step=config.steps)
    report = {
        "run_id": run_id,
        "source_only_acc": source_only_acc,
        "adapted_acc": adapted_acc,
        "config": config.to_dict(),
    }
    report_path = out / "report.json"
    report_path.write_text(json.dumps(report, indent=2, sort_keys=True))
    print(f"adapt [{run_id}]: source-only {source_only_acc:.4f} -> adapted {adapted_acc:.4f}")
    return AdaptResult(
        run_dir=out,
        run_id=run_id,
        source_only_acc=source_only_acc,
        adapted_acc=adapted_acc,
        metrics_path=metrics_path,
        curves_path=curves_path,
        report_path=report_path,
        checkpoint_dir=checkpoint_dir,
        records=records,
    )


def _variant_config(config: ExperimentConfig, variant: str, with_at: bool) -> ExperimentConfig:
    em, flags = config.em, config.flags
    if variant == "full":
        pass
    elif variant == "em_a":
        em = replace(em, sync_period=1)
    elif variant == "em_b":
        flags = replace(flags, use_filter=False)
    elif variant == "em_c":
        flags = replace(flags, use_lr_reset=False)
    else:
        raise ValueError(f"unknown ablation variant {variant!r}")
    if not with_at:
        em = replace(em, beta=0.0)
    return replace(config, em=em, flags=flags)


def _grid_source_checkpoints(
    config: ExperimentConfig, seeds: Sequence[int], out: Path, force: bool
) -> dict[int, Path]:
    checkpoints = {}
    for seed in seeds:
        src_dir = out / f"source-s{seed}"
        cmd_train_source(replace(config, seed=seed), out_dir=src_dir, force=force)
        checkpoints[seed] = src_dir
    return checkpoints


def _aggregate_rows(cells: dict[str, list[tuple[int, float, str]]], num_classes: int) -> list[dict]:
    chance = 1.0 / num_classes
    rows = []
    for variant, entries in cells.items():
        accs = np.array([acc for _, acc, _ in entries])
        rows.append(
            {
                "variant": variant,
                "seed": "|".join(str(s) for s, _, _ in entries),
                "acc_mean": float(accs.mean()),
                "acc_std": float(accs.std()),
                "collapse_flag": bool(accs.mean() < chance + 0.10),
                "run_ids": "|".join(rid for _, _, rid in entries),
            }
        )
    return rows


def _write_table(path: Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["variant", "seed", "acc_mean", "acc_std", "collapse_flag", "run_ids"])
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


def _write_runs(path: Path, runs: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["variant", "seed", "acc", "run_id"])
        writer.writeheader()
        for row in runs:
            writer.writerow(row)


@dataclass
class GridResult:
    table_path: Path
    runs_path: Path
    rows: list[dict]
    runs: list[dict]


def cmd_ablate(config: ExperimentConfig, out_dir=None, seeds: Sequence[int] = (1, 2, 3), force: bool = False) -> GridResult:
    """Variant grid {full, em_a, em_b, em_c} x {with, without alignment penalty}."""
    out = prepare_out_dir(resolve_out_dir(out_dir, config.out_dir, "ablate"), force)
    checkpoints = _grid_source_checkpoints(config, seeds, out, force=True)
    cells: dict[str, list[tuple[int, float, str]]] = {}
    runs: list[dict] = []
    for variant in ("full", "em_a", "em_b", "em_c"):
        for with_at in (True, False):
            name = f"{variant}_{'at' if with_at else 'noat'}"
            for seed in seeds:
                run_cfg = _variant_config(replace(config, seed=seed), variant, with_at)
                run_id = f"{name}-s{seed}"
                result = cmd_adapt(
                    run_cfg, checkpoints[seed], out_dir=out / "runs" / run_id, force=True, run_id=run_id
                )
                cells.setdefault(name, []).append((seed, result.adapted_acc, run_id))
                runs.append({"variant": name, "seed": seed, "acc": f"{result.adapted_acc:.4f}", "run_id": run_id})
    rows = _aggregate_rows(cells, config.dataset.num_classes)
    table_path = out / "ablate.csv"
    _write_table(table_path, rows)
    runs_path = out / "ablate_runs.csv"
    _write_runs(runs_path, runs)
    return GridResult(table_path, runs_path, rows, runs)


def cmd_compare_measures(
    config: ExperimentConfig, out_dir=None, seeds: Sequence[int] = (1, 2, 3), force: bool = False
) -> GridResult:
    """Measure grid {l2, l1, mmd, jmmd} plus representation grid {sumsq, sumabs, maxabs, raw}.

    The l2/sumsq cell is the default method; it is computed once and reported
    under both its measure row and its mode row.
    """
    out = prepare_out_dir(resolve_out_dir(out_dir, config.out_dir, "compare-measures"), force)
    checkpoints = _grid_source_checkpoints(config, seeds, out, force=True)
    cells: dict[str, list[tuple[int, float, str]]] = {}
    runs: list[dict] = []

    def run_cell(name: str, measure: str, mode: str):
        for seed in seeds:
            run_cfg = replace(
                config,
                seed=seed,
                flags=replace(config.flags, measure=measure, attention_mode=mode),
            )
            run_id = f"{name}-s{seed}"
            result = cmd_adapt(run_cfg, checkpoints[seed], out_dir=out / "runs" / run_id, force=True, run_id=run_id)
            cells.setdefault(name, []).append((seed, result.adapted_acc, run_id))
            runs.append({"variant": name, "seed": seed, "acc": f"{result.adapted_acc:.4f}", "run_id": run_id})

    for measure in MEASURES:
        run_cell(f"measure_{measure}", measure, "sumsq")
    cells["mode_sumsq"] = list(cells["measure_l2"])  # same configuration, runs reused
    for seed, acc, rid in cells["mode_sumsq"]:
        runs.append({"variant": "mode_sumsq", "seed": seed, "acc": f"{acc:.4f}", "run_id": rid})
    for mode in ("sumabs", "maxabs", "raw"):
        run_cell(f"mode_{mode}", "l2", mode)
    # keep grid ordering: measures then modes
    ordered = {}
    for name in [f"measure_{m}" for m in MEASURES] + [f"mode_{m}" for m in ("sumsq", "sumabs", "maxabs", "raw")]:
        ordered[name] = cells[name]
    rows = _aggregate_rows(ordered, config.dataset.num_classes)
    table_path = out / "measures.csv"
    _write_table(table_path, rows)
    runs_path = out / "measures_runs.csv"
    _write_runs(runs_path, runs)
    return GridResult(table_path, runs_path, rows, runs)


def cmd_sweep(
    config: ExperimentConfig,
    param: str,
    values: Sequence[float],
    out_dir=None,
    seeds: Sequence[int] = (1, 2, 3),
    force: bool = False,
) -> GridResult:
    """Accuracy vs a hyperparameter (p_t or beta), one run per (value, seed)."""
    if param not in ("p_t", "beta"):
        raise ValueError(f"sweep parameter must be 'p_t' or 'beta', got {param!r}")
    if len(values) == 0:
        raise ValueError("sweep needs at least one value")
    deduped = []
    for v in values:
        if v in deduped:
            print(f"sweep: duplicate value {v} ignored", file=sys.stderr)
        else:
            deduped.append(v)
    out = prepare_out_dir(resolve_out_dir(out_dir, config.out_dir, "sweep"), force)
    checkpoints = _grid_source_checkpoints(config, seeds, out, force=True)
    cells: dict[str, list[tuple[int, float, str]]] = {}
    runs: list[dict] = []
    for value in deduped:
        name = f"{param}={value:g}"
        for seed in seeds:
            em = replace(config.em, **{param: float(value)})
            run_cfg = replace(config, seed=seed, em=em)
            run_id = f"{param}-{value:g}-s{seed}"
            result = cmd_adapt(run_cfg, checkpoints[seed], out_dir=out / "runs" / run_id, force=True, run_id=run_id)
            cells.setdefault(name, []).append((seed, result.adapted_acc, run_id))
            runs.append({"variant": name, "seed": seed, "acc": f"{result.adapted_acc:.4f}", "run_id": run_id})
    rows = _aggregate_rows(cells, config.dataset.num_classes)
    table_path = out / "sweep.csv"
    _write_table(table_path, rows)
    runs_path = out / "sweep_runs.csv"
    _write_runs(runs_path, runs)
    return GridResult(table_path, runs_path, rows, runs)


# ---------------------------------------------------------------------------
# attention visualization


def _to_png(path: Path, img: np.ndarray) -> None:
    arr = np.clip(img, 0.0, 1.0)
    Image.fromarray((arr * 255.0).round().astype(np.uint8), mode="L").save(path)


def export_attention_overlay(network: Network, samples, layer: int, mode: str, out_dir) -> list[Path]:
    """Write input/attention PNG pairs plus one raw float32 file with sidecar.

    Attention maps are bilinearly upsampled to the input size and min-max
    normalized per sample; constant maps normalize to zeros.
    """
    pixels = samples.pixels if isinstance(samples, Dataset) else np.asarray(samples)
    if pixels.ndim != 4:
        raise ValueError("samples must be (N, C, H, W)")
    if layer not in network.spec.tap_layers:
        raise ValueError(f"layer {layer} is not a tapped layer {network.spec.tap_layers}")
    if mode not in ATTENTION_MODES or mode == "raw":
        raise ValueError(f"overlay mode must be a spatial attention mode, got {mode!r}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dtype = next(network.parameters()).dtype
    with torch.no_grad():
        taps = network.forward_with_taps(torch.as_tensor(pixels, dtype=dtype)).taps
        maps = attention_map(taps[layer], mode)
        upsampled = torch.nn.functional.interpolate(
            maps[:, None], size=pixels.shape[-2:], mode="bilinear", align_corners=False
        )[:, 0].numpy()
    lo = upsampled.min(axis=(1, 2), keepdims=True)
    hi = upsampled.max(axis=(1, 2), keepdims=True)
    span = hi - lo
    normed = np.where(span > 0, (upsampled - lo) / np.where(span > 0, span, 1.0), 0.0).astype(np.float32)

    written = []
    for i in range(pixels.shape[0]):
        in_path = out / f"input_{i:03d}.png"
        _to_png(in_path, pixels[i].mean(axis=0))
        at_path = out / f"attention_{i:03d}.png"
        _to_png(at_path, normed[i])
        written += [in_path, at_path]
    raw_path = out / "attention_raw.f32"
    raw_path.write_bytes(np.ascontiguousarray(normed, dtype="<f4").tobytes())
    sidecar_path = out / "attention_raw.json"
    sidecar_path.write_text(
        json.dumps({"shape": list(normed.shape), "dtype": "float32", "layer": layer, "mode": mode}, sort_keys=True)
    )
    return written + [raw_path, sidecar_path]


def cmd_visualize(
    config: ExperimentConfig,
    checkpoint,
    out_dir=None,
    layer: int | None = None,
    mode: str | None = None,
    num_samples: int = 8,
    force: bool = False,
) -> list[Path]:
    out = prepare_out_dir(resolve_out_dir(out_dir, config.out_dir, "visualize"), force)
    net = load_network(checkpoint)
    bundle = build_bundle(config.dataset, config.style_map)
    samples = bundle.target.subset(slice(0, num_samples))
    layer = net.spec.tap_layers[-1] if layer is None else layer
    mode = mode or config.flags.attention_mode
    return export_attention_overlay(net, samples, layer, mode, out)

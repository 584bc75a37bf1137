"""Four-stream paired training data: real/synthetic images from both domains.

The target domain is manufactured by style-translating a held-out half of the
source dataset, which yields a genuine covariate shift with ground-truth
labels retained privately for evaluation only. Real and translated partners
always travel together inside a batch so every alignment and EM term is
computable in a single pass.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path

import numpy as np

from .glyphs import GLYPH_SIZE, num_glyph_classes, render_glyph
from .translation import Direction, StyleMapParams, analytic_translate

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    """Raised for malformed IDX files."""


class Domain(str, Enum):
    REAL_SOURCE = "real_source"
    SYNTH_TARGET = "synth_target"
    REAL_TARGET = "real_target"
    SYNTH_SOURCE = "synth_source"


# streams in canonical batch-composition order
STREAM_ORDER = (Domain.REAL_SOURCE, Domain.SYNTH_TARGET, Domain.REAL_TARGET, Domain.SYNTH_SOURCE)


@dataclass(frozen=True)
class Dataset:
    """Immutable image dataset.

    labels is None for streams whose labels are hidden from the trainer;
    eval_labels, when present, is ground truth reserved for the evaluation
    path and must never feed a loss.
    """

    pixels: np.ndarray  # (N, C, H, W) float32
    labels: np.ndarray | None
    domain: Domain
    pair_ids: np.ndarray  # (N,) int64
    eval_labels: np.ndarray | None = None

    def __post_init__(self):
        if self.pixels.ndim != 4:
            raise ValueError(f"pixels must be (N, C, H, W), got shape {self.pixels.shape}")
        n = self.pixels.shape[0]
        if self.pair_ids.shape != (n,):
            raise ValueError("pair_ids length must match number of images")
        for name, arr in (("labels", self.labels), ("eval_labels", self.eval_labels)):
            if arr is not None and arr.shape != (n,):
                raise ValueError(f"{name} length must match number of images")

    def __len__(self) -> int:
        return self.pixels.shape[0]

    def subset(self, idx) -> "Dataset":
        take = lambda a: None if a is None else a[idx]
        return Dataset(self.pixels[idx], take(self.labels), self.domain, self.pair_ids[idx], take(self.eval_labels))

    def for_evaluation(self) -> "Dataset":
        """Labeled view for accuracy evaluation; the only sanctioned label reveal."""
        labels = self.labels if self.labels is not None else self.eval_labels
        if labels is None:
            raise ValueError(f"dataset ({self.domain.value}) has no labels to evaluate against")
        return replace(self, labels=labels)


def load_idx_dataset(images_path, labels_path) -> Dataset:
    """Load an IDX image/label file pair (big-endian, magics 0x803/0x801)."""
    images_path, labels_path = Path(images_path), Path(labels_path)
    for p in (images_path, labels_path):
        if not p.exists():
            raise FileNotFoundError(f"dataset file not found: {p}")

    raw = images_path.read_bytes()
    if len(raw) < 16:
        raise IdxFormatError(f"{images_path}: truncated header")
    magic, n, rows, cols = struct.unpack(">IIII", raw[:16])
    if magic != IDX_IMAGES_MAGIC:
        raise IdxFormatError(f"{images_path}: bad magic 0x{magic:08x}, expected 0x{IDX_IMAGES_MAGIC:08x}")
    expected = 16 + n * rows * cols
    if len(raw) < expected:
        raise IdxFormatError(f"{images_path}: truncated data ({len(raw)} bytes, expected {expected})")
    pixels = np.frombuffer(raw, dtype=np.uint8, count=n * rows * cols, offset=16)
    pixels = (pixels.reshape(n, 1, rows, cols).astype(np.float32)) / 255.0

    raw = labels_path.read_bytes()
    if len(raw) < 8:
        raise IdxFormatError(f"{labels_path}: truncated header")
    magic, n_labels = struct.unpack(">II", raw[:8])
    if magic != IDX_LABELS_MAGIC:
        raise IdxFormatError(f"{labels_path}: bad magic 0x{magic:08x}, expected 0x{IDX_LABELS_MAGIC:08x}")
    if len(raw) < 8 + n_labels:
        raise IdxFormatError(f"{labels_path}: truncated data")
    labels = np.frombuffer(raw, dtype=np.uint8, count=n_labels, offset=8).astype(np.int64)
    if n_labels != n:
        raise IdxFormatError(f"image count {n} != label count {n_labels}")

    return Dataset(pixels, labels, Domain.REAL_SOURCE, np.arange(n, dtype=np.int64))


def synth_glyph_dataset(n: int, k: int, seed: int) -> Dataset:
    """n procedurally rendered glyphs over k classes; balanced, seeded."""
    if k < 2:
        raise ValueError(f"need at least 2 classes, got {k}")
    if n < k:
        raise ValueError(f"need n >= k, got n={n}, k={k}")
    if k > num_glyph_classes():
        raise ValueError(f"only {num_glyph_classes()} glyph classes available, requested {k}")
    rng = np.random.default_rng(seed)
    labels = np.array([i % k for i in range(n)], dtype=np.int64)
    labels = labels[rng.permutation(n)]
    pixels = np.zeros((n, 1, GLYPH_SIZE, GLYPH_SIZE), dtype=np.float32)
    for i in range(n):
        pixels[i, 0] = render_glyph(int(labels[i]), rng)
    return Dataset(pixels, labels, Domain.REAL_SOURCE, np.arange(n, dtype=np.int64))


def make_domain_pair_datasets(
    source_dataset: Dataset, params: StyleMapParams
) -> tuple[Dataset, Dataset, Dataset, Dataset]:
    """Split a labeled source dataset into the four paired training streams.

    Half A stays as the labeled source; its translation is the labeled
    synthetic target. Half B is translated into the (unlabeled) real target,
    whose exact back-translation is the synthetic source. Target labels are
    kept privately for evaluation only.
    """
    if source_dataset.labels is None:
        raise ValueError("source dataset must be labeled")
    n = len(source_dataset)
    if n < 2:
        raise ValueError(f"dataset too small to split into two halves (n={n})")
    half_a = source_dataset.subset(slice(0, n // 2))
    half_b = source_dataset.subset(slice(n // 2, n))

    source = replace(half_a, domain=Domain.REAL_SOURCE)
    synth_target = Dataset(
        analytic_translate(half_a.pixels, params, Direction.S2T),
        half_a.labels.copy(),
        Domain.SYNTH_TARGET,
        half_a.pair_ids.copy(),
    )
    target_pixels = analytic_translate(half_b.pixels, params, Direction.S2T)
    target = Dataset(target_pixels, None, Domain.REAL_TARGET, half_b.pair_ids.copy(), eval_labels=half_b.labels.copy())
    synth_source = Dataset(
        analytic_translate(target_pixels, params, Direction.T2S),
        None,
        Domain.SYNTH_SOURCE,
        half_b.pair_ids.copy(),
    )
    return source, synth_target, target, synth_source


@dataclass(frozen=True)
class BatchComposition:
    """Per-stream batch fractions (real source, synth target, real target, synth source)."""

    fractions: tuple[float, float, float, float] = (0.35, 0.15, 0.35, 0.15)
    batch_size: int = 64

    def __post_init__(self):
        if len(self.fractions) != 4:
            raise ValueError("need exactly four stream fractions")
        if any(f < 0 for f in self.fractions):
            raise ValueError(f"fractions must be nonnegative, got {self.fractions}")
        if abs(sum(self.fractions) - 1.0) > 1e-9:
            raise ValueError(f"fractions must sum to 1, got sum={sum(self.fractions)}")
        if self.batch_size <= 0:
            raise ValueError(f"batch_size must be positive, got {self.batch_size}")

    def counts(self) -> tuple[int, int, int, int]:
        return largest_remainder_counts(self.fractions, self.batch_size)

    def to_dict(self) -> dict:
        return {"fractions": list(self.fractions), "batch_size": self.batch_size}

    @classmethod
    def from_dict(cls, d) -> "BatchComposition":
        return cls(fractions=tuple(float(f) for f in d["fractions"]), batch_size=int(d["batch_size"]))


def largest_remainder_counts(fractions, total: int) -> tuple[int, ...]:
    """Integer counts summing to total; floor then award leftovers by remainder."""
    exact = [f * total for f in fractions]
    base = [math.floor(e) for e in exact]
    leftover = total - sum(base)
    # ties broken by stream order
    order = sorted(range(len(fractions)), key=lambda i: (-(exact[i] - base[i]), i))
    for i in order[:leftover]:
        base[i] += 1
    return tuple(base)


@dataclass(frozen=True)
class StreamBatch:
    """One stream's slice of a batch plus the paired partner images.

    partner_pixels[i] is the style-map partner of pixels[i] (same pair_id):
    the translation for a real sample, the original for a synthetic one.
    """

    pixels: np.ndarray
    labels: np.ndarray | None
    pair_ids: np.ndarray
    partner_pixels: np.ndarray

    def __len__(self) -> int:
        return self.pixels.shape[0]


@dataclass(frozen=True)
class Batch:
    real_source: StreamBatch
    synth_target: StreamBatch
    real_target: StreamBatch
    synth_source: StreamBatch
    step: int

    def streams(self) -> tuple[StreamBatch, StreamBatch, StreamBatch, StreamBatch]:
        return (self.real_source, self.synth_target, self.real_target, self.synth_source)


def _draw(ds: Dataset, partner: Dataset, count: int, rng: np.random.Generator, name: str) -> StreamBatch:
    if count > 0 and len(ds) == 0:
        raise ValueError(f"stream {name} is empty but its batch fraction is nonzero")
    if count == 0:
        empty = np.zeros((0,) + ds.pixels.shape[1:], dtype=ds.pixels.dtype)
        labels = None if ds.labels is None else np.zeros(0, dtype=np.int64)
        return StreamBatch(empty, labels, np.zeros(0, dtype=np.int64), empty.copy())
    idx = rng.choice(len(ds), size=count, replace=count > len(ds))
    pair_ids = ds.pair_ids[idx]
    lookup = {int(pid): j for j, pid in enumerate(partner.pair_ids)}
    try:
        partner_rows = np.array([lookup[int(pid)] for pid in pair_ids])
    except KeyError as e:
        raise ValueError(f"stream {name}: no pair partner for pair_id {e.args[0]}") from None
    labels = None if ds.labels is None else ds.labels[idx]
    return StreamBatch(ds.pixels[idx], labels, pair_ids, partner.pixels[partner_rows])


def compose_batch(
    streams: tuple[Dataset, Dataset, Dataset, Dataset],
    comp: BatchComposition,
    seed: int,
    step: int,
) -> Batch:
    """Deterministic batch for (seed, step) with coherent real/synth pairs."""
    real_source, synth_target, real_target, synth_source = streams
    counts = comp.counts()
    rng = np.random.default_rng([seed, step])
    return Batch(
        real_source=_draw(real_source, synth_target, counts[0], rng, Domain.REAL_SOURCE.value),
        synth_target=_draw(synth_target, real_source, counts[1], rng, Domain.SYNTH_TARGET.value),
        real_target=_draw(real_target, synth_source, counts[2], rng, Domain.REAL_TARGET.value),
        synth_source=_draw(synth_source, real_target, counts[3], rng, Domain.SYNTH_SOURCE.value),
        step=step,
    )


def save_dataset_cache(ds: Dataset, cache_dir) -> None:
    """Raw little-endian float32 pixel file plus JSON sidecar (and label files)."""
    cache_dir = Path(cache_dir)
    cache_dir.mkdir(parents=True, exist_ok=True)
    (cache_dir / "pixels.bin").write_bytes(np.ascontiguousarray(ds.pixels, dtype="<f4").tobytes())
    meta = {
        "shape": list(ds.pixels.shape),
        "dtype": "float32",
        "labels_present": ds.labels is not None,
        "eval_labels_present": ds.eval_labels is not None,
        "domain": ds.domain.value,
    }
    (cache_dir / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    (cache_dir / "pair_ids.bin").write_bytes(ds.pair_ids.astype("<i8").tobytes())
    if ds.labels is not None:
        (cache_dir / "labels.bin").write_bytes(ds.labels.astype("<i8").tobytes())
    if ds.eval_labels is not None:
        (cache_dir / "eval_labels.bin").write_bytes(ds.eval_labels.astype("<i8").tobytes())


def load_dataset_cache(cache_dir) -> Dataset:
    cache_dir = Path(cache_dir)
    meta = json.loads((cache_dir / "meta.json").read_text())
    if meta["dtype"] != "float32":
        raise ValueError(f"unsupported cache dtype {meta['dtype']}")
    shape = tuple(meta["shape"])
    pixels = np.frombuffer((cache_dir / "pixels.bin").read_bytes(), dtype="<f4").reshape(shape).copy()
    pair_ids = np.frombuffer((cache_dir / "pair_ids.bin").read_bytes(), dtype="<i8").copy()
    labels = None
    if meta["labels_present"]:
        labels = np.frombuffer((cache_dir / "labels.bin").read_bytes(), dtype="<i8").copy()
    eval_labels = None
    if meta.get("eval_labels_present"):
        eval_labels = np.frombuffer((cache_dir / "eval_labels.bin").read_bytes(), dtype="<i8").copy()
    return Dataset(pixels, labels, Domain(meta["domain"]), pair_ids, eval_labels)

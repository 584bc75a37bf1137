"""Exactly invertible cross-domain style translation and GAN-style loss terms.

The style map is a fixed per-pixel affine field: source-to-target computes
``a * x + c`` and target-to-source inverts it exactly as ``(x - c) / a``.
Pairing real and translated images through a known inverse is what lets the
rest of the framework (attention alignment, EM self-training) be exercised
without training an image translator. Translated values may leave [0, 1];
they are consumed unclamped because clamping would break invertibility.

The adversarial / cycle-consistency losses are plain batch computations kept
here for unit testing and diagnostics; no generator or discriminator is ever
trained in this package.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum
from typing import Mapping

import numpy as np

PROB_EPS = 1e-7  # discriminator outputs clamped to [PROB_EPS, 1 - PROB_EPS] before logs


class Direction(Enum):
    """Translation direction between source style and target style."""

    S2T = "s2t"
    T2S = "t2s"


def _bilinear_upsample(grid: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    kh, kw = grid.shape
    h, w = shape
    ys = np.linspace(0.0, kh - 1.0, h)
    xs = np.linspace(0.0, kw - 1.0, w)
    y0 = np.clip(np.floor(ys).astype(int), 0, kh - 2)
    x0 = np.clip(np.floor(xs).astype(int), 0, kw - 2)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    tl = grid[np.ix_(y0, x0)]
    bl = grid[np.ix_(y0 + 1, x0)]
    tr = grid[np.ix_(y0, x0 + 1)]
    br = grid[np.ix_(y0 + 1, x0 + 1)]
    return tl * (1 - fy) * (1 - fx) + bl * fy * (1 - fx) + tr * (1 - fy) * fx + br * fy * fx


def smooth_offset_field(
    seed: int, shape: tuple[int, int], low: float, high: float, knots: int = 5
) -> np.ndarray:
    """Seeded smooth texture with values spanning exactly [low, high]."""
    rng = np.random.default_rng(seed)
    coarse = rng.uniform(0.0, 1.0, size=(knots, knots))
    field = _bilinear_upsample(coarse, shape)
    lo, hi = float(field.min()), float(field.max())
    if hi - lo < 1e-12:
        return np.full(shape, 0.5 * (low + high))
    return low + (high - low) * (field - lo) / (hi - lo)


@dataclass(frozen=True)
class StyleMapConfig:
    """Serializable recipe for a style map; a run is reproducible from this alone."""

    a_min: float = 0.1
    scale_spec: float = -0.8
    offset_seed: int = 7
    offset_range: tuple[float, float] = (0.85, 1.0)
    shape: tuple[int, int] = (28, 28)

    def to_dict(self) -> dict:
        return {
            "a_min": self.a_min,
            "scale_spec": self.scale_spec,
            "offset_seed": self.offset_seed,
            "offset_range": list(self.offset_range),
            "shape": list(self.shape),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "StyleMapConfig":
        return cls(
            a_min=float(d["a_min"]),
            scale_spec=float(d["scale_spec"]),
            offset_seed=int(d["offset_seed"]),
            offset_range=tuple(float(v) for v in d["offset_range"]),
            shape=tuple(int(v) for v in d["shape"]),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "StyleMapConfig":
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True)
class StyleMapParams:
    """Per-pixel affine style map. Immutable after construction.

    scale: multiplicative field ``a`` with |a| >= a_min everywhere.
    offset: additive texture field ``c`` with the spatial shape of the images.
    """

    scale: np.ndarray
    offset: np.ndarray
    a_min: float
    config: StyleMapConfig | None = None

    def __post_init__(self):
        scale = np.asarray(self.scale, dtype=np.float64)
        offset = np.asarray(self.offset, dtype=np.float64)
        if self.a_min <= 0:
            raise ValueError(f"a_min must be positive, got {self.a_min}")
        if scale.shape not in ((), offset.shape):
            raise ValueError(f"scale shape {scale.shape} incompatible with offset shape {offset.shape}")
        if np.any(np.abs(scale) < self.a_min):
            raise ValueError(f"|scale| must be >= a_min={self.a_min} everywhere")
        if not np.all(np.isfinite(offset)):
            raise ValueError("offset field must be finite everywhere")
        scale.setflags(write=False)
        offset.setflags(write=False)
        object.__setattr__(self, "scale", scale)
        object.__setattr__(self, "offset", offset)

    @property
    def spatial_shape(self) -> tuple[int, int]:
        return tuple(self.offset.shape)


def build_style_map(config: StyleMapConfig) -> StyleMapParams:
    """Materialize the affine fields described by a StyleMapConfig."""
    low, high = config.offset_range
    offset = smooth_offset_field(config.offset_seed, config.shape, low, high)
    scale = np.full(config.shape, config.scale_spec, dtype=np.float64)
    return StyleMapParams(scale=scale, offset=offset, a_min=config.a_min, config=config)


def analytic_translate(x: np.ndarray, params: StyleMapParams, direction: Direction) -> np.ndarray:
    """Apply the affine style map (S2T: a*x + c) or its exact inverse (T2S).

    Accepts any array whose trailing two axes match the style map's spatial
    shape, e.g. (H, W), (C, H, W) or (N, C, H, W). Preserves the input dtype.
    """
    x = np.asarray(x)
    if x.ndim < 2 or tuple(x.shape[-2:]) != params.spatial_shape:
        raise ValueError(
            f"image spatial shape {x.shape[-2:] if x.ndim >= 2 else x.shape} "
            f"does not match style map shape {params.spatial_shape}"
        )
    if not isinstance(direction, Direction):
        raise ValueError(f"invalid direction {direction!r}")
    if direction is Direction.S2T:
        out = params.scale * x + params.offset
    else:
        out = (x - params.offset) / params.scale
    return out.astype(x.dtype, copy=False)


@dataclass(frozen=True)
class GanLossInputs:
    """Inputs for the adversarial / cycle losses.

    d_real / d_fake map each translation direction to the corresponding
    discriminator outputs (probabilities on real vs translated samples);
    the S2T entry is the target-domain discriminator's view, T2S the
    source-domain discriminator's.
    """

    d_real: Mapping[Direction, np.ndarray]
    d_fake: Mapping[Direction, np.ndarray]
    recon_s: np.ndarray
    recon_t: np.ndarray
    orig_s: np.ndarray
    orig_t: np.ndarray
    lambda_cyc: float


def gan_adversarial_loss(inputs: GanLossInputs, direction: Direction) -> float:
    """mean(log d_real) + mean(log(1 - d_fake)) for the given direction."""
    d_real = np.asarray(inputs.d_real[direction], dtype=np.float64)
    d_fake = np.asarray(inputs.d_fake[direction], dtype=np.float64)
    if d_real.size == 0 or d_fake.size == 0:
        raise ValueError("adversarial loss needs a non-empty batch")
    d_real = np.clip(d_real, PROB_EPS, 1.0 - PROB_EPS)
    d_fake = np.clip(d_fake, PROB_EPS, 1.0 - PROB_EPS)
    return float(np.mean(np.log(d_real)) + np.mean(np.log(1.0 - d_fake)))


def cycle_consistency_loss(inputs: GanLossInputs) -> float:
    """Batch-mean of per-image L1 reconstruction error, summed over both sides."""
    total = 0.0
    for recon, orig in ((inputs.recon_s, inputs.orig_s), (inputs.recon_t, inputs.orig_t)):
        recon = np.asarray(recon, dtype=np.float64)
        orig = np.asarray(orig, dtype=np.float64)
        if recon.shape != orig.shape:
            raise ValueError(f"reconstruction shape {recon.shape} != original shape {orig.shape}")
        if recon.size == 0:
            raise ValueError("cycle loss needs a non-empty batch")
        per_image = np.abs(recon - orig).reshape(recon.shape[0], -1).sum(axis=1)
        total += float(per_image.mean())
    return total


def cyclegan_full_loss(inputs: GanLossInputs) -> float:
    """Both adversarial terms plus lambda times the cycle-consistency term."""
    if inputs.lambda_cyc < 0:
        raise ValueError(f"lambda_cyc must be nonnegative, got {inputs.lambda_cyc}")
    return (
        gan_adversarial_loss(inputs, Direction.S2T)
        + gan_adversarial_loss(inputs, Direction.T2S)
        + inputs.lambda_cyc * cycle_consistency_loss(inputs)
    )

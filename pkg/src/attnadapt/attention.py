"""Spatial attention maps and the source/target alignment penalty.

An attention map aggregates a layer's feature-map channels into one
nonnegative spatial map (sum of squares by default). The alignment penalty
compares L2-normalized, vectorized attention maps between the frozen source
network and the trainable target network over four sample groups:

  (i)   real source images through both networks,
  (ii)  source net on a real source image vs target net on its translation,
  (iii) synthetic source images through both networks,
  (iv)  source net on a synthetic source image vs target net on its real
        target partner.

Gradients are expected to flow only into the target side; callers forward
the source network under no_grad.
"""

from __future__ import annotations

from typing import Mapping, Sequence

import torch

from .datagen import Batch
from .discrepancy import KernelSet, gaussian_mmd, joint_mmd, median_heuristic_kernels
from .model import Network

ATTENTION_MODES = ("sumsq", "sumabs", "maxabs", "raw")
MEASURES = ("l2", "l1", "mmd", "jmmd")

NORM_EPS = 1e-8


def attention_map(features: torch.Tensor, mode: str = "sumsq") -> torch.Tensor:
    """Aggregate channels of (..., C, H, W) features into spatial maps.

    sumsq/sumabs/maxabs reduce the channel axis; raw returns the features
    unchanged (the align-feature-maps-directly ablation).
    """
    if features.numel() == 0:
        raise ValueError("attention_map: empty feature tensor")
    if features.ndim < 3:
        raise ValueError(f"attention_map: expected (..., C, H, W), got shape {tuple(features.shape)}")
    if mode == "sumsq":
        return (features * features).sum(dim=-3)
    if mode == "sumabs":
        return features.abs().sum(dim=-3)
    if mode == "maxabs":
        return features.abs().amax(dim=-3)
    if mode == "raw":
        return features
    raise ValueError(f"unknown attention mode {mode!r}; expected one of {ATTENTION_MODES}")


def normalize_attention(a: torch.Tensor, eps: float = NORM_EPS) -> torch.Tensor:
    """Flatten per sample and divide by max(L2 norm, eps); zero maps stay zero.

    A 2-D (or higher) input with a leading batch axis is normalized row-wise;
    a 1-D input is treated as a single vectorized map.
    """
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    if a.ndim == 1:
        flat = a.reshape(1, -1)
        return (flat / torch.linalg.vector_norm(flat, dim=1, keepdim=True).clamp_min(eps)).reshape(-1)
    flat = a.reshape(a.shape[0], -1)
    return flat / torch.linalg.vector_norm(flat, dim=1, keepdim=True).clamp_min(eps)


def _pair_distances(a_src: torch.Tensor, a_tgt: torch.Tensor) -> torch.Tensor:
    """Per-sample L2 distances with an exact-zero-safe gradient."""
    sq = ((a_src - a_tgt) ** 2).sum(dim=1)
    out = torch.zeros_like(sq)
    nonzero = sq > 0
    if bool(nonzero.any()):
        out[nonzero] = torch.sqrt(sq[nonzero])
    return out


def _group_vectors(
    source_taps: Mapping[int, torch.Tensor],
    target_taps: Mapping[int, torch.Tensor],
    layer: int,
    mode: str,
    eps: float,
) -> tuple[torch.Tensor, torch.Tensor] | None:
    if layer not in source_taps or layer not in target_taps:
        raise ValueError(f"layer {layer} missing from taps")
    f_src, f_tgt = source_taps[layer], target_taps[layer]
    if f_src.shape[0] != f_tgt.shape[0]:
        raise ValueError(
            f"pairing mismatch at layer {layer}: {f_src.shape[0]} source rows vs {f_tgt.shape[0]} target rows"
        )
    if f_src.shape[0] == 0:
        return None
    return (
        normalize_attention(attention_map(f_src, mode), eps),
        normalize_attention(attention_map(f_tgt, mode), eps),
    )


def attention_alignment_loss(
    source_taps: Sequence[Mapping[int, torch.Tensor]],
    target_taps: Sequence[Mapping[int, torch.Tensor]],
    mode: str = "sumsq",
    layer_set: Sequence[int] = (1, 2),
    eps: float = NORM_EPS,
) -> torch.Tensor:
    """Summed normalized-attention L2 distances over layers and term groups.

    source_taps[g] and target_taps[g] hold one term group's taps; row i of a
    group's source tensors is paired with row i of its target tensors. Each
    group contributes the mean of its per-sample distances, so the value is
    batch-size independent.
    """
    if len(layer_set) == 0:
        raise ValueError("layer_set must not be empty")
    if len(source_taps) != len(target_taps):
        raise ValueError("source and target term groups must align")
    total = None
    for layer in layer_set:
        for src_group, tgt_group in zip(source_taps, target_taps):
            if not src_group:  # empty stream contributes nothing
                continue
            vectors = _group_vectors(src_group, tgt_group, layer, mode, eps)
            if vectors is None:
                continue
            a_src, a_tgt = vectors
            term = _pair_distances(a_src, a_tgt).mean()
            total = term if total is None else total + term
    if total is None:
        return torch.zeros(())
    return total


def attention_discrepancy_loss(
    source_taps: Sequence[Mapping[int, torch.Tensor]],
    target_taps: Sequence[Mapping[int, torch.Tensor]],
    measure: str = "l2",
    mode: str = "sumsq",
    layer_set: Sequence[int] = (1, 2),
    kernels: Mapping[int, KernelSet] | KernelSet | None = None,
    eps: float = NORM_EPS,
) -> torch.Tensor:
    """Alignment loss with a swappable discrepancy measure.

    l2 is the alignment penalty above; l1 replaces the per-pair distance;
    mmd/jmmd treat the pooled normalized attention vectors of the source and
    target sides as two samples per layer (source side detached). kernels may
    pin bandwidths (per layer or shared); otherwise the median heuristic is
    applied per call.
    """
    if measure == "l2":
        return attention_alignment_loss(source_taps, target_taps, mode, layer_set, eps)
    if len(layer_set) == 0:
        raise ValueError("layer_set must not be empty")

    if measure == "l1":
        total = None
        for layer in layer_set:
            for src_group, tgt_group in zip(source_taps, target_taps):
                if not src_group:
                    continue
                vectors = _group_vectors(src_group, tgt_group, layer, mode, eps)
                if vectors is None:
                    continue
                a_src, a_tgt = vectors
                term = (a_src - a_tgt).abs().sum(dim=1).mean()
                total = term if total is None else total + term
        return torch.zeros(()) if total is None else total

    if measure not in ("mmd", "jmmd"):
        raise ValueError(f"unknown measure {measure!r}; expected one of {MEASURES}")

    per_layer_x: dict[int, torch.Tensor] = {}
    per_layer_y: dict[int, torch.Tensor] = {}
    for layer in layer_set:
        xs, ys = [], []
        for src_group, tgt_group in zip(source_taps, target_taps):
            if not src_group:
                continue
            vectors = _group_vectors(src_group, tgt_group, layer, mode, eps)
            if vectors is None:
                continue
            a_src, a_tgt = vectors
            xs.append(a_src.detach())
            ys.append(a_tgt)
        if not xs:
            continue
        per_layer_x[layer] = torch.cat(xs)
        per_layer_y[layer] = torch.cat(ys)
    if not per_layer_x:
        return torch.zeros(())

    def kernels_for(layer: int) -> KernelSet:
        if isinstance(kernels, KernelSet):
            return kernels
        if kernels is not None and layer in kernels:
            return kernels[layer]
        return median_heuristic_kernels(per_layer_x[layer], per_layer_y[layer])

    layers = [l for l in layer_set if l in per_layer_x]
    if measure == "mmd":
        total = None
        for layer in layers:
            term = gaussian_mmd(per_layer_x[layer], per_layer_y[layer], kernels_for(layer), estimator="biased")
            total = term if total is None else total + term
        return total
    return joint_mmd(
        [per_layer_x[l] for l in layers],
        [per_layer_y[l] for l in layers],
        [kernels_for(l) for l in layers],
        estimator="biased",
    )


def alignment_term_groups(
    source_net: Network, target_net: Network, batch: Batch, dtype: torch.dtype = torch.float32
) -> tuple[list[dict[int, torch.Tensor]], list[dict[int, torch.Tensor]]]:
    """Forward a batch through both networks and build the four term groups.

    The source network runs under no_grad so gradients reach only the target
    network. Convenience path; the trainer fuses these forwards instead.
    """
    rs, st, rt, ss = batch.real_source, batch.synth_target, batch.real_target, batch.synth_source

    def fwd(net: Network, pixels, grad: bool) -> dict[int, torch.Tensor]:
        if pixels.shape[0] == 0:
            return {}
        x = torch.as_tensor(pixels, dtype=dtype)
        if grad:
            return net.forward_with_taps(x).taps
        with torch.no_grad():
            return net.forward_with_taps(x).taps

    source_taps = [
        fwd(source_net, rs.pixels, False),
        fwd(source_net, st.partner_pixels, False),
        fwd(source_net, ss.pixels, False),
        fwd(source_net, rt.partner_pixels, False),
    ]
    target_taps = [
        fwd(target_net, rs.pixels, True),
        fwd(target_net, st.pixels, True),
        fwd(target_net, ss.pixels, True),
        fwd(target_net, rt.pixels, True),
    ]
    return source_taps, target_taps


def alignment_loss_for_batch(
    source_net: Network,
    target_net: Network,
    batch: Batch,
    measure: str = "l2",
    mode: str = "sumsq",
    layer_set: Sequence[int] = (1, 2),
    kernels: Mapping[int, KernelSet] | KernelSet | None = None,
    eps: float = NORM_EPS,
    dtype: torch.dtype = torch.float32,
) -> torch.Tensor:
    source_taps, target_taps = alignment_term_groups(source_net, target_net, batch, dtype)
    return attention_discrepancy_loss(source_taps, target_taps, measure, mode, layer_set, kernels, eps)

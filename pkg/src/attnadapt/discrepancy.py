"""Alternative attention discrepancy measures: L1, multi-kernel MMD, joint MMD.

These are set-level (or per-pair, for L1) distances used to swap out the
default alignment penalty in the measure-comparison experiment. All return
torch scalars and are differentiable so they can serve directly as losses.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch

MEDIAN_MULTIPLIERS = (0.25, 0.5, 1.0, 2.0, 4.0)


@dataclass(frozen=True)
class KernelSet:
    """Gaussian kernel bandwidths (sigma values) for a multi-kernel estimate."""

    bandwidths: tuple[float, ...]
    from_median: bool = False

    def __post_init__(self):
        bandwidths = tuple(float(b) for b in self.bandwidths)
        object.__setattr__(self, "bandwidths", bandwidths)
        if not bandwidths:
            raise ValueError("KernelSet needs at least one bandwidth")
        if any(b <= 0 for b in bandwidths):
            raise ValueError(f"bandwidths must be positive, got {bandwidths}")


def _as_matrix(x, name: str) -> torch.Tensor:
    t = torch.as_tensor(x)
    if t.ndim != 2:
        raise ValueError(f"{name} must be a 2-D (samples x features) array, got shape {tuple(t.shape)}")
    return t


def median_heuristic_kernels(
    X, Y, multipliers: Sequence[float] = MEDIAN_MULTIPLIERS
) -> KernelSet:
    """Median pairwise distance of the pooled sample, scaled by multipliers."""
    X, Y = _as_matrix(X, "X"), _as_matrix(Y, "Y")
    with torch.no_grad():
        pooled = torch.cat([X, Y]).double()
        d = torch.cdist(pooled, pooled)
        n = d.shape[0]
        iu = torch.triu_indices(n, n, offset=1)
        med = float(d[iu[0], iu[1]].median()) if n > 1 else 0.0
    if med <= 0:
        med = 1.0
    return KernelSet(tuple(med * m for m in multipliers), from_median=True)


def _sq_dists(A: torch.Tensor, B: torch.Tensor) -> torch.Tensor:
    d = (A * A).sum(1)[:, None] + (B * B).sum(1)[None, :] - 2.0 * (A @ B.T)
    return d.clamp_min(0.0)


def _gram(A: torch.Tensor, B: torch.Tensor, kernels: KernelSet) -> torch.Tensor:
    d = _sq_dists(A, B)
    g = torch.zeros_like(d)
    for sigma in kernels.bandwidths:
        g = g + torch.exp(-d / (2.0 * sigma * sigma))
    return g


def _mmd_from_grams(kxx: torch.Tensor, kyy: torch.Tensor, kxy: torch.Tensor, estimator: str) -> torch.Tensor:
    n, m = kxx.shape[0], kyy.shape[0]
    if estimator == "biased":
        return kxx.mean() + kyy.mean() - 2.0 * kxy.mean()
    if estimator == "unbiased":
        if n < 2 or m < 2:
            raise ValueError(f"unbiased estimator needs n, m >= 2, got n={n}, m={m}")
        xx = (kxx.sum() - kxx.diagonal().sum()) / (n * (n - 1))
        yy = (kyy.sum() - kyy.diagonal().sum()) / (m * (m - 1))
        return xx + yy - 2.0 * kxy.mean()
    raise ValueError(f"unknown estimator {estimator!r}; expected 'biased' or 'unbiased'")


def gaussian_mmd(X, Y, kernels: KernelSet, estimator: str = "biased") -> torch.Tensor:
    """Multi-kernel squared-MMD estimate between samples X (n x d) and Y (m x d)."""
    X, Y = _as_matrix(X, "X"), _as_matrix(Y, "Y")
    if X.shape[1] != Y.shape[1]:
        raise ValueError(f"feature dims differ: {X.shape[1]} vs {Y.shape[1]}")
    return _mmd_from_grams(_gram(X, X, kernels), _gram(Y, Y, kernels), _gram(X, Y, kernels), estimator)


def joint_mmd(
    layers_X: Sequence, layers_Y: Sequence, kernels: Sequence[KernelSet], estimator: str = "biased"
) -> torch.Tensor:
    """MMD with the product-over-layers kernel (joint distribution embedding)."""
    if len(layers_X) != len(layers_Y):
        raise ValueError(f"layer count mismatch: {len(layers_X)} vs {len(layers_Y)}")
    if len(layers_X) == 0:
        raise ValueError("joint_mmd needs at least one layer")
    if len(kernels) != len(layers_X):
        raise ValueError("need one KernelSet per layer")
    kxx = kyy = kxy = None
    n = m = None
    for lx, ly, ks in zip(layers_X, layers_Y, kernels):
        Xl, Yl = _as_matrix(lx, "layers_X"), _as_matrix(ly, "layers_Y")
        if Xl.shape[1] != Yl.shape[1]:
            raise ValueError(f"feature dims differ in a layer: {Xl.shape[1]} vs {Yl.shape[1]}")
        if n is None:
            n, m = Xl.shape[0], Yl.shape[0]
        elif (Xl.shape[0], Yl.shape[0]) != (n, m):
            raise ValueError("all layers must share their sample counts")
        gxx, gyy, gxy = _gram(Xl, Xl, ks), _gram(Yl, Yl, ks), _gram(Xl, Yl, ks)
        kxx = gxx if kxx is None else kxx * gxx
        kyy = gyy if kyy is None else kyy * gyy
        kxy = gxy if kxy is None else kxy * gxy
    return _mmd_from_grams(kxx, kyy, kxy, estimator)


def attention_l1_distance(a, b) -> torch.Tensor:
    """Elementwise absolute difference summed over two equal-length vectors."""
    a, b = torch.as_tensor(a), torch.as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    return (a - b).abs().sum()

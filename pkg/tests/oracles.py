"""Independent scalar-loop reference implementations used by the test suite.

These stay deliberately naive (python loops, math.exp) so they share no code
path with the vectorized implementations they check.
"""

import math

import numpy as np


def attention_map_oracle(features: np.ndarray, mode: str) -> np.ndarray:
    """Reference channel aggregation for a single (C, H, W) feature tensor."""
    c, h, w = features.shape
    out = np.zeros((h, w))
    for i in range(h):
        for j in range(w):
            vals = [features[ch, i, j] for ch in range(c)]
            if mode == "sumsq":
                out[i, j] = sum(v * v for v in vals)
            elif mode == "sumabs":
                out[i, j] = sum(abs(v) for v in vals)
            elif mode == "maxabs":
                out[i, j] = max(abs(v) for v in vals)
            else:
                raise ValueError(mode)
    return out


def mmd_scalar_oracle(X, Y, bandwidths, estimator: str) -> float:
    """Triple-loop multi-kernel squared-MMD estimate."""
    X, Y = np.asarray(X, dtype=np.float64), np.asarray(Y, dtype=np.float64)
    n, m = len(X), len(Y)

    def k(a, b):
        d2 = sum((ai - bi) ** 2 for ai, bi in zip(a, b))
        return sum(math.exp(-d2 / (2.0 * s * s)) for s in bandwidths)

    if estimator == "biased":
        xx = sum(k(X[i], X[j]) for i in range(n) for j in range(n)) / (n * n)
        yy = sum(k(Y[i], Y[j]) for i in range(m) for j in range(m)) / (m * m)
    else:
        xx = sum(k(X[i], X[j]) for i in range(n) for j in range(n) if i != j) / (n * (n - 1))
        yy = sum(k(Y[i], Y[j]) for i in range(m) for j in range(m) if i != j) / (m * (m - 1))
    xy = sum(k(X[i], Y[j]) for i in range(n) for j in range(m)) / (n * m)
    return xx + yy - 2.0 * xy


def jmmd_scalar_oracle(layers_X, layers_Y, kernel_sets, estimator: str) -> float:
    """Product-kernel (joint) squared-MMD estimate."""
    n, m = len(layers_X[0]), len(layers_Y[0])

    def k(idx_a, idx_b, side_a, side_b):
        prod = 1.0
        for lx, ly, ks in zip(layers_X, layers_Y, kernel_sets):
            a = (lx if side_a == "x" else ly)[idx_a]
            b = (lx if side_b == "x" else ly)[idx_b]
            d2 = sum((ai - bi) ** 2 for ai, bi in zip(a, b))
            prod *= sum(math.exp(-d2 / (2.0 * s * s)) for s in ks.bandwidths)
        return prod

    if estimator == "biased":
        xx = sum(k(i, j, "x", "x") for i in range(n) for j in range(n)) / (n * n)
        yy = sum(k(i, j, "y", "y") for i in range(m) for j in range(m)) / (m * m)
    else:
        xx = sum(k(i, j, "x", "x") for i in range(n) for j in range(n) if i != j) / (n * (n - 1))
        yy = sum(k(i, j, "y", "y") for i in range(m) for j in range(m) if i != j) / (m * (m - 1))
    xy = sum(k(i, j, "x", "y") for i in range(n) for j in range(m)) / (n * m)
    return xx + yy - 2.0 * xy


def normalized_l2_distance_oracle(src_map, tgt_map, eps: float = 1e-8) -> float:
    """Normalized-attention L2 distance between two flattened maps."""
    s = [float(v) for v in np.asarray(src_map).ravel()]
    t = [float(v) for v in np.asarray(tgt_map).ravel()]
    ns = math.sqrt(sum(v * v for v in s))
    nt = math.sqrt(sum(v * v for v in t))
    s = [v / max(ns, eps) for v in s]
    t = [v / max(nt, eps) for v in t]
    return math.sqrt(sum((a - b) ** 2 for a, b in zip(s, t)))

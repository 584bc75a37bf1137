"""Procedural stroke glyphs: a small self-contained image classification domain.

Each class is a fixed set of stroke segments drawn in a 28x28 frame; samples
vary by a small random rotation, translation and stroke thickness. Strokes
render near 1.0 on a 0.0 background, so the affine style map (negative scale,
bright textured offset) produces a strong, controlled domain shift.
"""

from __future__ import annotations

import numpy as np

GLYPH_SIZE = 28

# (x1, y1, x2, y2) stroke endpoints per class, pixel coordinates.
_STROKES: tuple[tuple[tuple[float, float, float, float], ...], ...] = (
    ((14, 6, 14, 22),),                                                # vertical bar
    ((6, 14, 22, 14),),                                                # horizontal bar
    ((7, 7, 21, 21), (21, 7, 7, 21)),                                  # X
    ((8, 8, 20, 8), (20, 8, 20, 20), (20, 20, 8, 20), (8, 20, 8, 8)),  # box
    ((14, 7, 14, 21), (7, 14, 21, 14)),                                # plus
    ((20, 6, 8, 22),),                                                 # slash
    ((7, 8, 21, 8), (14, 8, 14, 22)),                                  # T
    ((9, 6, 9, 21), (9, 21, 21, 21)),                                  # L
    ((8, 8, 20, 8), (20, 8, 8, 20), (8, 20, 20, 20)),                  # Z
    ((8, 7, 14, 21), (20, 7, 14, 21)),                                 # V
)

_CENTER = (GLYPH_SIZE - 1) / 2.0
_EDGE = 0.8  # antialiasing band width in pixels


def num_glyph_classes() -> int:
    return len(_STROKES)


def _segment_distance(gx: np.ndarray, gy: np.ndarray, seg: tuple[float, float, float, float]) -> np.ndarray:
    x1, y1, x2, y2 = seg
    dx, dy = x2 - x1, y2 - y1
    length_sq = dx * dx + dy * dy
    if length_sq == 0.0:
        return np.hypot(gx - x1, gy - y1)
    t = np.clip(((gx - x1) * dx + (gy - y1) * dy) / length_sq, 0.0, 1.0)
    return np.hypot(gx - (x1 + t * dx), gy - (y1 + t * dy))


def render_glyph(class_id: int, rng: np.random.Generator, size: int = GLYPH_SIZE) -> np.ndarray:
    """Render one jittered glyph as a (size, size) float32 image in [0, 1].

    Consumes exactly four draws from ``rng`` (rotation, dx, dy, thickness),
    so a shared generator yields a reproducible sample sequence.
    """
    if not 0 <= class_id < len(_STROKES):
        raise ValueError(f"class_id {class_id} out of range [0, {len(_STROKES)})")
    theta = rng.uniform(-0.15, 0.15)
    shift_x = rng.uniform(-2.0, 2.0)
    shift_y = rng.uniform(-2.0, 2.0)
    radius = rng.uniform(1.0, 1.7)

    cos_t, sin_t = np.cos(theta), np.sin(theta)
    gy, gx = np.mgrid[0:size, 0:size].astype(np.float64)
    img = np.zeros((size, size), dtype=np.float64)
    for x1, y1, x2, y2 in _STROKES[class_id]:
        pts = []
        for px, py in ((x1, y1), (x2, y2)):
            rx = cos_t * (px - _CENTER) - sin_t * (py - _CENTER) + _CENTER + shift_x
            ry = sin_t * (px - _CENTER) + cos_t * (py - _CENTER) + _CENTER + shift_y
            pts.extend([rx, ry])
        dist = _segment_distance(gx, gy, tuple(pts))
        np.maximum(img, np.clip((radius - dist) / _EDGE, 0.0, 1.0), out=img)
    return img.astype(np.float32)

"""Image distances: pixelwise cosine feature distance, its image mean,
soft-mask IoU distance, and their weighted combination.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import MissingChannel, ShapeMismatch, ZeroFeature

_NORM_FLOOR = 1e-12


@dataclass
class FeatureImage:
    """Dense per-pixel descriptor grid, (H, W, C)."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 3 or min(v.shape) < 1:
            raise ValueError("feature image must be (H, W, C) with all dims >= 1")
        if not np.all(np.isfinite(v)):
            raise ValueError("feature image must be finite")
        self.values = v

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def channels(self) -> int:
        return self.values.shape[2]


@dataclass(frozen=True)
class DistanceWeights:
    lambda_feat: float = 1.0
    lambda_iou: float = 0.0

    def __post_init__(self):
        if self.lambda_feat < 0 or self.lambda_iou < 0:
            raise ValueError("distance weights must be non-negative")
        if self.lambda_feat == 0 and self.lambda_iou == 0:
            raise ValueError("at least one distance weight must be nonzero")


def bilinear_lookup(values: np.ndarray, u) -> np.ndarray:
    """Sample (H, W, C) at continuous pixel coordinates u = (x, y).

    Pixel centers sit at half-integers; coordinates clamp to the edge pixels.
    Accepts a single (2,) coordinate or a batch (..., 2).
    """
    v = np.asarray(values, dtype=float)
    u = np.asarray(u, dtype=float)
    single = u.ndim == 1
    uu = u.reshape(-1, 2)
    hh, ww = v.shape[:2]
    x = np.clip(uu[:, 0] - 0.5, 0.0, ww - 1.0)
    y = np.clip(uu[:, 1] - 0.5, 0.0, hh - 1.0)
    ix = np.minimum(np.floor(x).astype(int), max(ww - 2, 0))
    iy = np.minimum(np.floor(y).astype(int), max(hh - 2, 0))
    fx = x - ix
    fy = y - iy
    x1 = np.minimum(ix + 1, ww - 1)
    y1 = np.minimum(iy + 1, hh - 1)
    out = (
        v[iy, ix] * ((1 - fx) * (1 - fy))[:, None]
        + v[iy, x1] * (fx * (1 - fy))[:, None]
        + v[y1, ix] * ((1 - fx) * fy)[:, None]
        + v[y1, x1] * (fx * fy)[:, None]
    )
    return out[0] if single else out.reshape(u.shape[:-1] + (v.shape[-1],))


def pixel_distance(f1: FeatureImage, u1, f2: FeatureImage, u2) -> float:
    """1 - cosine similarity of two (interpolated) feature vectors, in [0, 2]."""
    a = bilinear_lookup(f1.values, u1)
    b = bilinear_lookup(f2.values, u2)
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na <= _NORM_FLOOR or nb <= _NORM_FLOOR:
        raise ZeroFeature("feature norm underflow in cosine distance")
    return float(1.0 - np.dot(a, b) / (na * nb))


def image_distance(f1: FeatureImage, f2: FeatureImage) -> float:
    """Mean cosine distance over aligned pixel pairs."""
    if f1.values.shape != f2.values.shape:
        raise ShapeMismatch(
            f"feature shapes differ: {f1.values.shape} vs {f2.values.shape}"
        )
    a = f1.values.reshape(-1, f1.channels)
    b = f2.values.reshape(-1, f2.channels)
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    if np.any(na <= _NORM_FLOOR) or np.any(nb <= _NORM_FLOOR):
        raise ZeroFeature("feature norm underflow in cosine distance")
    cos = np.einsum("nc,nc->n", a, b) / (na * nb)
    return float(np.mean(1.0 - cos))


def iou_distance(m1: np.ndarray, m2: np.ndarray) -> float:
    """1 - soft IoU of two masks in [0, 1]; two empty masks give 0."""
    a = np.asarray(m1, dtype=float)
    b = np.asarray(m2, dtype=float)
    if a.shape != b.shape:
        raise ShapeMismatch(f"mask shapes differ: {a.shape} vs {b.shape}")
    inter = float(np.sum(a * b))
    union = float(np.sum(a) + np.sum(b)) - inter
    if union <= 0.0:
        return 0.0  # both empty: perfect agreement
    return 1.0 - inter / union


def combined_distance(
    rendering,
    target_features: FeatureImage | None,
    target_mask: np.ndarray | None,
    w: DistanceWeights,
) -> float:
    """Weighted sum of feature and IoU distances between a render and a target.

    Rendered channels are bilinearly resampled to the target grids when the
    resolutions differ (comparison happens on the feature grid).
    """
    from .render import resample  # local import to avoid a cycle

    total = 0.0
    if w.lambda_feat > 0:
        if rendering.features is None:
            raise MissingChannel("rendering lacks a feature channel")
        if target_features is None:
            raise MissingChannel("no target features given")
        rf = rendering.features
        if rf.values.shape[:2] != target_features.values.shape[:2]:
            rf = FeatureImage(
                resample(
                    rf.values,
                    (target_features.height, target_features.width),
                )
            )
        total += w.lambda_feat * image_distance(rf, target_features)
    if w.lambda_iou > 0:
        if rendering.mask is None:
            raise MissingChannel("rendering lacks a mask")
        if target_mask is None:
            raise MissingChannel("no target mask given")
        rm = rendering.mask
        tm = np.asarray(target_mask, dtype=float)
        if rm.shape != tm.shape:
            rm = resample(rm, tm.shape)
        total += w.lambda_iou * iou_distance(rm, tm)
    return float(total)

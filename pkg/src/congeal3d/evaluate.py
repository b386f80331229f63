"""Pose and correspondence accuracy metrics.

Predicted camera poses are aligned to ground truth with a closed-form
similarity transform (rotation, translation, isotropic scale) fitted on
camera centers before any error is reported; keypoint transfer quality is
scored as the percentage of correct keypoints within a bbox-relative radius.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import (
    DegenerateConfiguration,
    EmptyKeypointList,
    ShapeMismatch,
    ZeroFeature,
)
from .geometry import RigidTransform
from .metric import FeatureImage, bilinear_lookup

_NORM_FLOOR = 1e-12


@dataclass
class PoseSet:
    """Ordered camera-to-world transforms sharing scene units."""

    transforms: list[RigidTransform]

    def __post_init__(self):
        if len(self.transforms) < 2:
            raise ValueError("pose alignment needs at least two poses")

    def centers(self) -> np.ndarray:
        return np.stack([t.translation for t in self.transforms])

    def rotations(self) -> np.ndarray:
        return np.stack([t.rotation for t in self.transforms])


@dataclass(frozen=True)
class PckConfig:
    alpha: float = 0.1
    bbox: tuple[float, float] = (1.0, 1.0)  # (H_bbox, W_bbox)

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")


@dataclass
class AlignmentResult:
    scale: float
    rotation: np.ndarray  # (3, 3)
    translation: np.ndarray  # (3,)
    rotation_errors_deg: np.ndarray  # (N,)
    translation_errors: np.ndarray  # (N,)

    @property
    def rotation_deg_mean(self) -> float:
        return float(np.mean(self.rotation_errors_deg))

    @property
    def translation_mean(self) -> float:
        return float(np.mean(self.translation_errors))


def _check_spread(x: np.ndarray, label: str) -> None:
    centered = x - x.mean(axis=0)
    s = np.linalg.svd(centered, compute_uv=False)
    if s[1] <= 1e-9 * max(s[0], 1.0):
        raise DegenerateConfiguration(f"{label} camera centers are collinear")


def umeyama_similarity(
    src: np.ndarray, dst: np.ndarray
) -> tuple[float, np.ndarray, np.ndarray]:
    """Least-squares s, R, t with s * R @ src + t ~= dst (Umeyama)."""
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    cs = src - mu_s
    cd = dst - mu_d
    cov = cd.T @ cs / src.shape[0]
    U, D, Vt = np.linalg.svd(cov)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    var = float(np.mean(np.sum(cs**2, axis=1)))
    s = float(np.trace(np.diag(D) @ S)) / var
    t = mu_d - s * R @ mu_s
    return s, R, t


def geodesic_deg(r1: np.ndarray, r2: np.ndarray) -> float:
    """Geodesic angle between two rotations, in degrees."""
    c = (float(np.trace(r1.T @ r2)) - 1.0) / 2.0
    return math.degrees(math.acos(min(1.0, max(-1.0, c))))


def procrustes_align(pred: PoseSet, gt: PoseSet) -> AlignmentResult:
    """Fit a global similarity on camera centers, then report per-pose
    geodesic rotation error (degrees) and aligned center distance."""
    if len(pred.transforms) != len(gt.transforms):
        raise ShapeMismatch("pose sets differ in length")
    pc = pred.centers()
    gc = gt.centers()
    _check_spread(pc, "predicted")
    _check_spread(gc, "ground-truth")
    s, R, t = umeyama_similarity(pc, gc)
    aligned = pc @ (s * R).T + t
    terr = np.linalg.norm(aligned - gc, axis=1)
    rerr = np.array(
        [
            geodesic_deg(R @ rp, rg)
            for rp, rg in zip(pred.rotations(), gt.rotations())
        ]
    )
    return AlignmentResult(s, R, t, rerr, terr)


def pck(
    predicted: Sequence[Optional[Sequence[float]]],
    gt: Sequence[Sequence[float]],
    cfg: PckConfig,
) -> float:
    """Percentage of predictions within alpha * max(H_bbox, W_bbox) of truth.

    The boundary is inclusive; None predictions (no match) count incorrect.
    """
    if len(predicted) != len(gt):
        raise ShapeMismatch("keypoint lists differ in length")
    if len(gt) == 0:
        raise EmptyKeypointList("no keypoints to score")
    radius = cfg.alpha * max(cfg.bbox)
    good = 0
    for p, g in zip(predicted, gt):
        if p is None:
            continue
        d = math.dist((float(p[0]), float(p[1])), (float(g[0]), float(g[1])))
        if d <= radius:
            good += 1
    return 100.0 * good / len(gt)


def nn_match(
    source_features: FeatureImage, target_features: FeatureImage, u_query
) -> np.ndarray:
    """2D matching baseline: target pixel center with the most similar feature.

    Ties break to the smallest (row, col); target pixels with underflowing
    norms are skipped.
    """
    q = bilinear_lookup(source_features.values, u_query)
    nq = float(np.linalg.norm(q))
    if nq <= _NORM_FLOOR:
        raise ZeroFeature("query feature norm underflow")
    tv = target_features.values.reshape(-1, target_features.channels)
    nt = np.linalg.norm(tv, axis=1)
    with np.errstate(invalid="ignore"):
        cos = tv @ (q / nq) / np.maximum(nt, _NORM_FLOOR)
    dist = np.where(nt > _NORM_FLOOR, 1.0 - cos, np.inf)
    i = int(np.argmin(dist))
    r, c = divmod(i, target_features.width)
    return np.array([c + 0.5, r + 0.5])

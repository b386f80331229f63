"""Pose initialization by exhaustive candidate scoring and per-image
refinement of se(3) extrinsics plus FoV by Adam on finite-difference
gradients of the mask-IoU distance.

Candidate renders depend only on the field, so they are prepared once and
shared across all images of a collection.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import EmptyMask, NonFiniteGradient
from .field import VoxelField, density_aabb
from .geometry import CameraPose, CameraIntrinsics, RigidTransform, Twist, exp_map
from .metric import DistanceWeights, FeatureImage, image_distance, iou_distance
from .render import RenderConfig, render, resample_region, tight_bbox_crop

# A rendered mask whose peak opacity falls below this has left the frustum.
_COLLAPSE_EPS = 1e-6


@dataclass(frozen=True)
class CandidateGrid:
    """FoV x azimuth x elevation candidates at a fixed camera radius."""

    fov_values: tuple[float, ...]
    azimuths: tuple[float, ...]
    elevations: tuple[float, ...]
    radius: float

    def __post_init__(self):
        for name in ("fov_values", "azimuths", "elevations"):
            vals = tuple(float(v) for v in getattr(self, name))
            if list(vals) != sorted(vals):
                raise ValueError(f"{name} must be sorted ascending")
            object.__setattr__(self, name, vals)
        if self.radius <= 0:
            raise ValueError("radius must be positive")

    @classmethod
    def default(cls, radius: float) -> "CandidateGrid":
        # 3 FoV values over [15, 60]; 16 azimuths over [-180, 180) after
        # deduplicating the wrapped endpoint; 16 elevations over [-90, 90]
        # pulled in by half a step to avoid the degenerate poles.
        fovs = tuple(np.linspace(15.0, 60.0, 3))
        azs = tuple(np.linspace(-180.0, 180.0, 17)[:16])
        estep = 180.0 / 16
        els = tuple(np.linspace(-90.0 + estep / 2, 90.0 - estep / 2, 16))
        return cls(fovs, azs, els, radius)

    @classmethod
    def default_radius(cls, field: VoxelField) -> float:
        return 1.8 * field.domain.diagonal / 2.0


def candidate_grid(grid: CandidateGrid, width: int, height: int) -> list[CameraPose]:
    """All candidate poses, FoV outermost and elevation innermost."""
    from .geometry import camera_from_spherical

    poses = []
    for fov in grid.fov_values:
        for az in grid.azimuths:
            for el in grid.elevations:
                poses.append(
                    camera_from_spherical(az, el, grid.radius, fov, width, height)
                )
    return poses


@dataclass(frozen=True)
class InitConfig:
    """Rendering and comparison settings for candidate scoring."""

    render_size: tuple[int, int] = (64, 64)  # (width, height)
    n_samples: int = 64
    feature_size: tuple[int, int] = (64, 64)  # (height, width)
    crop_threshold: float = 0.5
    render_cfg: RenderConfig = dc_field(default_factory=RenderConfig)

    def effective_render_cfg(self) -> RenderConfig:
        return replace(self.render_cfg, n_samples=self.n_samples)


@dataclass(frozen=True)
class OptimConfig:
    learning_rate: float = 1e-3
    iterations: int = 1000
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    fd_step_rot: float = 1e-3  # radians
    fd_step_trans: Optional[float] = None  # None: 1e-3 * domain diagonal
    fd_step_fov: float = 0.05  # degrees
    n_samples: int = 64
    # Stop once the best score stalls for this many iterations (None: never).
    patience: Optional[int] = None

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.iterations < 0:
            raise ValueError("iterations must be non-negative")


@dataclass
class PoseEstimate:
    pose: CameraPose
    score: float
    trajectory: Optional[list[float]] = None


@dataclass
class AdamState:
    """Parameter vector plus first/second moment accumulators."""

    params: np.ndarray
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def init(cls, params: np.ndarray) -> "AdamState":
        p = np.asarray(params, dtype=float).copy()
        return cls(p, np.zeros_like(p), np.zeros_like(p), 0)


def adam_step(state: AdamState, gradient: np.ndarray, cfg: OptimConfig) -> AdamState:
    """One bias-corrected Adam update; returns the new state."""
    g = np.asarray(gradient, dtype=float)
    if g.shape != state.params.shape:
        raise ValueError("gradient shape does not match parameters")
    if not np.all(np.isfinite(g)):
        raise NonFiniteGradient("gradient contains NaN or inf")
    t = state.t + 1
    m = cfg.beta1 * state.m + (1.0 - cfg.beta1) * g
    v = cfg.beta2 * state.v + (1.0 - cfg.beta2) * g * g
    m_hat = m / (1.0 - cfg.beta1**t)
    v_hat = v / (1.0 - cfg.beta2**t)
    params = state.params - cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.epsilon)
    return AdamState(params, m, v, t)


def central_difference_gradient(
    f: Callable[[np.ndarray], float], x: np.ndarray, steps: np.ndarray
) -> np.ndarray:
    """Per-axis central finite differences with per-parameter steps."""
    x = np.asarray(x, dtype=float)
    steps = np.asarray(steps, dtype=float)
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = steps[i]
        g[i] = (f(x + e) - f(x - e)) / (2.0 * steps[i])
    return g


def prepare_candidate_features(
    field: VoxelField,
    poses: Sequence[CameraPose],
    cfg: InitConfig,
) -> list[Optional[FeatureImage]]:
    """Render each candidate, crop by its mask, resample to the feature grid.

    Candidates whose render is empty map to None (scored +inf later).
    """
    out: list[Optional[FeatureImage]] = []
    for pose in poses:
        r = render(field, pose, cfg.effective_render_cfg(), channels={"features"})
        try:
            _, rect = tight_bbox_crop(r.mask, r.mask, cfg.crop_threshold)
        except EmptyMask:
            out.append(None)
            continue
        region = (rect[0], rect[1], rect[2] + 1, rect[3] + 1)
        vals = resample_region(r.features.values, region, cfg.feature_size)
        out.append(FeatureImage(vals))
    return out


def prepare_target_crop(
    target_features: FeatureImage,
    target_mask: np.ndarray,
    cfg: InitConfig,
) -> FeatureImage:
    """Crop target features by the mask bbox and resample to the feature grid.

    The mask may live at a different resolution than the feature grid; the
    crop rectangle is mapped across proportionally.
    """
    mask = np.asarray(target_mask, dtype=float)
    _, rect = tight_bbox_crop(mask, mask, cfg.crop_threshold)
    sy = target_features.height / mask.shape[0]
    sx = target_features.width / mask.shape[1]
    region = (rect[0] * sx, rect[1] * sy, (rect[2] + 1) * sx, (rect[3] + 1) * sy)
    vals = resample_region(target_features.values, region, cfg.feature_size)
    return FeatureImage(vals)


def init_pose(
    field: VoxelField,
    target_features: FeatureImage,
    target_mask: np.ndarray,
    grid: CandidateGrid,
    cfg: InitConfig = InitConfig(),
    candidates: Optional[Sequence[CameraPose]] = None,
    candidate_features: Optional[Sequence[Optional[FeatureImage]]] = None,
) -> PoseEstimate:
    """Exhaustive candidate scoring with the feature distance (IoU weight 0).

    Ties break to the lowest candidate index. Precomputed candidate poses and
    features may be passed in to share work across images.
    """
    w, h = cfg.render_size
    if candidates is None:
        candidates = candidate_grid(grid, w, h)
    if candidate_features is None:
        candidate_features = prepare_candidate_features(field, candidates, cfg)
    target_crop = prepare_target_crop(target_features, target_mask, cfg)
    scores = np.full(len(candidates), np.inf)
    for i, feat in enumerate(candidate_features):
        if feat is None:
            continue
        scores[i] = image_distance(feat, target_crop)
    best = int(np.argmin(scores))  # argmin takes the first minimum
    return PoseEstimate(candidates[best], float(scores[best]))


def _pose_from_params(params: np.ndarray, init: CameraPose) -> CameraPose:
    """7-vector (twist[6], fov_radians) composed onto the initial pose.

    The twist acts in the canonical frame (right composition), so its
    rotation components orbit the object rather than panning the camera;
    that keeps silhouette-driven rotation and translation decoupled.
    """
    tw = Twist(params[:3], params[3:6])
    extr = init.extrinsics.compose(exp_map(tw))
    fov_deg = math.degrees(params[6])
    fov_deg = min(max(fov_deg, 1.0), 179.0)
    intr = CameraIntrinsics(fov_deg, init.intrinsics.width, init.intrinsics.height)
    return CameraPose(extr, intr)


def refine_pose(
    field: VoxelField,
    target_mask: np.ndarray,
    init: CameraPose,
    cfg: OptimConfig = OptimConfig(),
    render_cfg: Optional[RenderConfig] = None,
) -> PoseEstimate:
    """Adam descent on mask IoU over (twist, FoV); returns the best iterate.

    Renders happen at the target mask's resolution. A step whose render
    collapses to an empty mask is rejected and the learning rate halved;
    ten consecutive rejections abort.
    """
    target = np.asarray(target_mask, dtype=float)
    hh, ww = target.shape
    base = CameraPose(
        init.extrinsics, CameraIntrinsics(init.intrinsics.fov_deg, ww, hh)
    )
    rc = render_cfg or RenderConfig(n_samples=cfg.n_samples)
    rc = replace(rc, n_samples=cfg.n_samples)

    def loss(params: np.ndarray) -> float:
        pose = _pose_from_params(params, base)
        r = render(field, pose, rc, channels=set())
        if float(r.mask.max(initial=0.0)) < _COLLAPSE_EPS:
            return math.nan  # collapse marker
        return iou_distance(r.mask, target)

    def probe(params: np.ndarray) -> float:
        v = loss(params)
        return 1.0 if math.isnan(v) else v  # worst IoU distance repels probes

    step_trans = cfg.fd_step_trans
    if step_trans is None:
        step_trans = 1e-3 * field.domain.diagonal
    steps = np.array(
        [cfg.fd_step_rot] * 3 + [step_trans] * 3 + [math.radians(cfg.fd_step_fov)]
    )

    params = np.zeros(7)
    params[6] = math.radians(base.intrinsics.fov_deg)
    first = loss(params)
    if math.isnan(first):
        raise EmptyMask("initial pose renders an empty mask")
    best_params = params.copy()
    best_score = first
    trajectory = [first]
    state = AdamState.init(params)
    lr = cfg.learning_rate
    rejections = 0
    stall = 0
    for _ in range(cfg.iterations):
        g = central_difference_gradient(probe, state.params, steps)
        new_state = adam_step(state, g, replace(cfg, learning_rate=lr))
        value = loss(new_state.params)
        if math.isnan(value):
            rejections += 1
            lr *= 0.5
            if rejections >= 10:
                raise EmptyMask("mask collapsed for 10 consecutive steps")
            trajectory.append(trajectory[-1])
            continue
        rejections = 0
        state = new_state
        trajectory.append(value)
        if value < best_score - 1e-12:
            best_score = value
            best_params = state.params.copy()
            stall = 0
        else:
            stall += 1
            if cfg.patience is not None and stall >= cfg.patience:
                break
    return PoseEstimate(
        _pose_from_params(best_params, base), float(best_score), trajectory
    )

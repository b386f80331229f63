"""Synthetic ground-truth scenes: procedural voxel shapes, baked descriptors,
and posed multi-view datasets with exact poses, masks, features, keypoints,
and occlusion-tested correspondences.

Everything is deterministic given the spec seed, so datasets double as
oracles for the pose and correspondence pipeline.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field
from pathlib import Path
from typing import Optional

import numpy as np

from . import dataio
from .errors import EmptySpec
from .field import Aabb, VoxelField, density_aabb, nocs_value, sample_many
from .geometry import CameraPose, camera_from_spherical
from .metric import FeatureImage
from .render import NocsImage, RenderConfig, render

# Surface = half-occupancy crossing, i.e. half the field's peak density.
SURFACE_FRACTION = 0.5
_LIFT_SEED = 1723  # fixed, so the orthonormal lift is the same for every spec


@dataclass(frozen=True)
class Primitive:
    kind: str  # box | sphere | cylinder
    center: tuple[float, float, float]
    size: tuple[float, float, float]  # full extents (sphere: size[0] = diameter)
    color: tuple[float, float, float]

    def __post_init__(self):
        if self.kind not in ("box", "sphere", "cylinder"):
            raise EmptySpec(f"unknown primitive kind {self.kind!r}")

    def signed_distance(self, pts: np.ndarray) -> np.ndarray:
        c = np.asarray(self.center)
        s = np.asarray(self.size) / 2.0
        q = pts - c
        if self.kind == "sphere":
            return np.linalg.norm(q, axis=-1) - s[0]
        if self.kind == "box":
            d = np.abs(q) - s
            outside = np.linalg.norm(np.maximum(d, 0.0), axis=-1)
            inside = np.minimum(np.max(d, axis=-1), 0.0)
            return outside + inside
        # cylinder: axis along z, radius size[0]/2, half-height size[2]/2
        dr = np.linalg.norm(q[..., :2], axis=-1) - s[0]
        dz = np.abs(q[..., 2]) - s[2]
        d = np.stack([dr, dz], axis=-1)
        outside = np.linalg.norm(np.maximum(d, 0.0), axis=-1)
        inside = np.minimum(np.max(d, axis=-1), 0.0)
        return outside + inside


@dataclass(frozen=True)
class SynthSpec:
    primitives: tuple[Primitive, ...]
    resolution: int = 128
    descriptor_mode: str = "nocs_lift"  # or "random_smooth"
    descriptor_dim: int = 8
    noise_sigma: float = 0.0
    seed: int = 0
    domain: Aabb = dc_field(
        default_factory=lambda: Aabb((-1.0, -1.0, -1.0), (1.0, 1.0, 1.0))
    )
    # Interior opacity: sized so unit-scale primitives render as solid
    # silhouettes (occupancy-1 would leave them 63% transparent).
    interior_density: float = 80.0

    def __post_init__(self):
        if len(self.primitives) == 0:
            raise EmptySpec("spec lists no primitives")
        if self.descriptor_mode not in ("nocs_lift", "random_smooth"):
            raise EmptySpec(f"unknown descriptor mode {self.descriptor_mode!r}")
        if self.descriptor_dim < 3:
            raise EmptySpec("descriptor_dim must be at least 3")
        # The unit-norm lift embeds (nocs, 1), so it needs one extra channel.
        if self.descriptor_mode == "nocs_lift" and self.descriptor_dim < 4:
            raise EmptySpec("nocs_lift descriptors need descriptor_dim >= 4")


def _normalize_rows(a: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(a, axis=-1, keepdims=True)
    return a / np.maximum(n, 1e-12)


def make_field(spec: SynthSpec) -> VoxelField:
    """Bake the spec into density/color/descriptor grids.

    Density is 1 inside primitives, 0 outside, with a one-voxel linear ramp
    at boundaries. Descriptors are unit-norm everywhere: either an
    orthonormal lift of the local NOCS value (plus optional noise) or a
    seeded low-frequency random field.
    """
    n = spec.resolution
    res = (n, n, n)
    h = spec.domain.extent / n
    axes = [
        spec.domain.p_min[i] + (np.arange(n) + 0.5) * h[i] for i in range(3)
    ]
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([gx, gy, gz], axis=-1)  # (n, n, n, 3)

    density = np.zeros(res, dtype=np.float32)
    color = np.zeros(res + (3,), dtype=np.float32)
    ramp = float(np.min(h))
    for prim in spec.primitives:
        sd = prim.signed_distance(pts)
        d = np.clip(0.5 - sd / ramp, 0.0, 1.0).astype(np.float32)
        take = d > density
        color[take] = prim.color
        density = np.maximum(density, d)
    if float(density.max()) <= 0.0:
        raise EmptySpec("no primitive intersects the domain")
    density = density * np.float32(spec.interior_density)

    rng = np.random.default_rng(spec.seed)
    c = spec.descriptor_dim
    if spec.descriptor_mode == "nocs_lift":
        base = VoxelField(res, spec.domain, density, color)
        box = density_aabb(base)
        nv = nocs_value(box, pts.reshape(-1, 3))
        homog = np.concatenate([nv, np.ones((nv.shape[0], 1))], axis=1)
        lift_rng = np.random.default_rng(_LIFT_SEED)
        q, _ = np.linalg.qr(lift_rng.standard_normal((c, 4)))
        desc = _normalize_rows(homog @ q.T)
        if spec.noise_sigma > 0:
            eta = _normalize_rows(rng.standard_normal(desc.shape))
            desc = _normalize_rows(desc + spec.noise_sigma * eta)
        descriptors = desc.reshape(res + (c,)).astype(np.float32)
    else:
        coarse_n = max(2, n // 8)
        coarse = rng.standard_normal((coarse_n,) * 3 + (c,))
        # trilinear upsample of the coarse grid, then per-voxel normalize
        from .field import _trilinear

        scale = (coarse_n - 1) / max(n - 1, 1)
        idx = np.arange(n) * scale
        ix, iy, iz = np.meshgrid(idx, idx, idx, indexing="ij")
        coords = np.stack([ix, iy, iz], axis=-1).reshape(-1, 3)
        desc = _trilinear(coarse, coords)
        descriptors = (
            _normalize_rows(desc).reshape(res + (c,)).astype(np.float32)
        )
    # float32 rounding can leave norms a hair off; renormalize in float64
    descriptors = _normalize_rows(descriptors.astype(np.float64)).astype(np.float32)
    return VoxelField(res, spec.domain, density, color, descriptors)


def first_hit(
    field: VoxelField,
    origin: np.ndarray,
    direction: np.ndarray,
    threshold: Optional[float] = None,
) -> Optional[np.ndarray]:
    """First point along the ray where density crosses the threshold
    (default: half the field's peak density, the half-occupancy surface).

    Marches at half-voxel steps, then bisects the crossing interval.
    """
    from .render import ray_box_interval

    if threshold is None:
        threshold = SURFACE_FRACTION * float(field.density.max())
    o = np.asarray(origin, dtype=float).reshape(1, 3)
    d = np.asarray(direction, dtype=float).reshape(1, 3)
    d = d / np.linalg.norm(d)
    t0, t1 = ray_box_interval(o, d, field.domain.p_min, field.domain.p_max)
    t0, t1 = float(t0[0]), float(t1[0])
    if t1 <= t0:
        return None
    step = float(np.min(field.spacing)) / 2.0
    ts = np.arange(t0, t1 + step, step)
    dens = sample_many(field, o + d * ts[:, None], "density")
    above = np.nonzero(dens >= threshold)[0]
    if above.size == 0:
        return None
    i = int(above[0])
    if i == 0:
        return (o + d * ts[0])[0]
    lo, hi = ts[i - 1], ts[i]
    for _ in range(24):
        mid = 0.5 * (lo + hi)
        if float(sample_many(field, o + d * mid, "density")[0]) >= threshold:
            hi = mid
        else:
            lo = mid
    return (o + d * hi)[0]


def visible_from(field: VoxelField, pose: CameraPose, point: np.ndarray) -> bool:
    """Occlusion test: the first surface hit toward the point is the point."""
    c = pose.center()
    to_p = np.asarray(point, dtype=float) - c
    dist = float(np.linalg.norm(to_p))
    hit = first_hit(field, c, to_p / dist)
    if hit is None:
        return False
    margin = float(np.linalg.norm(field.spacing))
    return float(np.linalg.norm(hit - c)) >= dist - margin


@dataclass
class View:
    id: str
    pose: CameraPose
    color: np.ndarray  # (H, W, 3)
    mask: np.ndarray  # (H, W)
    features: FeatureImage
    nocs: NocsImage


@dataclass
class Keypoint:
    point: np.ndarray  # (3,) canonical frame
    projections: list[Optional[np.ndarray]]  # per view, (2,) pixels or None


@dataclass
class SynthDataset:
    field: VoxelField
    views: list[View]
    keypoints: list[Keypoint]


def random_view_poses(
    count: int,
    radius: float,
    fov_deg: float,
    width: int,
    height: int,
    seed: int = 0,
    elevation_range: tuple[float, float] = (-60.0, 60.0),
) -> list[CameraPose]:
    """Continuous random spherical poses (almost surely off any finite grid)."""
    rng = np.random.default_rng(seed)
    poses = []
    for _ in range(count):
        az = float(rng.uniform(-180.0, 180.0))
        el = float(rng.uniform(*elevation_range))
        poses.append(camera_from_spherical(az, el, radius, fov_deg, width, height))
    return poses


def make_dataset(
    spec: SynthSpec,
    view_poses: list[CameraPose],
    n_keypoints: int = 20,
    feature_size: Optional[tuple[int, int]] = None,
    render_cfg: RenderConfig = RenderConfig(n_samples=96),
) -> SynthDataset:
    """Render every channel per view and sample occlusion-tested keypoints.

    Features and NOCS are rendered at feature_size (default: the view size).
    """
    fld = make_field(spec)
    views = []
    for i, pose in enumerate(view_poses):
        r = render(fld, pose, render_cfg, channels={"color"})
        if feature_size is None:
            fpose = pose
        else:
            fh, fw = feature_size
            fpose = CameraPose(
                pose.extrinsics,
                type(pose.intrinsics)(pose.intrinsics.fov_deg, fw, fh),
            )
        rf = render(fld, fpose, render_cfg, channels={"features", "nocs"})
        views.append(
            View(f"view_{i:03d}", pose, r.color, r.mask, rf.features, rf.nocs)
        )

    rng = np.random.default_rng(spec.seed + 1)
    keypoints: list[Keypoint] = []
    attempts = 0
    while len(keypoints) < n_keypoints and attempts < n_keypoints * 50:
        attempts += 1
        view = views[int(rng.integers(len(views)))]
        on = np.argwhere(view.mask >= 0.5)
        if on.size == 0:
            continue
        r_, c_ = on[int(rng.integers(on.shape[0]))]
        from .geometry import ray_for_pixel

        ray = ray_for_pixel(view.pose, (c_ + 0.5, r_ + 0.5))
        hit = first_hit(fld, ray.origin, ray.direction)
        if hit is None:
            continue
        projections: list[Optional[np.ndarray]] = []
        for v in views:
            if visible_from(fld, v.pose, hit) and v.pose.depths(hit) > 0:
                projections.append(v.pose.project(hit))
            else:
                projections.append(None)
        keypoints.append(Keypoint(hit, projections))
    return SynthDataset(fld, views, keypoints)


def write_dataset(dataset: SynthDataset, outdir) -> None:
    """Write field, per-view images/tensors, poses, keypoints, and manifest."""
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    dataio.write_field(dataset.field, out / "field.json")
    entries = []
    poses = []
    for v in dataset.views:
        dataio.write_ppm(out / f"{v.id}.ppm", v.color)
        dataio.write_mask(out / f"{v.id}.mask.pgm", v.mask)
        dataio.write_tensor(out / f"{v.id}.features.tnsr", v.features.values)
        nocs4 = np.concatenate(
            [v.nocs.values, v.nocs.valid[..., None].astype(np.float32)], axis=-1
        )
        dataio.write_tensor(out / f"{v.id}.nocs.tnsr", nocs4)
        dataio.write_pose(v.pose, out / f"{v.id}.pose.json")
        entries.append(
            {
                "id": v.id,
                "image_path": f"{v.id}.ppm",
                "mask_path": f"{v.id}.mask.pgm",
                "features_path": f"{v.id}.features.tnsr",
            }
        )
        poses.append({"id": v.id, **v.pose.to_json_dict()})
    dataio.write_json(out / "manifest.json", {"images": entries})
    dataio.write_json(out / "poses.json", {"poses": poses})
    kps = []
    for k in dataset.keypoints:
        kps.append(
            {
                "point": [float(x) for x in k.point],
                "projections": [
                    None if p is None else {"x": float(p[0]), "y": float(p[1])}
                    for p in k.projections
                ],
            }
        )
    dataio.write_json(out / "keypoints.json", {"keypoints": kps})

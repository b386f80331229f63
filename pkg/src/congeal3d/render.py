"""Volumetric rendering of color, mask, NOCS, and descriptor images.

Per ray, fixed-count midpoint quadrature of the emission-absorption
integral: alpha_i = 1 - exp(-sigma_i * delta), T_i = prod_{j<i}(1 - alpha_j),
pixel value = sum_i T_i alpha_i v_i (+ final transmittance times the
background). The integration interval defaults to the ray/domain
intersection. Reduction order within a ray is fixed, so renders are
deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field
from typing import Optional

import numpy as np

from .errors import DescriptorAbsent, EmptyMask
from .field import VoxelField, density_aabb, nocs_value, sample_many
from .geometry import CameraPose, rays_for_image
from .metric import FeatureImage

# Accumulated-opacity floor below which a pixel counts as background.
DEFAULT_MASK_VALID_THRESHOLD = 0.5


@dataclass(frozen=True)
class RenderConfig:
    n_samples: int = 128
    t_near: Optional[float] = None  # None: per-ray domain entry
    t_far: Optional[float] = None  # None: per-ray domain exit
    background_color: tuple[float, float, float] = (0.0, 0.0, 0.0)
    # Unit vector composited behind descriptor renders so every pixel has a
    # usable feature; None picks ones(C)/sqrt(C).
    background_descriptor: Optional[np.ndarray] = None
    mask_valid_threshold: float = DEFAULT_MASK_VALID_THRESHOLD

    def __post_init__(self):
        if self.n_samples < 2:
            raise ValueError("n_samples must be at least 2")
        if self.t_near is not None and self.t_far is not None:
            if not self.t_near < self.t_far:
                raise ValueError("t_near must be below t_far")


@dataclass
class NocsImage:
    """Canonical-coordinate render with per-pixel validity."""

    values: np.ndarray  # (H, W, 3) in [0, 1]
    valid: np.ndarray  # (H, W) bool


@dataclass
class Rendering:
    mask: np.ndarray  # (H, W) accumulated opacity in [0, 1]
    depth: np.ndarray  # (H, W) opacity-weighted mean hit distance, 0 if empty
    color: Optional[np.ndarray] = None  # (H, W, 3)
    nocs: Optional[NocsImage] = None
    features: Optional[FeatureImage] = None


def ray_box_interval(
    origins: np.ndarray, dirs: np.ndarray, p_min: np.ndarray, p_max: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Slab-method entry/exit distances; (0, 0) for rays that miss the box."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        ta = (p_min - origins) * inv
        tb = (p_max - origins) * inv
    lo = np.nanmin(np.stack([ta, tb]), axis=0)
    hi = np.nanmax(np.stack([ta, tb]), axis=0)
    t0 = np.max(lo, axis=-1)
    t1 = np.min(hi, axis=-1)
    t0 = np.maximum(t0, 0.0)
    miss = t1 <= t0
    t0 = np.where(miss, 0.0, t0)
    t1 = np.where(miss, 0.0, t1)
    return t0, t1


def _ray_bounds(field, origins, dirs, cfg, count):
    if cfg.t_near is not None and cfg.t_far is not None:
        return np.full(count, float(cfg.t_near)), np.full(count, float(cfg.t_far))
    t0, t1 = ray_box_interval(origins, dirs, field.domain.p_min, field.domain.p_max)
    if cfg.t_near is not None:
        t0 = np.maximum(t0, cfg.t_near)
    if cfg.t_far is not None:
        t1 = np.maximum(np.minimum(t1, cfg.t_far), t0)
    return t0, t1


def _march_numpy(field, channel_grid, nocs_box, origins, dirs, t0, t1, n):
    """Pure-numpy reference march; same semantics as the compiled kernels."""
    count = origins.shape[0]
    delta = (t1 - t0) / n
    ts = t0[:, None] + (np.arange(n) + 0.5)[None, :] * delta[:, None]
    pts = origins[:, None, :] + dirs[:, None, :] * ts[..., None]
    flat = pts.reshape(-1, 3)
    sigma = sample_many(field, flat, "density").reshape(count, n)
    alpha = 1.0 - np.exp(-sigma * delta[:, None])
    trans = np.cumprod(1.0 - alpha, axis=1)
    t_final = trans[:, -1]
    t_excl = np.concatenate([np.ones((count, 1)), trans[:, :-1]], axis=1)
    weights = t_excl * alpha
    mask = weights.sum(axis=1)
    wsum = np.maximum(mask, 1e-12)
    depth = np.where(mask > 1e-12, (weights * ts).sum(axis=1) / wsum, 0.0)
    acc = None
    if channel_grid is not None:
        coords = (flat - field.domain.p_min) / field.spacing - 0.5
        from .field import _trilinear

        vals = _trilinear(channel_grid, coords)
        inside = field.domain.contains(flat)
        vals = np.where(inside[:, None], vals, 0.0)
        vals = vals.reshape(count, n, -1)
        acc = (weights[..., None] * vals).sum(axis=1)
    elif nocs_box is not None:
        nv = nocs_value(nocs_box, flat).reshape(count, n, 3)
        acc = (weights[..., None] * nv).sum(axis=1)
    return mask, depth, t_final, acc


def _march(field, channel_grid, nocs_box, origins, dirs, t0, t1, n):
    """Dispatch to the compiled kernels when available."""
    from . import _kernels as K

    if not K.HAVE_NUMBA:
        return _march_numpy(field, channel_grid, nocs_box, origins, dirs, t0, t1, n)
    pmin = np.ascontiguousarray(field.domain.p_min)
    inv_h = np.ascontiguousarray(1.0 / field.spacing)
    args = (pmin, inv_h, origins, dirs, t0, t1, n)
    if channel_grid is not None:
        m, d, tf, acc = K.march_channel(field.density, channel_grid, *args)
    elif nocs_box is not None:
        bmin = np.ascontiguousarray(nocs_box.p_min)
        binv = np.ascontiguousarray(1.0 / nocs_box.extent)
        m, d, tf, acc = K.march_nocs(field.density, bmin, binv, *args)
    else:
        m, d, tf = K.march_density(field.density, *args)
        acc = None
    return m, d, tf, acc


def render(
    field: VoxelField,
    pose: CameraPose,
    cfg: RenderConfig = RenderConfig(),
    channels: frozenset[str] | set[str] = frozenset({"color"}),
) -> Rendering:
    """Render the requested channels; mask and depth always come along.

    channels may contain "color", "nocs", and "features".
    """
    channels = set(channels)
    if "features" in channels and field.descriptors is None:
        raise DescriptorAbsent("field stores no descriptor grid")
    intr = pose.intrinsics
    h, w, n = intr.height, intr.width, cfg.n_samples
    origins, dirs = rays_for_image(pose)
    t0, t1 = _ray_bounds(field, origins, dirs, cfg, h * w)

    # One march integrates density plus at most one stacked value grid;
    # color and features share a pass, NOCS needs its own integrand.
    grid = None
    if "color" in channels and "features" in channels:
        grid = np.concatenate(
            [field.color, field.descriptors], axis=-1, dtype=np.float32
        )
    elif "color" in channels:
        grid = field.color
    elif "features" in channels:
        grid = field.descriptors

    mask, depth, t_final, acc = _march(
        field, grid, None, origins, dirs, t0, t1, n
    )
    out = Rendering(mask=mask.reshape(h, w), depth=depth.reshape(h, w))

    if "color" in channels:
        bg = np.asarray(cfg.background_color, dtype=float)
        col = acc[:, :3] + t_final[:, None] * bg
        out.color = col.reshape(h, w, 3)

    if "features" in channels:
        feat = acc[:, 3:] if "color" in channels else acc
        c = feat.shape[1]
        if cfg.background_descriptor is None:
            bgd = np.full(c, 1.0 / np.sqrt(c))
        else:
            bgd = np.asarray(cfg.background_descriptor, dtype=float).reshape(c)
        feat = feat + t_final[:, None] * bgd
        norms = np.linalg.norm(feat, axis=1, keepdims=True)
        feat = np.where(norms > 1e-12, feat / np.maximum(norms, 1e-12), 0.0)
        out.features = FeatureImage(feat.reshape(h, w, c))

    if "nocs" in channels:
        box = density_aabb(field)
        _, _, _, nacc = _march(field, None, box, origins, dirs, t0, t1, n)
        valid = mask >= cfg.mask_valid_threshold
        wsum = np.maximum(mask, 1e-12)
        vals = np.where(valid[:, None], nacc / wsum[:, None], 0.0)
        out.nocs = NocsImage(
            np.clip(vals, 0.0, 1.0).reshape(h, w, 3), valid.reshape(h, w)
        )

    return out


def render_nocs(
    field: VoxelField, pose: CameraPose, cfg: RenderConfig = RenderConfig()
) -> NocsImage:
    """NOCS render; pixels with opacity below the threshold are invalid."""
    return render(field, pose, cfg, channels={"nocs"}).nocs


def tight_bbox_crop(
    mask: np.ndarray, image: np.ndarray, threshold: float = 0.5
) -> tuple[np.ndarray, tuple[int, int, int, int]]:
    """Crop image to the minimal rectangle where mask >= threshold.

    Returns (crop, (x0, y0, x1, y1)) with inclusive pixel bounds.
    """
    mask = np.asarray(mask)
    hit = mask >= threshold
    if not hit.any():
        raise EmptyMask("no pixel reaches the crop threshold")
    rows = np.flatnonzero(hit.any(axis=1))
    cols = np.flatnonzero(hit.any(axis=0))
    y0, y1 = int(rows[0]), int(rows[-1])
    x0, x1 = int(cols[0]), int(cols[-1])
    return np.array(image[y0 : y1 + 1, x0 : x1 + 1]), (x0, y0, x1, y1)


def resample_region(
    image: np.ndarray,
    region: tuple[float, float, float, float],
    target_hw: tuple[int, int],
) -> np.ndarray:
    """Bilinearly resample the region [x0, x1) x [y0, y1) to (h', w').

    Half-pixel-center alignment: output pixel (i, j) samples the source at
    x = x0 + (j + 0.5) * (x1 - x0) / w', clamped to the edge pixels.
    """
    img = np.asarray(image, dtype=float)
    squeeze = img.ndim == 2
    if squeeze:
        img = img[..., None]
    hh, ww = img.shape[:2]
    x0, y0, x1, y1 = (float(v) for v in region)
    th, tw = target_hw
    if th < 1 or tw < 1:
        raise ValueError("target dimensions must be positive")
    xs = x0 + (np.arange(tw) + 0.5) * (x1 - x0) / tw - 0.5
    ys = y0 + (np.arange(th) + 0.5) * (y1 - y0) / th - 0.5
    xs = np.clip(xs, 0.0, ww - 1.0)
    ys = np.clip(ys, 0.0, hh - 1.0)
    ix = np.minimum(np.floor(xs).astype(int), ww - 2) if ww > 1 else np.zeros(tw, int)
    iy = np.minimum(np.floor(ys).astype(int), hh - 2) if hh > 1 else np.zeros(th, int)
    fx = (xs - ix) if ww > 1 else np.zeros(tw)
    fy = (ys - iy) if hh > 1 else np.zeros(th)
    x1i = np.minimum(ix + 1, ww - 1)
    y1i = np.minimum(iy + 1, hh - 1)
    top = img[iy][:, ix] * (1 - fx)[None, :, None] + img[iy][:, x1i] * fx[None, :, None]
    bot = (
        img[y1i][:, ix] * (1 - fx)[None, :, None]
        + img[y1i][:, x1i] * fx[None, :, None]
    )
    out = top * (1 - fy)[:, None, None] + bot * fy[:, None, None]
    return out[..., 0] if squeeze else out


def resample(image: np.ndarray, target_hw: tuple[int, int]) -> np.ndarray:
    """Bilinear resize of a full image with half-pixel-center alignment."""
    img = np.asarray(image)
    return resample_region(img, (0.0, 0.0, img.shape[1], img.shape[0]), target_hw)

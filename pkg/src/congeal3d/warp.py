"""Canonical coordinate mappings.

A 2D warp aligns a real feature image to the posed render of the canonical
shape; its displacement field lives on the feature grid in normalized image
coordinates ([T]_u = u_tilde - u, both in [0, 1]^2). Lifting the warped
coordinate through a NOCS render gives a canonical 3D point; the reverse
direction inverts the NOCS render and the warp by nearest-neighbor search.
Chaining forward through one image and reverse through another transfers
keypoints and pixels.

The warp objective (per-pixel cosine feature distance at the warped
coordinate + an l2 leash on the displacement + rigidity/total-variation
smoothness) is minimized with AdamW using gradients derived in closed form
through the bilinear interpolation and the cosine.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import InvalidLift, NoValidPixels, ShapeMismatch
from .geometry import CameraPose
from .metric import FeatureImage
from .render import NocsImage

_EPS_REG = 1e-8  # added to J~^T J~ before inversion
_NORM_FLOOR = 1e-12


@dataclass
class WarpField:
    """Per-cell displacement (h, w, 2) in normalized image coordinates.

    source_size and render_size record the pixel dimensions (width, height)
    of the real image and of the render the warp maps into.
    """

    displacement: np.ndarray
    source_size: tuple[int, int]
    render_size: tuple[int, int]

    def __post_init__(self):
        d = np.asarray(self.displacement, dtype=float)
        if d.ndim != 3 or d.shape[2] != 2:
            raise ValueError("displacement must be (h, w, 2)")
        if not np.all(np.isfinite(d)):
            raise ValueError("displacement must be finite")
        self.displacement = d

    @property
    def grid_shape(self) -> tuple[int, int]:
        return self.displacement.shape[:2]


@dataclass(frozen=True)
class WarpConfig:
    # Correspondence preset: strong coordinate leash, no smoothness term.
    lambda_l2: float = 10.0
    lambda_smooth: float = 0.0
    iterations: int = 4000
    learning_rate: float = 0.01
    huber_delta: float = 0.01
    rigidity_weights: tuple[float, float, float] = (1.0, 0.1, 10.0)  # (w10, w1, w_tv)
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    def __post_init__(self):
        if min(self.lambda_l2, self.lambda_smooth) < 0 or min(self.rigidity_weights) < 0:
            raise ValueError("weights must be non-negative")


@dataclass
class CanonicalPoint:
    p: np.ndarray  # (3,) in [0, 1]^3
    valid: bool


def grid_centers(h: int, w: int) -> np.ndarray:
    """Normalized center coordinates (h, w, 2) of a feature grid, (x, y)."""
    xs = (np.arange(w) + 0.5) / w
    ys = (np.arange(h) + 0.5) / h
    gx, gy = np.meshgrid(xs, ys)
    return np.stack([gx, gy], axis=-1)


def displacement_at(warp: WarpField, u) -> np.ndarray:
    """Bilinear displacement lookup at normalized coordinates (..., 2)."""
    h, w = warp.grid_shape
    u = np.asarray(u, dtype=float)
    single = u.ndim == 1
    uu = u.reshape(-1, 2)
    px = np.stack([uu[:, 0] * w, uu[:, 1] * h], axis=-1)
    from .metric import bilinear_lookup

    d = bilinear_lookup(warp.displacement, px)
    return d[0] if single else d.reshape(u.shape)


def warp_coordinates(warp: WarpField, u) -> np.ndarray:
    """u + T(u), clamped to the unit square."""
    return np.clip(np.asarray(u, dtype=float) + displacement_at(warp, u), 0.0, 1.0)


def _lookup_with_grad(values: np.ndarray, xy: np.ndarray):
    """Bilinear sample of (H, W, C) at pixel coords (N, 2) plus d/dx, d/dy.

    Coordinates clamp to the edge; the gradient is zero where clamped.
    """
    hh, ww = values.shape[:2]
    x = xy[:, 0] - 0.5
    y = xy[:, 1] - 0.5
    free_x = (x > 0.0) & (x < ww - 1.0)
    free_y = (y > 0.0) & (y < hh - 1.0)
    x = np.clip(x, 0.0, ww - 1.0)
    y = np.clip(y, 0.0, hh - 1.0)
    ix = np.minimum(np.floor(x).astype(int), max(ww - 2, 0))
    iy = np.minimum(np.floor(y).astype(int), max(hh - 2, 0))
    fx = x - ix
    fy = y - iy
    x1 = np.minimum(ix + 1, ww - 1)
    y1 = np.minimum(iy + 1, hh - 1)
    f00 = values[iy, ix]
    f01 = values[iy, x1]
    f10 = values[y1, ix]
    f11 = values[y1, x1]
    wfx = fx[:, None]
    wfy = fy[:, None]
    val = (
        f00 * (1 - wfx) * (1 - wfy)
        + f01 * wfx * (1 - wfy)
        + f10 * (1 - wfx) * wfy
        + f11 * wfx * wfy
    )
    ddx = ((f01 - f00) * (1 - wfy) + (f11 - f10) * wfy) * free_x[:, None]
    ddy = ((f10 - f00) * (1 - wfx) + (f11 - f01) * wfx) * free_y[:, None]
    return val, ddx, ddy


def _feature_l2_term(
    disp: np.ndarray,
    real: np.ndarray,
    render: np.ndarray,
    lambda_l2: float,
):
    """Mean per-pixel cosine + l2 cost and its gradient w.r.t. displacement."""
    h, w = disp.shape[:2]
    rh, rw = render.shape[:2]
    u = grid_centers(h, w).reshape(-1, 2)
    d = disp.reshape(-1, 2)
    raw = u + d
    inside = (raw > 0.0) & (raw < 1.0)  # clip pass-through mask
    ut = np.clip(raw, 0.0, 1.0)
    pix = np.stack([ut[:, 0] * rw, ut[:, 1] * rh], axis=-1)
    b, dbdx, dbdy = _lookup_with_grad(render, pix)
    a = real.reshape(-1, real.shape[-1])

    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    ok = (na > _NORM_FLOOR) & (nb > _NORM_FLOOR)
    na_s = np.maximum(na, _NORM_FLOOR)
    nb_s = np.maximum(nb, _NORM_FLOOR)
    a_hat = a / na_s[:, None]
    b_hat = b / nb_s[:, None]
    cos = np.einsum("nc,nc->n", a_hat, b_hat)
    cost = np.where(ok, 1.0 - cos, 1.0)
    # d(1-cos)/db = -(a_hat - cos * b_hat) / |b|
    dcost_db = -(a_hat - cos[:, None] * b_hat) / nb_s[:, None]
    dcost_db *= ok[:, None]
    gx = np.einsum("nc,nc->n", dcost_db, dbdx) * rw  # chain: pixel = ut * rw
    gy = np.einsum("nc,nc->n", dcost_db, dbdy) * rh

    l2 = np.sum((ut - u) ** 2, axis=1)
    gx_l2 = 2.0 * lambda_l2 * (ut[:, 0] - u[:, 0])
    gy_l2 = 2.0 * lambda_l2 * (ut[:, 1] - u[:, 1])

    n = h * w
    value = float(np.sum(cost) + lambda_l2 * np.sum(l2)) / n
    grad = np.zeros_like(d)
    grad[:, 0] = (gx + gx_l2) * inside[:, 0] / n
    grad[:, 1] = (gy + gy_l2) * inside[:, 1] / n
    return value, grad.reshape(h, w, 2)


def _rigidity(disp: np.ndarray, offset: int, with_grad: bool):
    """Mean Frobenius rigidity of the full map u -> u + T(u).

    The Jacobian of the map is approximated with forward finite differences
    at the given pixel offset; the identity is added so rigid coordinate
    maps, not zero displacements, are the minimizers.
    """
    h, w = disp.shape[:2]
    if offset < 1 or offset >= min(h, w):
        raise ValueError(f"offset must be in [1, min(h, w)), got {offset}")
    sx = w / offset  # 1 / (offset / w): normalized spacing between columns
    sy = h / offset
    dx = (disp[: h - offset, offset:] - disp[: h - offset, : w - offset]) * sx
    dy = (disp[offset:, : w - offset] - disp[: h - offset, : w - offset]) * sy
    # J~ rows index the map output (x, y); columns its input derivative.
    J = np.empty(dx.shape[:2] + (2, 2))
    J[..., 0, 0] = 1.0 + dx[..., 0]
    J[..., 1, 0] = dx[..., 1]
    J[..., 0, 1] = dy[..., 0]
    J[..., 1, 1] = 1.0 + dy[..., 1]
    M = np.einsum("...ji,...jk->...ik", J, J)
    fro_m = np.sqrt(np.einsum("...ij,...ij->...", M, M))
    Mr = M.copy()
    Mr[..., 0, 0] += _EPS_REG
    Mr[..., 1, 1] += _EPS_REG
    det = Mr[..., 0, 0] * Mr[..., 1, 1] - Mr[..., 0, 1] * Mr[..., 1, 0]
    inv = np.empty_like(Mr)
    inv[..., 0, 0] = Mr[..., 1, 1]
    inv[..., 1, 1] = Mr[..., 0, 0]
    inv[..., 0, 1] = -Mr[..., 0, 1]
    inv[..., 1, 0] = -Mr[..., 1, 0]
    inv /= det[..., None, None]
    fro_i = np.sqrt(np.einsum("...ij,...ij->...", inv, inv))
    count = dx.shape[0] * dx.shape[1]
    value = float(np.sum(fro_m + fro_i)) / count
    if not with_grad:
        return value, None

    g_m = M / np.maximum(fro_m, _NORM_FLOOR)[..., None, None]
    # d||M^-1||_F / dM = -M^-1 (M^-1/||M^-1||) M^-1 for symmetric M
    unit_i = inv / np.maximum(fro_i, _NORM_FLOOR)[..., None, None]
    g_m -= np.einsum("...ij,...jk,...kl->...il", inv, unit_i, inv)
    S = 2.0 * np.einsum("...ij,...jk->...ik", J, g_m) / count  # dcost/dJ~
    grad = np.zeros_like(disp)
    # J~[i, 0] came from (disp[r, c+o] - disp[r, c]) * sx, etc.
    grad[: h - offset, offset:, 0] += S[..., 0, 0] * sx
    grad[: h - offset, offset:, 1] += S[..., 1, 0] * sx
    grad[offset:, : w - offset, 0] += S[..., 0, 1] * sy
    grad[offset:, : w - offset, 1] += S[..., 1, 1] * sy
    grad[: h - offset, : w - offset, 0] -= S[..., 0, 0] * sx + S[..., 0, 1] * sy
    grad[: h - offset, : w - offset, 1] -= S[..., 1, 0] * sx + S[..., 1, 1] * sy
    return value, grad


def rigidity_loss(warp: WarpField, offset: int) -> float:
    """Deviation of the warp map from a rigid coordinate transform."""
    value, _ = _rigidity(warp.displacement, offset, with_grad=False)
    return value


def _huber(z: np.ndarray, delta: float):
    az = np.abs(z)
    quad = az <= delta
    val = np.where(quad, 0.5 * z * z, delta * (az - 0.5 * delta))
    grad = np.where(quad, z, delta * np.sign(z))
    return val, grad


def _tv(disp: np.ndarray, delta: float, with_grad: bool):
    # Huber per displacement component, summed per difference, averaged over
    # difference positions: a ramp of slope s scores s^2/2 per difference.
    h, w = disp.shape[:2]
    value = 0.0
    grad = np.zeros_like(disp) if with_grad else None
    if w > 1:
        dx = disp[:, 1:] - disp[:, :-1]
        v, g = _huber(dx, delta)
        count = dx.shape[0] * dx.shape[1]
        value += float(np.sum(v)) / count
        if with_grad:
            g = g / count
            grad[:, 1:] += g
            grad[:, :-1] -= g
    if h > 1:
        dy = disp[1:] - disp[:-1]
        v, g = _huber(dy, delta)
        count = dy.shape[0] * dy.shape[1]
        value += float(np.sum(v)) / count
        if with_grad:
            g = g / count
            grad[1:] += g
            grad[:-1] -= g
    return value, grad


def tv_loss(warp: WarpField, huber_delta: float = 0.01) -> float:
    """Mean Huber penalty of horizontal and vertical displacement differences."""
    value, _ = _tv(warp.displacement, huber_delta, with_grad=False)
    return value


def _smooth(disp: np.ndarray, cfg: WarpConfig, with_grad: bool):
    w10, w1, wtv = cfg.rigidity_weights
    h, w = disp.shape[:2]
    value = 0.0
    grad = np.zeros_like(disp) if with_grad else None
    for weight, offset in ((w10, 10), (w1, 1)):
        if weight == 0 or offset >= min(h, w):
            continue  # grids smaller than the offset skip that rigidity term
        v, g = _rigidity(disp, offset, with_grad)
        value += weight * v
        if with_grad:
            grad += weight * g
    if wtv > 0:
        v, g = _tv(disp, cfg.huber_delta, with_grad)
        value += wtv * v
        if with_grad:
            grad += wtv * g
    return value, grad


def smooth_loss(warp: WarpField, cfg: WarpConfig = WarpConfig()) -> float:
    """Weighted rigidity (offsets 10 and 1) plus total-variation smoothness."""
    value, _ = _smooth(warp.displacement, cfg, with_grad=False)
    return value


def warp_objective(
    disp: np.ndarray,
    real_features: FeatureImage,
    render_features: FeatureImage,
    cfg: WarpConfig,
    with_grad: bool = True,
):
    """Full warp-fitting objective and (optionally) its analytic gradient."""
    value, grad = _feature_l2_term(
        disp, real_features.values, render_features.values, cfg.lambda_l2
    )
    if cfg.lambda_smooth > 0:
        sv, sg = _smooth(disp, cfg, with_grad)
        value += cfg.lambda_smooth * sv
        if with_grad:
            grad += cfg.lambda_smooth * sg
    return (value, grad) if with_grad else (value, None)


def fit_forward_warp(
    real_features: FeatureImage,
    render_features: FeatureImage,
    cfg: WarpConfig = WarpConfig(),
    source_size: Optional[tuple[int, int]] = None,
    render_size: Optional[tuple[int, int]] = None,
) -> WarpField:
    """Fit the 2D warp from the real image grid into the render grid.

    AdamW descent from zero displacement; the best-scoring iterate is
    returned. Sizes default to the feature grid dimensions.
    """
    if real_features.channels != render_features.channels:
        raise ShapeMismatch("feature channel counts differ")
    h, w = real_features.height, real_features.width
    disp = np.zeros((h, w, 2))
    m = np.zeros_like(disp)
    v = np.zeros_like(disp)
    best = disp.copy()
    best_val, _ = warp_objective(disp, real_features, render_features, cfg, False)
    for t in range(1, cfg.iterations + 1):
        _, g = warp_objective(disp, real_features, render_features, cfg)
        m = cfg.beta1 * m + (1.0 - cfg.beta1) * g
        v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g
        m_hat = m / (1.0 - cfg.beta1**t)
        v_hat = v / (1.0 - cfg.beta2**t)
        disp = disp - cfg.learning_rate * (
            m_hat / (np.sqrt(v_hat) + cfg.epsilon) + cfg.weight_decay * disp
        )
        val, _ = warp_objective(disp, real_features, render_features, cfg, False)
        if val < best_val:
            best_val = val
            best = disp.copy()
    return WarpField(
        best,
        source_size or (w, h),
        render_size or (render_features.width, render_features.height),
    )


@dataclass
class ImageContext:
    """Everything needed to map between one image and the canonical frame."""

    warp: WarpField
    nocs: NocsImage
    pose: Optional[CameraPose] = None

    @property
    def image_size(self) -> tuple[int, int]:
        return self.warp.source_size


def _nocs_lookup(nocs: NocsImage, uu: np.ndarray):
    """Validity-weighted bilinear NOCS lookup at normalized coords (N, 2)."""
    hh, ww = nocs.valid.shape
    x = np.clip(uu[:, 0] * ww - 0.5, 0.0, ww - 1.0)
    y = np.clip(uu[:, 1] * hh - 0.5, 0.0, hh - 1.0)
    ix = np.minimum(np.floor(x).astype(int), max(ww - 2, 0))
    iy = np.minimum(np.floor(y).astype(int), max(hh - 2, 0))
    fx = (x - ix)[:, None]
    fy = (y - iy)[:, None]
    x1 = np.minimum(ix + 1, ww - 1)
    y1 = np.minimum(iy + 1, hh - 1)
    vals = np.zeros((uu.shape[0], 3))
    total = np.zeros((uu.shape[0], 1))
    for yy, xx, wgt in (
        (iy, ix, (1 - fx) * (1 - fy)),
        (iy, x1, fx * (1 - fy)),
        (y1, ix, (1 - fx) * fy),
        (y1, x1, fx * fy),
    ):
        wv = wgt * nocs.valid[yy, xx][:, None]
        vals += wv * nocs.values[yy, xx]
        total += wv
    ok = total[:, 0] > _NORM_FLOOR
    vals = np.where(ok[:, None], vals / np.maximum(total, _NORM_FLOOR), 0.0)
    return vals, ok


def forward_2d3d(nocs: NocsImage, u_tilde) -> CanonicalPoint:
    """Lift a normalized render coordinate to its canonical 3D point.

    Invalid neighbors are excluded from the interpolation; the lift is
    invalid where no valid neighbor remains.
    """
    uu = np.asarray(u_tilde, dtype=float).reshape(1, 2)
    vals, ok = _nocs_lookup(nocs, uu)
    return CanonicalPoint(vals[0], bool(ok[0]))


def _valid_table(nocs: NocsImage):
    rows, cols = np.nonzero(nocs.valid)
    if rows.size == 0:
        raise NoValidPixels("NOCS image has no valid pixels")
    hh, ww = nocs.valid.shape
    coords = np.stack([(cols + 0.5) / ww, (rows + 0.5) / hh], axis=-1)
    return nocs.values[rows, cols], coords


def reverse_3d2d(nocs: NocsImage, p) -> tuple[np.ndarray, float]:
    """Valid pixel whose NOCS value is nearest to p (normalized coordinate).

    Ties break to the lexicographically smallest (row, col). Also returns the
    NOCS-space residual distance.
    """
    table, coords = _valid_table(nocs)
    pp = np.asarray(p, dtype=float).reshape(3)
    d2 = np.sum((table - pp) ** 2, axis=1)
    i = int(np.argmin(d2))  # first minimum = smallest (row, col) in row-major order
    return coords[i], float(math.sqrt(d2[i]))


def _reverse_3d2d_batch(nocs: NocsImage, ps: np.ndarray) -> np.ndarray:
    table, coords = _valid_table(nocs)
    out = np.zeros((ps.shape[0], 2))
    chunk = max(1, 2_000_000 // max(table.shape[0], 1))
    for s in range(0, ps.shape[0], chunk):
        block = ps[s : s + chunk]
        d2 = (
            np.sum(block**2, axis=1)[:, None]
            - 2.0 * block @ table.T
            + np.sum(table**2, axis=1)[None, :]
        )
        out[s : s + chunk] = coords[np.argmin(d2, axis=1)]
    return out


def reverse_2d2d(warp: WarpField, u_tilde) -> np.ndarray:
    """Grid coordinate whose warped position is nearest to u_tilde."""
    h, w = warp.grid_shape
    u = grid_centers(h, w).reshape(-1, 2)
    targets = np.clip(u + warp.displacement.reshape(-1, 2), 0.0, 1.0)
    ut = np.asarray(u_tilde, dtype=float).reshape(2)
    d2 = np.sum((targets - ut) ** 2, axis=1)
    return u[int(np.argmin(d2))]


def _reverse_2d2d_batch(warp: WarpField, uts: np.ndarray) -> np.ndarray:
    h, w = warp.grid_shape
    u = grid_centers(h, w).reshape(-1, 2)
    targets = np.clip(u + warp.displacement.reshape(-1, 2), 0.0, 1.0)
    out = np.zeros_like(uts)
    chunk = max(1, 2_000_000 // max(targets.shape[0], 1))
    for s in range(0, uts.shape[0], chunk):
        block = uts[s : s + chunk]
        d2 = (
            np.sum(block**2, axis=1)[:, None]
            - 2.0 * block @ targets.T
            + np.sum(targets**2, axis=1)[None, :]
        )
        out[s : s + chunk] = u[np.argmin(d2, axis=1)]
    return out


def transfer_keypoint(source: ImageContext, target: ImageContext, u_source) -> np.ndarray:
    """Map a source-image pixel coordinate into the target image.

    Forward through the source warp and NOCS, reverse through the target.
    Raises InvalidLift when the source coordinate lifts onto background.
    """
    sw, sh = source.image_size
    u = np.asarray(u_source, dtype=float).reshape(2) / (sw, sh)
    ut = warp_coordinates(source.warp, u)
    point = forward_2d3d(source.nocs, ut)
    if not point.valid:
        raise InvalidLift(f"keypoint {u_source} lifts onto background")
    ut_target, _ = reverse_3d2d(target.nocs, point.p)
    u_target = reverse_2d2d(target.warp, ut_target)
    tw, th = target.image_size
    return u_target * (tw, th)


def transfer_pixels(
    source_image: np.ndarray,
    source: ImageContext,
    target: ImageContext,
    region_mask: np.ndarray,
    target_image: np.ndarray,
) -> np.ndarray:
    """Copy source colors into the target wherever the target-to-source chain
    lands inside the region mask (given in source image space)."""
    src = np.asarray(source_image, dtype=float)
    tgt = np.asarray(target_image, dtype=float)
    region = np.asarray(region_mask, dtype=float)
    if src.shape[:2] != region.shape:
        raise ShapeMismatch("region mask must match the source image size")
    th_, tw_ = tgt.shape[:2]
    sh_, sw_ = src.shape[:2]
    u = grid_centers(th_, tw_).reshape(-1, 2)
    ut = np.clip(u + displacement_at(target.warp, u), 0.0, 1.0)
    ps, ok = _nocs_lookup(target.nocs, ut)
    out = tgt.copy()
    if not ok.any():
        return out
    idx = np.nonzero(ok)[0]
    ut_src = _reverse_3d2d_batch(source.nocs, ps[idx])
    u_src = _reverse_2d2d_batch(source.warp, ut_src)
    xs = np.clip((u_src[:, 0] * sw_).astype(int), 0, sw_ - 1)
    ys = np.clip((u_src[:, 1] * sh_).astype(int), 0, sh_ - 1)
    in_region = region[ys, xs] >= 0.5
    tx = idx % tw_
    ty = idx // tw_
    sel = np.nonzero(in_region)[0]
    out[ty[sel], tx[sel]] = src[ys[sel], xs[sel]]
    return out

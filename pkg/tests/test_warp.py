import math

import numpy as np
import pytest

from congeal3d.errors import InvalidLift, NoValidPixels, ShapeMismatch
from congeal3d.metric import FeatureImage
from congeal3d.render import NocsImage
from congeal3d.warp import (
    CanonicalPoint,
    ImageContext,
    WarpConfig,
    WarpField,
    fit_forward_warp,
    forward_2d3d,
    grid_centers,
    reverse_2d2d,
    reverse_3d2d,
    rigidity_loss,
    smooth_loss,
    transfer_keypoint,
    transfer_pixels,
    tv_loss,
    warp_objective,
)

SQRT2 = math.sqrt(2.0)


def wf(disp):
    d = np.asarray(disp, dtype=float)
    h, w = d.shape[:2]
    return WarpField(d, (w, h), (w, h))


# --------------------------------------------------------------------------
# smoothness losses


def test_rigidity_zero_displacement_is_two_sqrt_two():
    assert rigidity_loss(wf(np.zeros((20, 20, 2))), 1) == pytest.approx(
        2.0 * SQRT2, abs=1e-6
    )
    assert rigidity_loss(wf(np.zeros((20, 20, 2))), 10) == pytest.approx(
        2.0 * SQRT2, abs=1e-6
    )


def test_rigidity_invariant_under_global_rotation_map():
    theta = math.radians(17.0)
    R = np.array(
        [[math.cos(theta), -math.sin(theta)], [math.sin(theta), math.cos(theta)]]
    )
    u = grid_centers(24, 24)
    disp = u @ R.T - u  # full map u -> R u
    for offset in (1, 10):
        assert rigidity_loss(wf(disp), offset) == pytest.approx(
            2.0 * SQRT2, abs=1e-6
        )


def test_rigidity_uniform_scale_two():
    u = grid_centers(16, 16)
    disp = u  # full map u -> 2u
    expected = 4.0 * SQRT2 + SQRT2 / 4.0
    assert rigidity_loss(wf(disp), 1) == pytest.approx(expected, abs=1e-6)


def test_rigidity_offset_validation():
    with pytest.raises(ValueError):
        rigidity_loss(wf(np.zeros((8, 8, 2))), 0)
    with pytest.raises(ValueError):
        rigidity_loss(wf(np.zeros((8, 8, 2))), 8)


def test_tv_zero_for_constant_displacement():
    assert tv_loss(wf(np.full((10, 10, 2), 0.37))) == 0.0


def test_tv_linear_ramp_quadratic_branch():
    s = 0.004  # below huber delta 0.01
    disp = np.zeros((12, 12, 2))
    disp[..., 0] = np.arange(12)[None, :] * s
    assert tv_loss(wf(disp), 0.01) == pytest.approx(s * s / 2.0, rel=1e-12)


def test_tv_matches_double_loop():
    rng = np.random.default_rng(0)
    disp = rng.normal(scale=0.01, size=(7, 9, 2))
    delta = 0.008

    def huber(z):
        return 0.5 * z * z if abs(z) <= delta else delta * (abs(z) - 0.5 * delta)

    total_x = sum(
        huber(disp[r, c + 1, k] - disp[r, c, k])
        for r in range(7)
        for c in range(8)
        for k in range(2)
    )
    total_y = sum(
        huber(disp[r + 1, c, k] - disp[r, c, k])
        for r in range(6)
        for c in range(9)
        for k in range(2)
    )
    expected = total_x / (7 * 8) + total_y / (6 * 9)
    assert tv_loss(wf(disp), delta) == pytest.approx(expected, abs=1e-10)


def test_smooth_loss_zero_displacement_combination():
    # 1 * 2sqrt2 + 0.1 * 2sqrt2 + 0 from the two rigidity identities
    value = smooth_loss(wf(np.zeros((24, 24, 2))))
    assert value == pytest.approx(1.1 * 2.0 * SQRT2, abs=1e-6)


def test_smooth_loss_tv_only_constant_field():
    cfg = WarpConfig(rigidity_weights=(0.0, 0.0, 1.0))
    assert smooth_loss(wf(np.full((16, 16, 2), 0.2)), cfg) == 0.0


def test_smooth_loss_is_weighted_sum():
    rng = np.random.default_rng(1)
    disp = rng.normal(scale=0.02, size=(18, 18, 2))
    cfg = WarpConfig(rigidity_weights=(0.7, 0.2, 3.0), huber_delta=0.01)
    expected = (
        0.7 * rigidity_loss(wf(disp), 10)
        + 0.2 * rigidity_loss(wf(disp), 1)
        + 3.0 * tv_loss(wf(disp), 0.01)
    )
    assert smooth_loss(wf(disp), cfg) == pytest.approx(expected, abs=1e-12)


# --------------------------------------------------------------------------
# warp objective gradient and fitting


def test_warp_objective_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    h = w = 16
    real = FeatureImage(rng.normal(size=(h, w, 4)) + 2.0)
    rend = FeatureImage(rng.normal(size=(h, w, 4)) + 2.0)
    cfg = WarpConfig(lambda_l2=3.0, lambda_smooth=0.7)
    disp = rng.uniform(-0.03, 0.03, size=(h, w, 2))
    _, grad = warp_objective(disp, real, rend, cfg)
    worst = 0.0
    for _ in range(150):
        r_, c_, k_ = rng.integers(h), rng.integers(w), rng.integers(2)
        eps = 1e-6
        dp = disp.copy()
        dp[r_, c_, k_] += eps
        dm = disp.copy()
        dm[r_, c_, k_] -= eps
        fd = (
            warp_objective(dp, real, rend, cfg, False)[0]
            - warp_objective(dm, real, rend, cfg, False)[0]
        ) / (2 * eps)
        g = grad[r_, c_, k_]
        rel = abs(fd - g) / max(abs(fd), abs(g), 1e-10)
        worst = max(worst, rel)
    assert worst < 1e-4


def test_fit_identity_when_features_match():
    rng = np.random.default_rng(1)
    feats = FeatureImage(rng.normal(size=(24, 24, 4)) + 1.5)
    cfg = WarpConfig(lambda_l2=10.0, lambda_smooth=0.0, iterations=100)
    warp = fit_forward_warp(feats, feats, cfg)
    assert np.abs(warp.displacement).mean() < 1e-3


def test_fit_recovers_known_shift():
    # linear coordinate-ramp features: the bilinear field is globally linear,
    # so the gradient points at the shift from anywhere
    h = w = 32
    u = grid_centers(h, w)
    base = np.concatenate([u * 3.0, np.full((h, w, 1), 2.0)], axis=-1)
    shift_px = 4.0
    rend = np.concatenate(
        [(u - [shift_px / w, 0.0]) * 3.0, np.full((h, w, 1), 2.0)], axis=-1
    )
    cfg = WarpConfig(
        lambda_l2=0.0, lambda_smooth=0.0, iterations=800, learning_rate=0.01,
        weight_decay=0.0,
    )
    warp = fit_forward_warp(FeatureImage(base), FeatureImage(rend), cfg)
    inner = warp.displacement[8:-8, 8:-8]
    assert np.abs(inner[..., 0] * w - shift_px).max() < 0.5
    assert np.abs(inner[..., 1] * h).max() < 0.5


def test_fit_huge_l2_pins_displacement_to_zero():
    rng = np.random.default_rng(2)
    real = FeatureImage(rng.normal(size=(16, 16, 3)) + 2.0)
    rend = FeatureImage(rng.normal(size=(16, 16, 3)) + 2.0)
    cfg = WarpConfig(lambda_l2=1e6, lambda_smooth=0.0, iterations=120)
    warp = fit_forward_warp(real, rend, cfg)
    assert np.abs(warp.displacement).max() < 1e-3


def test_fit_rejects_channel_mismatch():
    with pytest.raises(ShapeMismatch):
        fit_forward_warp(
            FeatureImage(np.ones((4, 4, 3))), FeatureImage(np.ones((4, 4, 2))),
            WarpConfig(iterations=1),
        )


def test_fit_objective_never_worse_than_best_tracked():
    rng = np.random.default_rng(3)
    real = FeatureImage(rng.normal(size=(12, 12, 3)) + 2.0)
    rend = FeatureImage(rng.normal(size=(12, 12, 3)) + 2.0)
    cfg = WarpConfig(lambda_l2=1.0, lambda_smooth=0.1, iterations=60)
    warp = fit_forward_warp(real, rend, cfg)
    final, _ = warp_objective(warp.displacement, real, rend, cfg, False)
    zero, _ = warp_objective(np.zeros_like(warp.displacement), real, rend, cfg, False)
    assert final <= zero + 1e-12


# --------------------------------------------------------------------------
# coordinate mappings


def checker_nocs(h=8, w=8):
    rng = np.random.default_rng(4)
    values = rng.uniform(size=(h, w, 3))
    valid = np.ones((h, w), dtype=bool)
    return NocsImage(values, valid)


def test_forward_2d3d_at_valid_pixel_center():
    nocs = checker_nocs()
    u = ((3 + 0.5) / 8.0, (2 + 0.5) / 8.0)
    p = forward_2d3d(nocs, u)
    assert p.valid
    np.testing.assert_allclose(p.p, nocs.values[2, 3], atol=1e-12)


def test_forward_2d3d_background_is_invalid():
    nocs = checker_nocs()
    nocs.valid[:, :] = False
    p = forward_2d3d(nocs, (0.5, 0.5))
    assert not p.valid


def test_forward_2d3d_partial_validity_renormalizes():
    values = np.zeros((1, 2, 3))
    values[0, 0] = (0.2, 0.4, 0.6)
    values[0, 1] = (1.0, 1.0, 1.0)
    valid = np.array([[True, False]])
    nocs = NocsImage(values, valid)
    # halfway between the two pixel centers: only the valid one contributes
    p = forward_2d3d(nocs, (0.5, 0.5))
    assert p.valid
    np.testing.assert_allclose(p.p, (0.2, 0.4, 0.6), atol=1e-12)


def test_reverse_3d2d_exact_and_tie_break():
    values = np.zeros((2, 2, 3))
    values[0, 0] = (0.1, 0.1, 0.1)
    values[0, 1] = (0.9, 0.1, 0.1)
    values[1, 0] = (0.1, 0.9, 0.1)
    values[1, 1] = (0.9, 0.9, 0.1)
    nocs = NocsImage(values, np.ones((2, 2), dtype=bool))
    u, residual = reverse_3d2d(nocs, (0.9, 0.1, 0.1))
    np.testing.assert_allclose(u, (0.75, 0.25))
    assert residual == pytest.approx(0.0)
    # equidistant between (0,0) and (0,1): smaller (row, col) wins
    u, _ = reverse_3d2d(nocs, (0.5, 0.1, 0.1))
    np.testing.assert_allclose(u, (0.25, 0.25))


def test_reverse_3d2d_no_valid_pixels():
    nocs = NocsImage(np.zeros((2, 2, 3)), np.zeros((2, 2), dtype=bool))
    with pytest.raises(NoValidPixels):
        reverse_3d2d(nocs, (0.5, 0.5, 0.5))


def test_reverse_3d2d_matches_exhaustive_scan():
    rng = np.random.default_rng(5)
    for _ in range(100):
        h, w = rng.integers(2, 7), rng.integers(2, 7)
        values = rng.uniform(size=(h, w, 3))
        valid = rng.uniform(size=(h, w)) > 0.3
        if not valid.any():
            valid[0, 0] = True
        nocs = NocsImage(values, valid)
        p = rng.uniform(size=3)
        best, best_d2 = None, np.inf
        for r in range(h):
            for c in range(w):
                if not valid[r, c]:
                    continue
                d2 = float(np.sum((values[r, c] - p) ** 2))
                if d2 < best_d2:
                    best, best_d2 = ((c + 0.5) / w, (r + 0.5) / h), d2
        u, residual = reverse_3d2d(nocs, p)
        np.testing.assert_allclose(u, best, atol=1e-15)
        assert residual == pytest.approx(math.sqrt(best_d2), abs=1e-12)


def test_reverse_2d2d_identity_and_shift():
    zero = wf(np.zeros((8, 8, 2)))
    u = reverse_2d2d(zero, (0.4999, 0.0626))
    np.testing.assert_allclose(u, ((3 + 0.5) / 8, (0 + 0.5) / 8))
    shift = wf(np.full((8, 8, 2), 0.125))
    # target u_tilde = u + 0.125: preimage of grid point (r, c) center
    u = reverse_2d2d(shift, ((4 + 0.5) / 8 + 0.125, (2 + 0.5) / 8 + 0.125))
    np.testing.assert_allclose(u, ((4 + 0.5) / 8, (2 + 0.5) / 8))


def test_reverse_2d2d_matches_exhaustive_scan():
    rng = np.random.default_rng(6)
    for _ in range(100):
        h, w = rng.integers(2, 7), rng.integers(2, 7)
        disp = rng.normal(scale=0.05, size=(h, w, 2))
        warp = wf(disp)
        ut = rng.uniform(size=2)
        centers = grid_centers(h, w).reshape(-1, 2)
        targets = np.clip(centers + disp.reshape(-1, 2), 0.0, 1.0)
        d2 = np.sum((targets - ut) ** 2, axis=1)
        expected = centers[int(np.argmin(d2))]
        np.testing.assert_allclose(reverse_2d2d(warp, ut), expected, atol=1e-15)


def make_context(nocs_values, valid, size=8):
    nocs = NocsImage(np.asarray(nocs_values, dtype=float), np.asarray(valid))
    warp = WarpField(np.zeros((size, size, 2)), (size, size), (size, size))
    return ImageContext(warp=warp, nocs=nocs)


def test_transfer_keypoint_source_equals_target():
    # smooth injective NOCS (like a rendered surface), so nearest-neighbor
    # inversion is local and the round trip is bounded by the grid spacing
    rng = np.random.default_rng(7)
    h = w = 8
    g = grid_centers(h, w)
    values = np.stack(
        [g[..., 0], g[..., 1], 0.2 + 0.1 * g[..., 0] * g[..., 1]], axis=-1
    )
    valid = np.ones((h, w), dtype=bool)
    ctx = make_context(values, valid, size=h)
    for _ in range(20):
        u = rng.uniform(1.0, 7.0, size=2)
        out = transfer_keypoint(ctx, ctx, u)
        # round trip lands within one grid cell of the query
        assert np.abs(out - u).max() <= 1.0 + 1e-9


def test_transfer_keypoint_background_raises():
    values = np.zeros((4, 4, 3))
    valid = np.zeros((4, 4), dtype=bool)
    valid[0, 0] = True
    ctx = make_context(values, valid, size=4)
    with pytest.raises(InvalidLift):
        transfer_keypoint(ctx, ctx, (3.5, 3.5))


def test_transfer_pixels_identity_and_empty_region():
    rng = np.random.default_rng(8)
    h = w = 8
    values = rng.uniform(size=(h, w, 3))
    # make NOCS values distinct so reverse lookup is unambiguous
    ctx = make_context(values, np.ones((h, w), dtype=bool), size=h)
    source = rng.uniform(size=(h, w, 3))
    target = rng.uniform(size=(h, w, 3))

    untouched = transfer_pixels(source, ctx, ctx, np.zeros((h, w)), target)
    np.testing.assert_array_equal(untouched, target)

    edited = transfer_pixels(source, ctx, ctx, np.ones((h, w)), target)
    np.testing.assert_allclose(edited, source, atol=2.0 / 255.0)


def test_transfer_pixels_region_mask_limits_edit():
    rng = np.random.default_rng(9)
    h = w = 8
    values = rng.uniform(size=(h, w, 3))
    ctx = make_context(values, np.ones((h, w), dtype=bool), size=h)
    source = rng.uniform(size=(h, w, 3))
    target = rng.uniform(size=(h, w, 3))
    region = np.zeros((h, w))
    region[0:2, 0:2] = 1.0
    edited = transfer_pixels(source, ctx, ctx, region, target)
    np.testing.assert_allclose(edited[0:2, 0:2], source[0:2, 0:2], atol=1e-12)
    np.testing.assert_array_equal(edited[4:, 4:], target[4:, 4:])

import math

import numpy as np
import pytest

from congeal3d.errors import (
    DegenerateConfiguration,
    EmptyKeypointList,
    ShapeMismatch,
)
from congeal3d.evaluate import (
    PckConfig,
    PoseSet,
    geodesic_deg,
    nn_match,
    pck,
    procrustes_align,
)
from congeal3d.geometry import RigidTransform, Twist, exp_map
from congeal3d.metric import FeatureImage


def random_pose_set(rng, n=8):
    transforms = []
    for _ in range(n):
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        t = exp_map(Twist(axis * rng.uniform(0.1, 2.5), rng.normal(size=3) * 2.0))
        transforms.append(t)
    return PoseSet(transforms)


def apply_similarity(poses, s, R, t):
    out = []
    for g in poses.transforms:
        out.append(RigidTransform(R @ g.rotation, s * (R @ g.translation) + t))
    return PoseSet(out)


def test_identical_sets_give_zero_errors():
    rng = np.random.default_rng(0)
    poses = random_pose_set(rng)
    res = procrustes_align(poses, poses)
    assert res.rotation_deg_mean == pytest.approx(0.0, abs=5e-6)  # acos floor
    assert res.translation_mean == pytest.approx(0.0, abs=1e-9)


def test_global_rigid_offset_is_absorbed():
    # rotation errors bottom out at the acos precision floor (~1e-6 deg)
    rng = np.random.default_rng(1)
    gt = random_pose_set(rng)
    g = exp_map(Twist(np.array([0.3, -0.2, 0.9]), np.array([1.0, -2.0, 0.5])))
    pred = apply_similarity(gt, 1.0, g.rotation, g.translation)
    res = procrustes_align(pred, gt)
    assert res.rotation_deg_mean < 5e-6
    assert res.translation_mean < 1e-9


def test_global_similarity_with_scale_is_absorbed():
    rng = np.random.default_rng(2)
    gt = random_pose_set(rng)
    g = exp_map(Twist(np.array([-0.4, 0.8, 0.1]), np.zeros(3)))
    pred = apply_similarity(gt, 2.7, g.rotation, np.array([3.0, 1.0, -2.0]))
    res = procrustes_align(pred, gt)
    assert res.rotation_deg_mean < 5e-6
    assert res.translation_mean < 1e-9


def test_reported_errors_invariant_under_similarity_of_predictions():
    # with realistic nonzero errors, a global similarity applied to the
    # predictions changes the reported numbers by far less than 1e-6
    rng = np.random.default_rng(20)
    gt = random_pose_set(rng, n=10)
    noisy = []
    for g in gt.transforms:
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        bump = exp_map(Twist(axis * math.radians(rng.uniform(0.5, 4.0)),
                             rng.normal(size=3) * 0.05))
        noisy.append(bump.compose(g))
    pred = PoseSet(noisy)
    base = procrustes_align(pred, gt)
    g = exp_map(Twist(np.array([0.2, 0.7, -0.3]), np.array([4.0, -1.0, 2.0])))
    moved = apply_similarity(pred, 1.9, g.rotation, g.translation)
    res = procrustes_align(moved, gt)
    assert abs(res.rotation_deg_mean - base.rotation_deg_mean) < 1e-6
    assert abs(res.translation_mean - base.translation_mean) < 1e-6


def umeyama_oracle(src, dst):
    # independent direct SVD similarity solution
    mu_s, mu_d = src.mean(0), dst.mean(0)
    cs, cd = src - mu_s, dst - mu_d
    cov = cd.T @ cs / len(src)
    U, D, Vt = np.linalg.svd(cov)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1
    R = U @ S @ Vt
    s = np.trace(np.diag(D) @ S) / np.mean(np.sum(cs**2, axis=1))
    t = mu_d - s * R @ mu_s
    return s, R, t


def test_single_rotated_pose_matches_independent_oracle():
    rng = np.random.default_rng(3)
    gt = random_pose_set(rng, n=8)
    transforms = list(gt.transforms)
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    bump = exp_map(Twist(axis * math.radians(10.0), np.zeros(3)))
    # rotate one camera-to-world pose in place (same center, new orientation)
    g0 = transforms[2]
    transforms[2] = RigidTransform(bump.rotation @ g0.rotation, g0.translation)
    pred = PoseSet(transforms)

    res = procrustes_align(pred, gt)

    s, R, t = umeyama_oracle(pred.centers(), gt.centers())
    exp_trans = np.linalg.norm(pred.centers() @ (s * R).T + t - gt.centers(), axis=1)
    exp_rot = np.array(
        [
            geodesic_deg(R @ p.rotation, g.rotation)
            for p, g in zip(pred.transforms, gt.transforms)
        ]
    )
    np.testing.assert_allclose(res.translation_errors, exp_trans, atol=1e-6)
    np.testing.assert_allclose(res.rotation_errors_deg, exp_rot, atol=1e-6)
    assert res.rotation_errors_deg[2] == pytest.approx(10.0, abs=1e-6)


def test_collinear_centers_raise():
    transforms = [
        RigidTransform(np.eye(3), np.array([float(i), 0.0, 0.0])) for i in range(5)
    ]
    with pytest.raises(DegenerateConfiguration):
        procrustes_align(PoseSet(transforms), PoseSet(transforms))


def test_length_mismatch_raises():
    rng = np.random.default_rng(4)
    with pytest.raises(ShapeMismatch):
        procrustes_align(random_pose_set(rng, 4), random_pose_set(rng, 5))


def test_pck_all_exact_and_all_far():
    gt = [(10.0, 10.0), (20.0, 5.0), (3.0, 30.0)]
    cfg = PckConfig(alpha=0.1, bbox=(40.0, 30.0))
    assert pck(gt, gt, cfg) == 100.0
    far = [(x + 100, y + 100) for x, y in gt]
    assert pck(far, gt, cfg) == 0.0


def test_pck_boundary_inclusive_and_no_match():
    cfg = PckConfig(alpha=0.1, bbox=(40.0, 30.0))  # radius = 4.0
    gt = [(10.0, 10.0), (20.0, 20.0)]
    pred = [(14.0, 10.0), None]  # exactly at radius; a no-match
    assert pck(pred, gt, cfg) == 50.0


def test_pck_monotone_in_alpha():
    rng = np.random.default_rng(5)
    gt = [tuple(v) for v in rng.uniform(0, 50, size=(30, 2))]
    pred = [tuple(v + rng.normal(scale=3.0, size=2)) for v in np.array(gt)]
    values = [
        pck(pred, gt, PckConfig(alpha=a, bbox=(50.0, 40.0)))
        for a in (0.02, 0.05, 0.1, 0.2, 0.5)
    ]
    assert all(b >= a for a, b in zip(values, values[1:]))


def test_pck_empty_raises():
    with pytest.raises(EmptyKeypointList):
        pck([], [], PckConfig())


def test_nn_match_self_identity():
    rng = np.random.default_rng(6)
    feats = FeatureImage(rng.normal(size=(6, 7, 5)))
    for r in range(0, 6, 2):
        for c in range(0, 7, 3):
            u = (c + 0.5, r + 0.5)
            np.testing.assert_allclose(nn_match(feats, feats, u), u)


def test_nn_match_constant_features_tie_break():
    feats = FeatureImage(np.ones((4, 5, 3)))
    np.testing.assert_allclose(nn_match(feats, feats, (3.5, 2.5)), (0.5, 0.5))


def test_nn_match_matches_exhaustive_scan():
    rng = np.random.default_rng(7)
    for _ in range(100):
        h, w = rng.integers(2, 6), rng.integers(2, 6)
        src = FeatureImage(rng.normal(size=(4, 4, 3)))
        tgt = FeatureImage(rng.normal(size=(h, w, 3)))
        u = rng.uniform((0.5, 0.5), (3.5, 3.5))
        from congeal3d.metric import bilinear_lookup

        q = bilinear_lookup(src.values, u)
        best, best_d = None, np.inf
        for r in range(h):
            for c in range(w):
                v = tgt.values[r, c]
                d = 1.0 - float(
                    np.dot(q, v) / (np.linalg.norm(q) * np.linalg.norm(v))
                )
                if d < best_d:
                    best, best_d = (c + 0.5, r + 0.5), d
        np.testing.assert_allclose(nn_match(src, tgt, u), best)

"""Metric definitions against their oracle twins and invariances."""

import numpy as np
import pytest

from drivegeo.geometry import EgoPose, pose_compose, yaw_quat
from drivegeo.metrics import (
    MetricReport,
    chamfer,
    chamfer_bruteforce,
    depth_metrics,
    depth_metrics_loop,
    evaluate_pointmaps,
    pose_auc30,
    pose_auc30_loop,
    ray_depth,
    subsample_points,
)


def random_poses(rng, n, spread=10.0):
    out = [EgoPose.identity()]
    for _ in range(n - 1):
        q = rng.normal(size=4)
        q /= np.linalg.norm(q)
        out.append(EgoPose.from_tq(rng.normal(size=3) * spread, q))
    return out


def test_chamfer_identity_and_singletons():
    pts = np.random.default_rng(0).normal(size=(16, 3))
    assert chamfer(pts, pts) == (0.0, 0.0)
    acc, comp = chamfer(np.array([[0.0, 0.0, 0.0]]), np.array([[1.0, 0.0, 0.0]]))
    assert acc == 1.0 and comp == 1.0


def test_chamfer_empty_raises():
    with pytest.raises(ValueError):
        chamfer(np.zeros((0, 3)), np.ones((1, 3)))


def test_chamfer_matches_bruteforce():
    rng = np.random.default_rng(1)
    for _ in range(25):
        p = rng.normal(size=(rng.integers(2, 33), 3)) * 5
        g = rng.normal(size=(rng.integers(2, 33), 3)) * 5
        fast = chamfer(p, g)
        slow = chamfer_bruteforce(p, g)
        assert abs(fast[0] - slow[0]) < 1e-9
        assert abs(fast[1] - slow[1]) < 1e-9


def test_chamfer_direction_symmetry():
    rng = np.random.default_rng(2)
    p = rng.normal(size=(20, 3))
    g = rng.normal(size=(15, 3))
    assert chamfer(p, g)[0] == chamfer(g, p)[1]


def test_chamfer_rigid_invariance():
    rng = np.random.default_rng(3)
    p = rng.normal(size=(24, 3)) * 3
    g = rng.normal(size=(30, 3)) * 3
    pose = EgoPose.from_tq(rng.normal(size=3), rng.normal(size=4) / np.linalg.norm(rng.normal(size=4)))
    from drivegeo.geometry import transform_points

    before = chamfer(p, g)
    after = chamfer(transform_points(pose, p), transform_points(pose, g))
    assert abs(before[0] - after[0]) < 1e-9
    assert abs(before[1] - after[1]) < 1e-9


def test_subsample_cap():
    pts = np.random.default_rng(4).normal(size=(100, 3))
    capped = subsample_points(pts, 10, seed=0)
    assert capped.shape == (10, 3)
    assert subsample_points(pts, 200, seed=0).shape == (100, 3)


def test_ray_depth_cases():
    assert ray_depth(np.array([[3.0, 4.0, 0.0]]), np.zeros(3))[0] == 5.0
    c = np.array([1.0, -2.0, 0.5])
    assert ray_depth(c.reshape(1, 3), c)[0] == 0.0
    rng = np.random.default_rng(5)
    pm = rng.normal(size=(4, 6, 3)) * 20
    center = rng.normal(size=3) * 5
    expected = np.sqrt(((pm - center) ** 2).sum(-1))
    np.testing.assert_allclose(ray_depth(pm, center), expected, atol=1e-12)


def test_depth_metric_examples():
    m = np.ones(1, bool)
    assert depth_metrics(np.array([10.0]), np.array([10.0]), m) == (0.0, 1.0)
    assert depth_metrics(np.array([11.0]), np.array([10.0]), m) == (0.1, 1.0)
    abs_rel, delta = depth_metrics(np.array([1.0, 2.0]), np.array([1.0, 4.0]), np.ones(2, bool))
    assert abs(abs_rel - 0.25) < 1e-12
    assert delta == 0.5  # ratio exactly 2 fails the strict < 1.25


def test_depth_metric_errors():
    with pytest.raises(ValueError):
        depth_metrics(np.ones(3), np.ones(3), np.zeros(3, bool))
    with pytest.raises(ValueError):
        depth_metrics(np.ones(1), np.zeros(1), np.ones(1, bool))


def test_depth_metrics_match_loop_oracle_exactly():
    rng = np.random.default_rng(6)
    for _ in range(50):
        n = int(rng.integers(3, 40))
        gt = rng.uniform(0.5, 50.0, size=n)
        pred = gt * rng.uniform(0.6, 1.6, size=n)
        mask = rng.random(n) < 0.8
        if not mask.any():
            mask[0] = True
        assert depth_metrics(pred, gt, mask) == depth_metrics_loop(pred, gt, mask)


def test_delta_monotone_under_worsening():
    gt = np.array([10.0, 10.0])
    pred = np.array([10.0, 10.0])
    _, d0 = depth_metrics(pred, gt, np.ones(2, bool))
    pred_bad = np.array([10.0, 13.0])  # ratio 1.3 > 1.25
    _, d1 = depth_metrics(pred_bad, gt, np.ones(2, bool))
    assert d1 < d0


def test_auc_perfect_and_hopeless():
    rng = np.random.default_rng(7)
    poses = random_poses(rng, 4)
    assert pose_auc30(poses, poses) == 100.0
    # rotate every pose by 40 degrees: all relative rotations off by >= 30
    bad = [pose_compose(p, EgoPose(np.zeros(3), yaw_quat(np.radians(40.0 * (i + 1))))) for i, p in enumerate(poses)]
    assert pose_auc30(bad, poses) == 0.0


def test_auc_matches_loop_oracle_exactly():
    rng = np.random.default_rng(8)
    for _ in range(20):
        gt = random_poses(rng, 4)
        noisy = []
        for p in gt:
            dq = rng.normal(size=4) * 0.02
            q = p.q + dq
            q /= np.linalg.norm(q)
            noisy.append(EgoPose.from_tq(p.t + rng.normal(size=3) * 0.3, q))
        assert pose_auc30(noisy, gt) == pose_auc30_loop(noisy, gt)


def test_auc_needs_two_frames():
    with pytest.raises(ValueError):
        pose_auc30([EgoPose.identity()], [EgoPose.identity()])


def test_auc_global_pose_invariance():
    rng = np.random.default_rng(9)
    gt = random_poses(rng, 4)
    pred = [EgoPose.from_tq(p.t + rng.normal(size=3) * 0.1, p.q) for p in gt]
    g = random_poses(rng, 2)[1]
    before = pose_auc30(pred, gt)
    after = pose_auc30([pose_compose(g, p) for p in pred], [pose_compose(g, p) for p in gt])
    assert abs(before - after) < 1e-9


def test_auc_degenerate_translation_convention():
    # identical zero translations on both sides: RTA = 0 -> pair passes on rotation
    gt = [EgoPose.identity(), EgoPose(np.zeros(3), yaw_quat(0.1))]
    assert pose_auc30(gt, gt) == 100.0
    # one side moves, the other does not: RTA = 180 -> pair fails everywhere
    pred = [EgoPose.identity(), EgoPose(np.array([1.0, 0.0, 0.0]), yaw_quat(0.1))]
    assert pose_auc30(pred, gt) == 0.0


def test_metric_report_validation():
    with pytest.raises(ValueError):
        MetricReport(
            accuracy_m=np.nan, completeness_m=0.0, abs_rel=0.0, delta_125=1.0, auc30=100.0,
            n_pred_points=1, n_gt_points=1, n_pixels=1, n_pairs=1,
        )
    with pytest.raises(ValueError):
        MetricReport(
            accuracy_m=0.0, completeness_m=0.0, abs_rel=0.0, delta_125=2.0, auc30=100.0,
            n_pred_points=1, n_gt_points=1, n_pixels=1, n_pairs=1,
        )


def test_evaluate_pointmaps_self_is_perfect():
    from drivegeo.synth import random_scene_spec, synthesize

    s = synthesize(random_scene_spec(10, frames=3, views=2, height=16, width=24))
    rep = evaluate_pointmaps(s.pointmaps, s.poses, s.pointmaps, s.poses, s.valid, seed=0)
    assert rep.accuracy_m == 0.0 and rep.completeness_m == 0.0
    assert rep.abs_rel == 0.0 and rep.delta_125 == 1.0 and rep.auc30 == 100.0
    assert rep.n_pixels == int(s.valid.sum())

"""Loss closed forms, scaling identities, masking, and FD gradients."""

import math

import numpy as np
import pytest

from drivegeo import tensor as T
from drivegeo.geometry import EgoPose, yaw_quat
from drivegeo.losses import (
    LossReport,
    ScalingTransform,
    gt_pose_targets,
    pointmap_loss,
    pose_loss,
    total_loss,
)


def test_scaling_trivial_values():
    assert ScalingTransform("arcsinh").forward(np.array(0.0)) == 0.0
    np.testing.assert_allclose(
        ScalingTransform("linear10").forward(np.array([100.0, -50.0, 3.0])), [10.0, -5.0, 0.3]
    )


def test_arcsinh_roundtrip_against_sinh_oracle():
    s = ScalingTransform("arcsinh")
    for x in (0.0, 1.0, -7.5, 100.0, -1e4, 1e6):
        y = float(s.forward(np.array(x)))
        assert abs(math.sinh(y) - x) <= 1e-12 * max(1.0, abs(x))
        assert abs(float(s.inverse(np.array(y))) - x) <= 1e-12 * max(1.0, abs(x))


def test_linear_roundtrip():
    for kind in ("linear1", "linear10", "linear100"):
        s = ScalingTransform(kind)
        x = np.array([1e6, -3.25, 0.0])
        np.testing.assert_allclose(s.inverse(s.forward(x)), x, rtol=1e-12)


def test_unknown_scaling_rejected():
    with pytest.raises(ValueError):
        ScalingTransform("log")


def test_pose_loss_cases():
    gt = [EgoPose.identity(), EgoPose(np.array([1.0, 2.0, 0.0]), yaw_quat(0.3))]
    scaling = ScalingTransform("linear1")
    gt7 = gt_pose_targets(gt, scaling)
    pred = T.tensor(gt7, dtype="f64")
    assert float(pose_loss(pred, gt7).data) == 0.0

    # single frame, translation off by (1, 0, 0), rotation exact -> loss 1
    gt1 = gt_pose_targets([EgoPose.identity()], scaling)
    off = gt1.copy()
    off[0, 0] += 1.0
    assert float(pose_loss(T.tensor(off, dtype="f64"), gt1).data) == 1.0

    # random case against a hand-rolled sum
    rng = np.random.default_rng(0)
    p = rng.normal(size=(3, 7))
    g = rng.normal(size=(3, 7))
    expected = sum(abs(p[i, j] - g[i, j]) for i in range(3) for j in range(7)) / 3
    got = float(pose_loss(T.tensor(p, dtype="f64"), g).data)
    assert abs(got - expected) < 1e-12


def test_pose_loss_empty_raises():
    with pytest.raises(ValueError):
        pose_loss(T.tensor(np.zeros((0, 7)), dtype="f64"), np.zeros((0, 7)))


def _loss_inputs(seed=0, shape=(2, 2, 4, 6)):
    rng = np.random.default_rng(seed)
    t, n, h, w = shape
    pred = rng.normal(size=(t, n, h, w, 3))
    gt = rng.normal(size=(t, n, h, w, 3))
    sigma = np.exp(rng.normal(size=(t, n, h, w, 1)) * 0.3)
    valid = rng.random((t, n, h, w)) < 0.8
    valid[0, 0, 0, 0] = True  # keep every image non-empty
    return pred, gt, sigma, valid


def test_pointmap_loss_zero_case():
    pred, _, _, valid = _loss_inputs()
    e, g, r = pointmap_loss(
        T.tensor(pred, dtype="f64"),
        T.tensor(np.ones(pred.shape[:-1] + (1,)), dtype="f64"),
        pred,
        valid,
    )
    assert float(e.data) == 0.0 and float(g.data) == 0.0 and float(r.data) == 0.0


def test_pointmap_loss_sigma_e_regularizer():
    pred, _, _, valid = _loss_inputs(1)
    e, g, r = pointmap_loss(
        T.tensor(pred, dtype="f64"),
        T.tensor(np.full(pred.shape[:-1] + (1,), np.e), dtype="f64"),
        pred,
        valid,
        alpha=2.0,
    )
    assert float(e.data) == 0.0 and float(g.data) == 0.0
    assert abs(float(r.data) + 2.0) < 1e-9


def test_pointmap_loss_single_pixel_closed_form():
    pred = np.zeros((1, 1, 4, 4, 3))
    gt = pred.copy()
    gt[0, 0, 2, 2] = [-3.0, -4.0, 0.0]  # offset (3,4,0): norm 5
    valid = np.zeros((1, 1, 4, 4), bool)
    valid[0, 0, 2, 2] = True
    sigma = np.full((1, 1, 4, 4, 1), 2.0)
    e, g, r = pointmap_loss(T.tensor(pred, dtype="f64"), T.tensor(sigma, dtype="f64"), gt, valid)
    assert abs(float(e.data) - 10.0) < 1e-12
    assert float(g.data) == 0.0
    assert abs(float(r.data) + 2.0 * math.log(2.0)) < 1e-12


def test_pointmap_loss_rejects_bad_sigma():
    pred, gt, sigma, valid = _loss_inputs(2)
    with pytest.raises(ValueError):
        pointmap_loss(T.tensor(pred, dtype="f64"), T.tensor(-sigma, dtype="f64"), gt, valid)


def test_pointmap_loss_no_valid_anywhere_raises():
    pred, gt, sigma, _ = _loss_inputs(3)
    with pytest.raises(ValueError):
        pointmap_loss(
            T.tensor(pred, dtype="f64"),
            T.tensor(sigma, dtype="f64"),
            gt,
            np.zeros(pred.shape[:-1], bool),
        )


def test_pointmap_loss_skips_empty_images():
    pred, gt, sigma, valid = _loss_inputs(4)
    valid[1, 1] = False  # one fully-invalid image is dropped from the average
    e, _, _ = pointmap_loss(T.tensor(pred, dtype="f64"), T.tensor(sigma, dtype="f64"), gt, valid)
    assert math.isfinite(float(e.data))


def test_total_loss_combination_identity():
    pred, gt, sigma, valid = _loss_inputs(5)
    poses = [EgoPose.identity(), EgoPose(np.array([2.0, 0.0, 0.0]), yaw_quat(0.2))]
    pred7 = T.tensor(np.random.default_rng(5).normal(size=(2, 7)), dtype="f64")
    total, rep = total_loss(
        pred7,
        T.tensor(pred, dtype="f64"),
        T.tensor(sigma, dtype="f64"),
        poses,
        gt,
        valid,
        scaling=ScalingTransform("linear10"),
    )
    combo = rep.lam * rep.pose_term + rep.pmap_error_term + rep.pmap_grad_term + rep.pmap_reg_term
    assert abs(rep.total - combo) < 1e-9
    assert abs(float(total.data) - rep.total) < 1e-12


def test_total_loss_zero_when_perfect():
    rng = np.random.default_rng(6)
    gt = rng.normal(size=(1, 2, 4, 4, 3)) * 20
    valid = np.ones((1, 2, 4, 4), bool)
    poses = [EgoPose.identity()]
    scaling = ScalingTransform("linear10")
    pred7 = T.tensor(gt_pose_targets(poses, scaling), dtype="f64")
    total, rep = total_loss(
        pred7,
        T.tensor(scaling.forward(gt), dtype="f64"),
        T.tensor(np.ones((1, 2, 4, 4, 1)), dtype="f64"),
        poses,
        gt,
        valid,
        scaling=scaling,
    )
    assert float(total.data) == 0.0
    assert rep.total == 0.0


def test_regularizer_bounds_under_clamp():
    # sigma within [1e-3, 1e3] and alpha=2 bound the reg term by 2*ln(1e3)
    rng = np.random.default_rng(7)
    pred, gt, _, valid = _loss_inputs(7)
    sigma = np.exp(rng.uniform(np.log(1e-3), np.log(1e3), size=pred.shape[:-1] + (1,)))
    _, _, r = pointmap_loss(
        T.tensor(pred, dtype="f64"), T.tensor(sigma, dtype="f64"), gt, valid, alpha=2.0
    )
    bound = 2.0 * math.log(1e3) + 1e-9
    assert -bound <= float(r.data) <= bound


def test_view_permutation_invariance():
    pred, gt, sigma, valid = _loss_inputs(8, shape=(2, 3, 4, 6))
    perm = [2, 0, 1]
    args = lambda p, g, s, v: (
        T.tensor(p, dtype="f64"),
        T.tensor(s, dtype="f64"),
        g,
        v,
    )
    e1, g1, r1 = pointmap_loss(*args(pred, gt, sigma, valid))
    e2, g2, r2 = pointmap_loss(*args(pred[:, perm], gt[:, perm], sigma[:, perm], valid[:, perm]))
    for a, b in ((e1, e2), (g1, g2), (r1, r2)):
        assert abs(float(a.data) - float(b.data)) < 1e-12


def test_linear10_error_term_is_tenth_of_linear1():
    rng = np.random.default_rng(9)
    gt_metric = rng.normal(size=(1, 2, 4, 6, 3)) * 50
    pred_metric = gt_metric + rng.normal(size=gt_metric.shape)
    valid = np.ones(gt_metric.shape[:-1], bool)
    sigma = T.tensor(np.ones(gt_metric.shape[:-1] + (1,)), dtype="f64")
    terms = {}
    for kind in ("linear1", "linear10"):
        s = ScalingTransform(kind)
        e, _, _ = pointmap_loss(
            T.tensor(s.forward(pred_metric), dtype="f64"), sigma, s.forward(gt_metric), valid
        )
        terms[kind] = float(e.data)
    assert abs(terms["linear10"] - terms["linear1"] / 10.0) < 1e-12 * abs(terms["linear1"])


def test_masked_pixels_bitwise_inert():
    pred, gt, sigma, valid = _loss_inputs(10)
    poses = [EgoPose.identity(), EgoPose(np.array([1.0, 0.0, 0.0]), yaw_quat(0.1))]
    pred7 = np.random.default_rng(10).normal(size=(2, 7))
    scaling = ScalingTransform("linear10")

    def run(pmap, sig):
        total, _ = total_loss(
            T.tensor(pred7, dtype="f64"),
            T.tensor(pmap, dtype="f64"),
            T.tensor(sig, dtype="f64"),
            poses,
            gt,
            valid,
            scaling=scaling,
        )
        return float(total.data)

    base = run(pred, sigma)
    perturbed = pred.copy()
    perturbed[~valid] += 123.456  # only invalid pixels change
    sigma_p = sigma.copy()
    sigma_p[~valid] *= 7.0
    assert run(perturbed, sigma_p) == base


def test_total_loss_gradient_matches_fd():
    rng = np.random.default_rng(11)
    gt = rng.normal(size=(1, 1, 4, 4, 3)) * 10
    valid = rng.random((1, 1, 4, 4)) < 0.8
    valid[0, 0, 1, 1] = True
    poses = [EgoPose.identity()]
    scaling = ScalingTransform("linear10")
    pred = rng.normal(size=gt.shape)
    raw_sig = rng.normal(size=gt.shape[:-1] + (1,)) * 0.2
    pose_raw = rng.normal(size=(1, 7))

    def build(pv, sv, qv):
        pt = T.tensor(pv, dtype="f64", requires_grad=True)
        st = T.exp(T.tensor(sv, dtype="f64", requires_grad=True))
        qt = T.tensor(qv, dtype="f64", requires_grad=True)
        return pt, st, qt

    pt, st, qt = build(pred, raw_sig, pose_raw)
    total, _ = total_loss(qt, pt, st, poses, gt, valid, scaling=scaling)
    T.backward(total)

    def value(pv, sv, qv):
        with T.no_grad():
            a, b, c = build(pv, sv, qv)
            t, _ = total_loss(c, a, b, poses, gt, valid, scaling=scaling)
            return float(t.data)

    h = 1e-6
    # probe a handful of coordinates in each input
    for arr, grad, name in (
        (pred, pt.grad, "pred"),
        (pose_raw, qt.grad, "pose"),
    ):
        flat = arr.reshape(-1)
        idx = np.random.default_rng(12).choice(flat.size, size=5, replace=False)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            fp = value(pred, raw_sig, pose_raw)
            flat[i] = orig - h
            fm = value(pred, raw_sig, pose_raw)
            flat[i] = orig
            fd = (fp - fm) / (2 * h)
            an = grad.reshape(-1)[i]
            assert abs(an - fd) < 1e-5 * max(1.0, abs(an)), (name, i, an, fd)


def test_loss_report_json():
    rep = LossReport(total=2.05, pose_term=0.2, pmap_error_term=1.0, pmap_grad_term=0.1, pmap_reg_term=-0.05)
    d = rep.to_json()
    assert d["lambda"] == 5.0 and d["alpha"] == 2.0
    assert abs(d["lambda"] * d["pose_term"] + d["pmap_error_term"] + d["pmap_grad_term"] + d["pmap_reg_term"] - d["total"]) < 1e-12

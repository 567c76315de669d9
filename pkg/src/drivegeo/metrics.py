"""Evaluation metrics with brute-force oracle twins.

Chamfer accuracy/completeness on valid point sets, ray-depth Abs Rel and
delta < 1.25, and pose AUC@30 from relative-pose RRA/RTA over frame pairs.
Each accelerated implementation has an independent slow twin used by the
verification suite: chamfer against an O(n*m) scan, depth metrics against
per-pixel loops, AUC against a per-threshold loop on 4x4 matrix algebra.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .geometry import EgoPose, pose_relative, quat_geodesic_deg

AUC_THRESHOLDS_DEG = np.arange(1, 31)
TRANSLATION_EPS_M = 1e-6
DEFAULT_CHAMFER_CAP = 20_000


@dataclass
class MetricReport:
    accuracy_m: float
    completeness_m: float
    abs_rel: float
    delta_125: float
    auc30: float
    n_pred_points: int
    n_gt_points: int
    n_pixels: int
    n_pairs: int

    def __post_init__(self):
        values = [self.accuracy_m, self.completeness_m, self.abs_rel, self.delta_125, self.auc30]
        if not all(math.isfinite(v) for v in values):
            raise ValueError("metric fields must be finite")
        if not (0.0 <= self.delta_125 <= 1.0):
            raise ValueError("delta fraction out of range")
        if not (0.0 <= self.auc30 <= 100.0):
            raise ValueError("auc percentage out of range")
        if min(self.n_pred_points, self.n_gt_points, self.n_pixels, self.n_pairs) <= 0:
            raise ValueError("metric counts must be positive")

    def to_json(self) -> dict:
        return {
            "accuracy_m": self.accuracy_m,
            "completeness_m": self.completeness_m,
            "abs_rel": self.abs_rel,
            "delta_125": self.delta_125,
            "auc30": self.auc30,
            "n_pred_points": self.n_pred_points,
            "n_gt_points": self.n_gt_points,
            "n_pixels": self.n_pixels,
            "n_pairs": self.n_pairs,
        }


# ---------------------------------------------------------------------------
# Chamfer
# ---------------------------------------------------------------------------


def chamfer(pred_pts: np.ndarray, gt_pts: np.ndarray) -> tuple[float, float]:
    """(accuracy, completeness): mean nearest-neighbor distance each way."""
    pred_pts = np.asarray(pred_pts, dtype=np.float64).reshape(-1, 3)
    gt_pts = np.asarray(gt_pts, dtype=np.float64).reshape(-1, 3)
    if len(pred_pts) == 0 or len(gt_pts) == 0:
        raise ValueError("chamfer requires nonempty point sets")
    acc = float(np.mean(cKDTree(gt_pts).query(pred_pts, k=1)[0]))
    comp = float(np.mean(cKDTree(pred_pts).query(gt_pts, k=1)[0]))
    return acc, comp


def chamfer_bruteforce(
    pred_pts: np.ndarray, gt_pts: np.ndarray, chunk: int = 2048
) -> tuple[float, float]:
    """O(n*m) oracle twin of :func:`chamfer`."""
    pred_pts = np.asarray(pred_pts, dtype=np.float64).reshape(-1, 3)
    gt_pts = np.asarray(gt_pts, dtype=np.float64).reshape(-1, 3)
    if len(pred_pts) == 0 or len(gt_pts) == 0:
        raise ValueError("chamfer requires nonempty point sets")

    def one_way(a, b):
        mins = np.empty(len(a))
        for i in range(0, len(a), chunk):
            block = a[i : i + chunk]
            d2 = ((block[:, None, :] - b[None, :, :]) ** 2).sum(axis=2)
            mins[i : i + chunk] = np.sqrt(d2.min(axis=1))
        return float(np.mean(mins))

    return one_way(pred_pts, gt_pts), one_way(gt_pts, pred_pts)


def subsample_points(pts: np.ndarray, cap: int, seed: int = 0) -> np.ndarray:
    pts = np.asarray(pts).reshape(-1, 3)
    if len(pts) <= cap:
        return pts
    idx = np.random.default_rng(seed).choice(len(pts), size=cap, replace=False)
    return pts[np.sort(idx)]


# ---------------------------------------------------------------------------
# Ray depth
# ---------------------------------------------------------------------------


def ray_depth(pointmap: np.ndarray, ego_center: np.ndarray) -> np.ndarray:
    """Distance from each 3D point to its frame's ego center (both in reference coords)."""
    pointmap = np.asarray(pointmap, dtype=np.float64)
    center = np.asarray(ego_center, dtype=np.float64).reshape(3)
    return np.linalg.norm(pointmap - center, axis=-1)


def depth_metrics(pred_d: np.ndarray, gt_d: np.ndarray, mask: np.ndarray) -> tuple[float, float]:
    """(abs_rel, delta_125) over masked pixels; gt must be positive there."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("depth_metrics: empty mask")
    p = np.asarray(pred_d, dtype=np.float64)[mask]
    g = np.asarray(gt_d, dtype=np.float64)[mask]
    if float(g.min()) <= 0.0:
        raise ValueError("depth_metrics: non-positive ground-truth depth under mask")
    abs_rel = float(np.mean(np.abs(p - g) / g))
    with np.errstate(divide="ignore"):
        ratio = np.maximum(p / g, g / p)
    delta = float(np.count_nonzero(ratio < 1.25) / len(g))
    return abs_rel, delta


def depth_metrics_loop(pred_d: np.ndarray, gt_d: np.ndarray, mask: np.ndarray) -> tuple[float, float]:
    """Per-pixel loop oracle twin of :func:`depth_metrics`."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("depth_metrics: empty mask")
    rels = []
    passed = 0
    total = 0
    flat_p = np.asarray(pred_d, dtype=np.float64).reshape(-1)
    flat_g = np.asarray(gt_d, dtype=np.float64).reshape(-1)
    with np.errstate(divide="ignore"):
        for i, m in enumerate(mask.reshape(-1)):
            if not m:
                continue
            p, g = flat_p[i], flat_g[i]
            if g <= 0.0:
                raise ValueError("depth_metrics: non-positive ground-truth depth under mask")
            rels.append(abs(p - g) / g)
            r = p / g if p > g else g / p
            if r < 1.25:
                passed += 1
            total += 1
    return float(np.mean(np.asarray(rels))), float(passed / total)


# ---------------------------------------------------------------------------
# Pose AUC@30
# ---------------------------------------------------------------------------


def _direction_angle_deg(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na < TRANSLATION_EPS_M and nb < TRANSLATION_EPS_M:
        return 0.0
    if na < TRANSLATION_EPS_M or nb < TRANSLATION_EPS_M:
        return 180.0
    c = float(np.dot(a, b) / (na * nb))
    return math.degrees(math.acos(min(1.0, max(-1.0, c))))


def pair_pose_errors(pred_poses: list[EgoPose], gt_poses: list[EgoPose]) -> np.ndarray:
    """max(RRA, RTA) in degrees for every unordered frame pair i < j."""
    if len(pred_poses) != len(gt_poses):
        raise ValueError("pose lists differ in length")
    if len(gt_poses) < 2:
        raise ValueError("pose AUC needs at least 2 frames")
    errs = []
    n = len(gt_poses)
    for i in range(n):
        for j in range(i + 1, n):
            rel_p = pose_relative(pred_poses[i], pred_poses[j])
            rel_g = pose_relative(gt_poses[i], gt_poses[j])
            rra = quat_geodesic_deg(rel_p.q, rel_g.q)
            rta = _direction_angle_deg(rel_p.t, rel_g.t)
            errs.append(max(rra, rta))
    return np.asarray(errs)


def pose_auc30(pred_poses: list[EgoPose], gt_poses: list[EgoPose]) -> float:
    """Mean of Acc(tau) over tau = 1..30 degrees, as a percentage."""
    errs = pair_pose_errors(pred_poses, gt_poses)
    accs = np.array([float(np.count_nonzero(errs < tau) / len(errs)) for tau in AUC_THRESHOLDS_DEG])
    return float(np.mean(accs) * 100.0)


def pose_auc30_loop(pred_poses: list[EgoPose], gt_poses: list[EgoPose]) -> float:
    """Per-threshold-loop oracle on homogeneous-matrix algebra."""
    if len(gt_poses) < 2:
        raise ValueError("pose AUC needs at least 2 frames")
    mats_p = [p.matrix() for p in pred_poses]
    mats_g = [p.matrix() for p in gt_poses]
    n = len(gt_poses)
    errs = []
    for i in range(n):
        for j in range(i + 1, n):
            rel_p = np.linalg.solve(mats_p[i], mats_p[j])
            rel_g = np.linalg.solve(mats_g[i], mats_g[j])
            r = rel_p[:3, :3].T @ rel_g[:3, :3]
            cos_a = (np.trace(r) - 1.0) / 2.0
            rra = math.degrees(math.acos(min(1.0, max(-1.0, cos_a))))
            rta = _direction_angle_deg(rel_p[:3, 3], rel_g[:3, 3])
            errs.append(max(rra, rta))
    accs = []
    for tau in AUC_THRESHOLDS_DEG:
        hits = 0
        for e in errs:
            if e < tau:
                hits += 1
        accs.append(hits / len(errs))
    return float(np.mean(np.asarray(accs)) * 100.0)


# ---------------------------------------------------------------------------
# Sample-level evaluation
# ---------------------------------------------------------------------------


def evaluate_pointmaps(
    pred_pointmaps: np.ndarray,
    pred_poses: list[EgoPose],
    gt_pointmaps: np.ndarray,
    gt_poses: list[EgoPose],
    valid: np.ndarray,
    chamfer_cap: int = DEFAULT_CHAMFER_CAP,
    seed: int = 0,
) -> MetricReport:
    """Full metric suite for one clip; metrics use GT-valid pixels only."""
    valid = np.asarray(valid, dtype=bool)
    frames = len(gt_poses)
    pred_pts = subsample_points(pred_pointmaps[valid], chamfer_cap, seed)
    gt_pts = subsample_points(gt_pointmaps[valid], chamfer_cap, seed + 1)
    acc, comp = chamfer(pred_pts, gt_pts)

    pred_d = np.zeros(valid.shape)
    gt_d = np.zeros(valid.shape)
    for t in range(frames):
        pred_d[t] = ray_depth(pred_pointmaps[t], pred_poses[t].t)
        gt_d[t] = ray_depth(gt_pointmaps[t], gt_poses[t].t)
    abs_rel, delta = depth_metrics(pred_d, gt_d, valid)
    auc = pose_auc30(pred_poses, gt_poses)
    n_pairs = frames * (frames - 1) // 2
    return MetricReport(
        accuracy_m=acc,
        completeness_m=comp,
        abs_rel=abs_rel,
        delta_125=delta,
        auc30=auc,
        n_pred_points=len(pred_pts),
        n_gt_points=len(gt_pts),
        n_pixels=int(valid.sum()),
        n_pairs=n_pairs,
    )


def aggregate_reports(reports: list[MetricReport]) -> MetricReport:
    """Unweighted mean of per-sample metrics; counts are summed."""
    if not reports:
        raise ValueError("no reports to aggregate")
    return MetricReport(
        accuracy_m=float(np.mean([r.accuracy_m for r in reports])),
        completeness_m=float(np.mean([r.completeness_m for r in reports])),
        abs_rel=float(np.mean([r.abs_rel for r in reports])),
        delta_125=float(np.mean([r.delta_125 for r in reports])),
        auc30=float(np.mean([r.auc30 for r in reports])),
        n_pred_points=sum(r.n_pred_points for r in reports),
        n_gt_points=sum(r.n_gt_points for r in reports),
        n_pixels=sum(r.n_pixels for r in reports),
        n_pairs=sum(r.n_pairs for r in reports),
    )

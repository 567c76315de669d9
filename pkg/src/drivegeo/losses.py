"""Multi-task training loss and target coordinate normalization.

The total objective is ``lambda * pose_term + pointmap terms`` where the
pose term is a per-frame L1 on 7-dim (translation, quaternion) vectors and
the point-map term couples an uncertainty-weighted Euclidean error, a
spatial-gradient error, and a confidence regularizer ``-alpha * log sigma``.
Point coordinates (and, by decision, pose translations) are regressed in a
normalized space: divided by 1/10/100 or passed through arcsinh.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .geometry import EgoPose

DEFAULT_POSE_WEIGHT = 5.0
DEFAULT_ALPHA = 2.0

SCALING_KINDS = ("linear1", "linear10", "linear100", "arcsinh")


@dataclass(frozen=True)
class ScalingTransform:
    """Componentwise coordinate normalization with an exact inverse."""

    kind: str = "linear10"

    def __post_init__(self):
        if self.kind not in SCALING_KINDS:
            raise ValueError(f"unknown scaling kind {self.kind!r}; expected one of {SCALING_KINDS}")

    @property
    def divisor(self) -> float | None:
        return {"linear1": 1.0, "linear10": 10.0, "linear100": 100.0}.get(self.kind)

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if self.kind == "arcsinh":
            return np.arcsinh(x)
        return x / self.divisor

    def inverse(self, y: np.ndarray) -> np.ndarray:
        y = np.asarray(y, dtype=np.float64)
        if self.kind == "arcsinh":
            return np.sinh(y)
        return y * self.divisor


@dataclass
class LossReport:
    total: float
    pose_term: float
    pmap_error_term: float
    pmap_grad_term: float
    pmap_reg_term: float
    lam: float = DEFAULT_POSE_WEIGHT
    alpha: float = DEFAULT_ALPHA

    def to_json(self) -> dict:
        return {
            "total": self.total,
            "pose_term": self.pose_term,
            "pmap_error_term": self.pmap_error_term,
            "pmap_grad_term": self.pmap_grad_term,
            "pmap_reg_term": self.pmap_reg_term,
            "lambda": self.lam,
            "alpha": self.alpha,
        }


def gt_pose_targets(poses: list[EgoPose], scaling: ScalingTransform) -> np.ndarray:
    """Stack poses into (T, 7) targets: scaled translation, canonical quaternion."""
    rows = [np.concatenate([scaling.forward(p.t), p.q]) for p in poses]
    return np.stack(rows)


def pose_loss(pred7: T.Tensor, gt7: np.ndarray) -> T.Tensor:
    """Mean over frames of the L1 norm of the 7-vector residual."""
    frames = pred7.shape[0]
    if frames == 0:
        raise ValueError("pose_loss with zero frames")
    if pred7.shape != tuple(np.shape(gt7)):
        raise T.ShapeError(f"pose shapes differ: {pred7.shape} vs {np.shape(gt7)}")
    target = T.tensor(gt7, dtype=pred7.dtype)
    return T.mul(T.tsum(T.tabs(T.sub(pred7, target))), 1.0 / frames)


def _image_average_weights(valid: np.ndarray, dtype) -> tuple[np.ndarray, np.ndarray]:
    """Per-pixel mask and per-image weights for mean-over-valid, mean-over-images.

    Images without any valid pixel are dropped from the cross-image average.
    """
    counts = valid.sum(axis=(2, 3))
    active = counts > 0
    n_active = int(active.sum())
    if n_active == 0:
        raise ValueError("pointmap_loss: no valid pixels in any image")
    weights = np.zeros_like(counts, dtype=dtype)
    weights[active] = 1.0 / (counts[active] * n_active)
    return valid.astype(dtype), weights


def _weighted_image_mean(per_pixel: T.Tensor, mask: np.ndarray, weights: np.ndarray) -> T.Tensor:
    masked = T.mul(per_pixel, T.Tensor(mask))
    per_image = T.tsum(masked, axis=(2, 3))
    return T.tsum(T.mul(per_image, T.Tensor(weights)))


def pointmap_loss(
    pred_scaled: T.Tensor,
    sigma: T.Tensor,
    gt_scaled: np.ndarray,
    valid: np.ndarray,
    alpha: float = DEFAULT_ALPHA,
) -> tuple[T.Tensor, T.Tensor, T.Tensor]:
    """Error, gradient, and regularizer terms of the point-map loss.

    All three are averaged over valid pixels within each image and then
    over images. Forward differences whose neighbor is invalid or out of
    bounds contribute nothing to the gradient norm.
    """
    if pred_scaled.shape != tuple(np.shape(gt_scaled)):
        raise T.ShapeError("pred/gt shape mismatch")
    if sigma.shape != pred_scaled.shape[:-1] + (1,):
        raise T.ShapeError(f"sigma must be (..., 1), got {sigma.shape}")
    if sigma.size and float(sigma.data.min()) <= 0.0:
        raise ValueError("sigma must be positive")
    dtype = pred_scaled.data.dtype
    gt = T.tensor(gt_scaled, dtype=pred_scaled.dtype)
    mask, weights = _image_average_weights(valid, dtype)

    sigma_pix = T.reshape(sigma, sigma.shape[:-1])
    diff = T.sub(pred_scaled, gt)
    err_pix = T.mul(T.vector_norm(diff, axis=-1), sigma_pix)
    error_term = _weighted_image_mean(err_pix, mask, weights)

    # forward differences along rows (H) and columns (W), zero-padded back
    # to the full grid so the 6 channels stay pixel-aligned
    Tn, Nn, H, W, _ = pred_scaled.shape
    mask_h = (valid[:, :, 1:, :] & valid[:, :, :-1, :]).astype(dtype)[..., None]
    mask_w = (valid[:, :, :, 1:] & valid[:, :, :, :-1]).astype(dtype)[..., None]
    gt_dh = (gt_scaled[:, :, 1:, :, :] - gt_scaled[:, :, :-1, :, :]) * mask_h
    gt_dw = (gt_scaled[:, :, :, 1:, :] - gt_scaled[:, :, :, :-1, :]) * mask_w
    pred_dh = T.mul(T.sub(pred_scaled[:, :, 1:, :, :], pred_scaled[:, :, :-1, :, :]), T.Tensor(mask_h))
    pred_dw = T.mul(T.sub(pred_scaled[:, :, :, 1:, :], pred_scaled[:, :, :, :-1, :]), T.Tensor(mask_w))
    res_dh = T.sub(pred_dh, T.tensor(gt_dh, dtype=pred_scaled.dtype))
    res_dw = T.sub(pred_dw, T.tensor(gt_dw, dtype=pred_scaled.dtype))
    pad_h = T.zeros((Tn, Nn, 1, W, 3), dtype=pred_scaled.dtype)
    pad_w = T.zeros((Tn, Nn, H, 1, 3), dtype=pred_scaled.dtype)
    res6 = T.concat([T.concat([res_dh, pad_h], axis=2), T.concat([res_dw, pad_w], axis=3)], axis=-1)
    grad_pix = T.vector_norm(res6, axis=-1)
    grad_term = _weighted_image_mean(grad_pix, mask, weights)

    reg_pix = T.mul(T.log(sigma_pix), -alpha)
    reg_term = _weighted_image_mean(reg_pix, mask, weights)
    return error_term, grad_term, reg_term


def total_loss(
    pred_pose7: T.Tensor,
    pred_pmap_scaled: T.Tensor,
    sigma: T.Tensor,
    gt_poses: list[EgoPose],
    gt_pointmaps: np.ndarray,
    valid: np.ndarray,
    scaling: ScalingTransform,
    lam: float = DEFAULT_POSE_WEIGHT,
    alpha: float = DEFAULT_ALPHA,
) -> tuple[T.Tensor, LossReport]:
    """Combine pose and point-map terms; ground truth is scaled on entry."""
    gt7 = gt_pose_targets(gt_poses, scaling)
    pose_t = pose_loss(pred_pose7, gt7)
    gt_scaled = scaling.forward(gt_pointmaps)
    err_t, grad_t, reg_t = pointmap_loss(pred_pmap_scaled, sigma, gt_scaled, valid, alpha=alpha)
    total = T.add(T.mul(pose_t, lam), T.add(T.add(err_t, grad_t), reg_t))
    report = LossReport(
        total=float(total.data),
        pose_term=float(pose_t.data),
        pmap_error_term=float(err_t.data),
        pmap_grad_term=float(grad_t.data),
        pmap_reg_term=float(reg_t.data),
        lam=lam,
        alpha=alpha,
    )
    return total, report

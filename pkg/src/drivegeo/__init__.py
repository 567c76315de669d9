"""Metric-scale 3D point maps and ego poses from unposed multi-view driving clips.

A desk-scale, fully verifiable stack: a numpy-backed tensor engine with
reverse-mode differentiation, SE(3) geometry, a synthetic scene generator
with exact ground truth, a factorized spatial-temporal attention model,
uncertainty-weighted losses with coordinate scaling, evaluation metrics
with brute-force oracle twins, a pseudo-label alignment/filter pipeline,
and a deterministic trainer.
"""

from .geometry import (
    CameraModel,
    EgoPose,
    pose_compose,
    pose_inverse,
    pose_relative,
    quat_geodesic_deg,
    transform_points,
)
from .losses import LossReport, ScalingTransform, pointmap_loss, pose_loss, total_loss
from .metrics import (
    MetricReport,
    chamfer,
    chamfer_bruteforce,
    depth_metrics,
    evaluate_pointmaps,
    pose_auc30,
    ray_depth,
)
from .model import DVGTModel, ModelConfig, ModelOutput, attention_cost, count_score_elements
from .pseudolabel import (
    AlignmentResult,
    FilterThresholds,
    inject_failure,
    project_sparse,
    score_and_filter,
    solve_scale_shift,
)
from .synth import (
    SceneSample,
    SceneSpec,
    random_scene_spec,
    read_dataset,
    synthesize,
    write_dataset,
)
from .tensor import Tensor, backward, no_grad
from .training import TrainConfig, fit, lr_at, sample_batch, train_step

__version__ = "0.1.0"

__all__ = [
    "AlignmentResult",
    "CameraModel",
    "DVGTModel",
    "EgoPose",
    "FilterThresholds",
    "LossReport",
    "MetricReport",
    "ModelConfig",
    "ModelOutput",
    "SceneSample",
    "SceneSpec",
    "ScalingTransform",
    "Tensor",
    "TrainConfig",
    "attention_cost",
    "backward",
    "chamfer",
    "chamfer_bruteforce",
    "count_score_elements",
    "depth_metrics",
    "evaluate_pointmaps",
    "fit",
    "inject_failure",
    "lr_at",
    "no_grad",
    "pointmap_loss",
    "pose_auc30",
    "pose_compose",
    "pose_inverse",
    "pose_loss",
    "pose_relative",
    "project_sparse",
    "quat_geodesic_deg",
    "random_scene_spec",
    "ray_depth",
    "read_dataset",
    "sample_batch",
    "score_and_filter",
    "solve_scale_shift",
    "synthesize",
    "total_loss",
    "train_step",
    "transform_points",
    "write_dataset",
]

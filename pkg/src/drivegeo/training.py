"""Desk-scale training loop.

One scene per step: a dataset is drawn by weight, a scene uniformly, then
a view subset and a contiguous frame window re-referenced so its first
frame is the identity pose, all under a per-step image budget. Updates use
adaptive moments with decoupled weight decay, linear-warmup cosine decay,
and global gradient-norm clipping. Checkpoints capture weights, optimizer
moments, and the sampler RNG, so a resumed run continues bit-identically.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .geometry import EgoPose, pose_inverse, pose_relative, transform_points
from .losses import DEFAULT_ALPHA, DEFAULT_POSE_WEIGHT, LossReport, ScalingTransform, total_loss
from .model import DVGTModel
from .serialization import read_tensor, write_tensor
from .synth import SceneSample

STATE_FORMAT_VERSION = "dvgt-train-1"


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 1000
    peak_lr: float = 1e-4
    warmup_fraction: float = 0.05
    grad_clip_norm: float = 1.0
    image_budget: int = 48
    dataset_weights: dict[str, float] = field(default_factory=dict)  # empty -> uniform
    view_range: tuple[int, int] = (2, 8)
    seed: int = 0
    precision: str = "f32"
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.05
    eps: float = 1e-8
    pose_weight: float = DEFAULT_POSE_WEIGHT
    alpha: float = DEFAULT_ALPHA
    checkpoint_every: int = 0  # 0 -> final checkpoint only

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if not (0.0 < self.warmup_fraction < 1.0):
            raise ValueError("warmup_fraction must be in (0, 1)")
        if any(w <= 0 for w in self.dataset_weights.values()):
            raise ValueError("dataset weights must be positive")
        if self.view_range[0] < 1 or self.view_range[0] > self.view_range[1]:
            raise ValueError("bad view_range")
        if self.image_budget < self.view_range[0]:
            raise ValueError("image budget below minimum view count")

    def to_json(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["view_range"] = list(self.view_range)
        d["dataset_weights"] = dict(self.dataset_weights)
        return d

    @staticmethod
    def from_json(d: dict) -> "TrainConfig":
        """Build from a JSON dict; absent fields keep their defaults."""
        d = {k: v for k, v in d.items() if k in TrainConfig.__dataclass_fields__}
        if "view_range" in d:
            d["view_range"] = tuple(d["view_range"])
        return TrainConfig(**d)


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear ramp 0 -> peak over the warmup, then cosine decay to 0."""
    if step < 0 or step > cfg.steps:
        raise ValueError(f"step {step} outside [0, {cfg.steps}]")
    warmup = max(1, int(round(cfg.warmup_fraction * cfg.steps)))
    if step <= warmup:
        return cfg.peak_lr * step / warmup
    progress = (step - warmup) / max(cfg.steps - warmup, 1)
    return cfg.peak_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


# ---------------------------------------------------------------------------
# Batch sampling
# ---------------------------------------------------------------------------


@dataclass
class TrainBatch:
    images: np.ndarray
    pointmaps: np.ndarray
    valid: np.ndarray
    poses: list[EgoPose]
    dataset: str
    scene_index: int
    frame_start: int
    view_indices: np.ndarray


def pick_dataset(names: list[str], cfg: TrainConfig, rng: np.random.Generator) -> str:
    weights = np.array([cfg.dataset_weights.get(n, 1.0) for n in names], dtype=np.float64)
    return names[int(rng.choice(len(names), p=weights / weights.sum()))]


def reref_window(scene: SceneSample, start: int, frames: int, views: np.ndarray) -> TrainBatch:
    """Slice a frame window and view subset; first sampled frame becomes identity."""
    sl = slice(start, start + frames)
    ref_inv = pose_inverse(scene.poses[start])
    poses = [EgoPose.identity()]
    poses += [pose_relative(scene.poses[start], scene.poses[start + i]) for i in range(1, frames)]
    pmaps = scene.pointmaps[sl][:, views]
    if not scene.poses[start].is_identity(tol=0.0):
        pmaps = transform_points(ref_inv, pmaps)
    return TrainBatch(
        images=scene.images[sl][:, views],
        pointmaps=pmaps,
        valid=scene.valid[sl][:, views],
        poses=poses,
        dataset="",
        scene_index=-1,
        frame_start=start,
        view_indices=views,
    )


def sample_batch(
    datasets: dict[str, list[SceneSample]], cfg: TrainConfig, rng: np.random.Generator
) -> TrainBatch:
    """Weighted dataset pick, uniform scene, dynamic views/frames under the budget."""
    names = sorted(datasets)
    if not names or any(len(v) == 0 for v in datasets.values()):
        raise ValueError("empty dataset")
    name = pick_dataset(names, cfg, rng)
    scenes = datasets[name]
    scene_index = int(rng.integers(len(scenes)))
    scene = scenes[scene_index]

    n_lo, n_hi = cfg.view_range
    n_hi = min(n_hi, scene.views)
    n_lo = min(n_lo, n_hi)
    views_count = int(rng.integers(n_lo, n_hi + 1))
    t_max = min(cfg.image_budget // views_count, scene.frames)
    frames = 1 if t_max <= 1 else int(rng.integers(2, t_max + 1))
    start = int(rng.integers(0, scene.frames - frames + 1))
    views = np.sort(rng.choice(scene.views, size=views_count, replace=False))
    batch = reref_window(scene, start, frames, views)
    batch.dataset = name
    batch.scene_index = scene_index
    return batch


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @staticmethod
    def init(model: DVGTModel) -> "AdamState":
        return AdamState(
            m={k: np.zeros_like(p.data) for k, p in model.params.items()},
            v={k: np.zeros_like(p.data) for k, p in model.params.items()},
        )


def global_grad_norm(model: DVGTModel) -> float:
    total = 0.0
    for p in model.params.values():
        if p.grad is not None:
            g = p.grad.astype(np.float64, copy=False)
            total += float((g * g).sum())
    return math.sqrt(total)


def clip_gradients(model: DVGTModel, max_norm: float) -> float:
    """Scale all gradients so the global norm is at most max_norm; returns raw norm."""
    norm = global_grad_norm(model)
    if norm > max_norm:
        scale = max_norm / norm
        for p in model.params.values():
            if p.grad is not None:
                p.grad *= np.asarray(scale, dtype=p.grad.dtype)
    return norm


def adamw_update(model: DVGTModel, state: AdamState, lr: float, cfg: TrainConfig) -> None:
    state.t += 1
    b1, b2 = cfg.beta1, cfg.beta2
    bias1 = 1.0 - b1**state.t
    bias2 = 1.0 - b2**state.t
    for name, p in model.params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += np.asarray((1.0 - b1) * g, dtype=m.dtype)
        v *= b2
        v += np.asarray((1.0 - b2) * (g * g), dtype=v.dtype)
        update = (m / bias1) / (np.sqrt(v / bias2) + cfg.eps) + cfg.weight_decay * p.data
        p.data -= np.asarray(lr * update, dtype=p.data.dtype)


# ---------------------------------------------------------------------------
# Train step and loop
# ---------------------------------------------------------------------------


def train_step(
    model: DVGTModel, batch: TrainBatch, cfg: TrainConfig, state: AdamState, lr: float
) -> tuple[LossReport, float]:
    """Forward, loss, backward, clip, update. Returns (report, raw grad norm)."""
    model.zero_grads()
    T.clear_tape()
    out = model.forward(batch.images)
    try:
        loss, report = total_loss(
            out.poses_raw_t,
            out.pointmaps_scaled_t,
            out.sigma_t,
            batch.poses,
            batch.pointmaps,
            batch.valid,
            scaling=ScalingTransform(model.cfg.scaling),
            lam=cfg.pose_weight,
            alpha=cfg.alpha,
        )
        T.backward(loss)
    except T.NonFiniteError as exc:
        raise T.NonFiniteError(f"non-finite loss at optimizer step {state.t + 1}: {exc}") from exc
    raw_norm = clip_gradients(model, cfg.grad_clip_norm)
    adamw_update(model, state, lr, cfg)
    return report, raw_norm


def save_checkpoint(
    directory: str | Path,
    model: DVGTModel,
    state: AdamState,
    rng: np.random.Generator,
    next_step: int,
    cfg: TrainConfig,
) -> Path:
    directory = Path(directory)
    model.save_weights(directory / "model")
    opt_dir = directory / "opt"
    opt_dir.mkdir(parents=True, exist_ok=True)
    index = {}
    for i, name in enumerate(sorted(state.m)):
        fm, fv = f"m_{i:04d}.dvt", f"v_{i:04d}.dvt"
        write_tensor(opt_dir / fm, state.m[name])
        write_tensor(opt_dir / fv, state.v[name])
        index[name] = [fm, fv]
    payload = {
        "format_version": STATE_FORMAT_VERSION,
        "next_step": next_step,
        "adam_t": state.t,
        "opt_index": index,
        "rng_state": _encode_rng(rng),
        "train_config": cfg.to_json(),
    }
    (directory / "state.json").write_text(json.dumps(payload, indent=1, sort_keys=True))
    return directory


def load_checkpoint(directory: str | Path):
    """Returns (model, state, rng, next_step, cfg) restored exactly."""
    directory = Path(directory)
    payload = json.loads((directory / "state.json").read_text())
    if payload.get("format_version") != STATE_FORMAT_VERSION:
        raise ValueError(f"unexpected trainer state version {payload.get('format_version')!r}")
    model = DVGTModel.load_weights(directory / "model")
    cfg = TrainConfig.from_json(payload["train_config"])
    m, v = {}, {}
    for name, (fm, fv) in payload["opt_index"].items():
        m[name] = read_tensor(directory / "opt" / fm).astype(
            model.params[name].data.dtype, copy=False
        )
        v[name] = read_tensor(directory / "opt" / fv).astype(
            model.params[name].data.dtype, copy=False
        )
    state = AdamState(m=m, v=v, t=int(payload["adam_t"]))
    rng = _decode_rng(payload["rng_state"])
    return model, state, rng, int(payload["next_step"]), cfg


def _encode_rng(rng: np.random.Generator) -> dict:
    st = rng.bit_generator.state
    return {
        "bit_generator": st["bit_generator"],
        "state": str(st["state"]["state"]),
        "inc": str(st["state"]["inc"]),
        "has_uint32": st["has_uint32"],
        "uinteger": st["uinteger"],
    }


def _decode_rng(payload: dict) -> np.random.Generator:
    if payload["bit_generator"] != "PCG64":
        raise ValueError("unsupported RNG in checkpoint")
    rng = np.random.default_rng(0)
    rng.bit_generator.state = {
        "bit_generator": "PCG64",
        "state": {"state": int(payload["state"]), "inc": int(payload["inc"])},
        "has_uint32": payload["has_uint32"],
        "uinteger": payload["uinteger"],
    }
    return rng


def fit(
    model: DVGTModel,
    datasets: dict[str, list[SceneSample]],
    cfg: TrainConfig,
    out_dir: str | Path,
    log_path: str | Path | None = None,
    resume_from: str | Path | None = None,
) -> Path:
    """Run the training loop; returns the final checkpoint directory.

    Logs one JSON line per step. A run resumed from a checkpoint continues
    bit-identically with the uninterrupted run.
    """
    if not datasets or any(len(v) == 0 for v in datasets.values()):
        raise ValueError("empty dataset")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if resume_from is not None:
        model, state, rng, start_step, cfg = load_checkpoint(resume_from)
    else:
        state = AdamState.init(model)
        rng = np.random.default_rng(cfg.seed)
        start_step = 0

    log_file = open(log_path, "a") if log_path is not None else None
    try:
        for step in range(start_step, cfg.steps):
            tic = time.perf_counter()
            lr = lr_at(step, cfg)
            batch = sample_batch(datasets, cfg, rng)
            report, grad_norm = train_step(model, batch, cfg, state, lr)
            if log_file is not None:
                line = report.to_json()
                line.update(
                    {
                        "step": step,
                        "lr": lr,
                        "grad_norm": grad_norm,
                        "dataset": batch.dataset,
                        "s_per_step": time.perf_counter() - tic,
                    }
                )
                log_file.write(json.dumps(line) + "\n")
                log_file.flush()
            if cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0 and step + 1 < cfg.steps:
                save_checkpoint(out_dir / f"step{step + 1:06d}", model, state, rng, step + 1, cfg)
    finally:
        if log_file is not None:
            log_file.close()
    return save_checkpoint(out_dir / "final", model, state, rng, cfg.steps, cfg)

"""Factorized spatial-temporal geometry transformer.

Images are patchified by a linear encoder stub (a stand-in for a pretrained
backbone; any per-image token producer can be slotted in), given a learned
ego token per image and sinusoidal temporal embeddings, then refined by L
blocks. Each factorized block runs three attention stages over restricted
key sets - within one image, across views of one frame, across frames of
one view - each followed by its own MLP sublayer. The global variant uses
one all-token attention per block. Heads decode per-patch tokens into
scaled 3D coordinates plus a positive per-pixel uncertainty, and the
view-summed ego tokens into a 7-dim pose.

Full-scale reference configuration: dim=1024, heads=16, blocks=24,
patch=16. Desk-scale default: dim=64, heads=4, blocks=2, patch=8.
"""

from __future__ import annotations

import contextlib
import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .geometry import EgoPose
from .losses import ScalingTransform
from .serialization import read_tensor, write_tensor

ATTENTION_MODES = ("factorized", "global")
EGO_TOKEN_MODES = ("shared", "per_view_slot")
CHECKPOINT_FORMAT_VERSION = "dvgt-ckpt-1"


@dataclass(frozen=True)
class ModelConfig:
    dim: int = 64
    heads: int = 4
    blocks: int = 2
    patch: int = 8
    attention_mode: str = "factorized"
    use_temporal_embedding: bool = True
    ego_token_mode: str = "shared"
    max_view_slots: int = 8
    layer_scale_init: float = 0.01
    qk_norm: bool = True
    qk_scale_init: float = 10.0
    uncertainty_clamp: tuple[float, float] = (1e-3, 1e3)
    scaling: str = "linear10"

    def __post_init__(self):
        if self.dim % self.heads != 0:
            raise ValueError("dim must be divisible by heads")
        if self.dim % 4 != 0:
            raise ValueError("dim must be divisible by 4 (2D sinusoidal embedding)")
        if self.attention_mode not in ATTENTION_MODES:
            raise ValueError(f"attention_mode must be one of {ATTENTION_MODES}")
        if self.ego_token_mode not in EGO_TOKEN_MODES:
            raise ValueError(f"ego_token_mode must be one of {EGO_TOKEN_MODES}")
        lo, hi = self.uncertainty_clamp
        if not (0 < lo < hi):
            raise ValueError("uncertainty_clamp must be 0 < lo < hi")

    def to_json(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["uncertainty_clamp"] = list(self.uncertainty_clamp)
        return d

    @staticmethod
    def from_json(d: dict) -> "ModelConfig":
        """Build from a JSON dict; absent fields keep their defaults."""
        d = {k: v for k, v in d.items() if k in ModelConfig.__dataclass_fields__}
        if "uncertainty_clamp" in d:
            d["uncertainty_clamp"] = tuple(d["uncertainty_clamp"])
        return ModelConfig(**d)


@dataclass
class TokenGrid:
    """(T, N, P+1, dim) tokens; the last token of each image is the ego token."""

    tokens: T.Tensor
    patch_rows: int
    patch_cols: int

    @property
    def patch_count(self) -> int:
        return self.patch_rows * self.patch_cols


@dataclass
class ModelOutput:
    pointmaps: np.ndarray  # (T, N, H, W, 3) metric, reference-frame coordinates
    sigma: np.ndarray  # (T, N, H, W, 1) in uncertainty_clamp
    poses: list[EgoPose]  # normalized + hemisphere-canonical
    pointmaps_scaled_t: T.Tensor  # differentiable, scaled coordinate space
    sigma_t: T.Tensor
    poses_raw_t: T.Tensor  # (T, 7), quaternion part normalized


# ---------------------------------------------------------------------------
# Attention cost model and instrumentation
# ---------------------------------------------------------------------------


def attention_cost(frames: int, views: int, tokens_per_image: int) -> dict:
    """Score-matrix element counts per block (per head) for both modes."""
    if frames < 1 or views < 1 or tokens_per_image < 1:
        raise ValueError("attention_cost arguments must be positive")
    p = tokens_per_image
    global_count = (frames * views * p) ** 2
    factorized = frames * views * p * p + frames * (views * p) ** 2 + views * (frames * p) ** 2
    return {
        "global": global_count,
        "factorized": factorized,
        "ratio": global_count / factorized,
    }


class ScoreElementCounter:
    """Counts query*key score elements (per head) per attention stage."""

    def __init__(self):
        self.total = 0
        self.by_stage: dict[str, int] = {}

    def add(self, stage: str, count: int) -> None:
        self.total += count
        self.by_stage[stage] = self.by_stage.get(stage, 0) + count


_COUNTERS: list[ScoreElementCounter] = []


@contextlib.contextmanager
def count_score_elements():
    c = ScoreElementCounter()
    _COUNTERS.append(c)
    try:
        yield c
    finally:
        _COUNTERS.remove(c)


# ---------------------------------------------------------------------------
# Sinusoidal embeddings
# ---------------------------------------------------------------------------


def sincos_1d(positions: np.ndarray, dim: int) -> np.ndarray:
    """Interleaved sin/cos embedding, one row per position."""
    if dim % 2 != 0:
        raise ValueError("sincos dim must be even")
    half = dim // 2
    freqs = 1.0 / (10000.0 ** (np.arange(half) / half))
    ang = np.asarray(positions, dtype=np.float64)[:, None] * freqs[None, :]
    out = np.zeros((len(positions), dim))
    out[:, 0::2] = np.sin(ang)
    out[:, 1::2] = np.cos(ang)
    return out


def sincos_2d(rows: int, cols: int, dim: int) -> np.ndarray:
    """(rows*cols, dim) embedding: first half encodes row, second half column."""
    if dim % 4 != 0:
        raise ValueError("2D sincos dim must be divisible by 4")
    half = dim // 2
    r = sincos_1d(np.arange(rows), half)
    c = sincos_1d(np.arange(cols), half)
    grid = np.concatenate(
        [np.repeat(r, cols, axis=0), np.tile(c, (rows, 1))], axis=1
    )
    return grid


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------


class DVGTModel:
    """The network plus its named parameter store."""

    def __init__(self, cfg: ModelConfig, seed: int = 0, dtype: str = "f32"):
        self.cfg = cfg
        self.dtype = dtype
        self.params: dict[str, T.Tensor] = {}
        rng = np.random.default_rng(seed)
        self._build(rng)

    # -- parameters -----------------------------------------------------
    def _param(self, name: str, arr: np.ndarray) -> T.Tensor:
        p = T.tensor(arr, dtype=self.dtype, requires_grad=True)
        self.params[name] = p
        return p

    def _linear_init(self, rng, fan_in: int, fan_out: int, std: float = 0.02) -> np.ndarray:
        return rng.normal(0.0, std, size=(fan_in, fan_out))

    def _build(self, rng) -> None:
        cfg = self.cfg
        d = cfg.dim
        self._param("patch_embed.w", self._linear_init(rng, cfg.patch * cfg.patch * 3, d))
        self._param("patch_embed.b", np.zeros(d))
        if cfg.ego_token_mode == "shared":
            self._param("ego_token", rng.normal(0.0, 0.02, size=(1, d)))
        else:
            self._param("ego_token", rng.normal(0.0, 0.02, size=(cfg.max_view_slots, d)))
        stages = ["local", "spatial", "temporal"] if cfg.attention_mode == "factorized" else ["global"]
        self.stages = stages
        for b in range(cfg.blocks):
            for s in stages:
                pre = f"blocks.{b}.{s}"
                self._param(f"{pre}.ln_g", np.ones(d))
                self._param(f"{pre}.ln_b", np.zeros(d))
                for proj in ("q", "k", "v", "o"):
                    self._param(f"{pre}.w{proj}", self._linear_init(rng, d, d))
                    self._param(f"{pre}.b{proj}", np.zeros(d))
                if cfg.qk_norm:
                    self._param(f"{pre}.qk_scale", np.full(cfg.heads, cfg.qk_scale_init))
                self._param(f"{pre}.ls", np.full(d, cfg.layer_scale_init))
                self._param(f"{pre}.mlp_ln_g", np.ones(d))
                self._param(f"{pre}.mlp_ln_b", np.zeros(d))
                self._param(f"{pre}.mlp_w1", self._linear_init(rng, d, 4 * d))
                self._param(f"{pre}.mlp_b1", np.zeros(4 * d))
                self._param(f"{pre}.mlp_w2", self._linear_init(rng, 4 * d, d))
                self._param(f"{pre}.mlp_b2", np.zeros(d))
                self._param(f"{pre}.mlp_ls", np.full(d, cfg.layer_scale_init))
        self._param("final_ln_g", np.ones(d))
        self._param("final_ln_b", np.zeros(d))
        self._param("point_head.w", self._linear_init(rng, d, cfg.patch * cfg.patch * 4))
        self._param("point_head.b", np.zeros(cfg.patch * cfg.patch * 4))
        self._param("pose_head.w1", self._linear_init(rng, d, d))
        self._param("pose_head.b1", np.zeros(d))
        self._param("pose_head.w2", np.zeros((d, 7)))
        self._param("pose_head.b2", np.array([0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0]))

    def num_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def zero_grads(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    # -- encoder ---------------------------------------------------------
    def encode_images(self, images: np.ndarray) -> TokenGrid:
        cfg = self.cfg
        images = np.asarray(images)
        if images.ndim != 5 or images.shape[-1] != 3:
            raise T.ShapeError(f"images must be (T, N, H, W, 3), got {images.shape}")
        Tn, Nn, H, W, _ = images.shape
        p = cfg.patch
        if H % p or W % p:
            raise T.ShapeError(f"image size {H}x{W} not divisible by patch {p}")
        ph, pw = H // p, W // p
        x = T.tensor(images, dtype=self.dtype)
        x = T.reshape(x, (Tn, Nn, ph, p, pw, p, 3))
        x = T.transpose(x, (0, 1, 2, 4, 3, 5, 6))
        x = T.reshape(x, (Tn, Nn, ph * pw, p * p * 3))
        tok = T.add(T.matmul(x, self.params["patch_embed.w"]), self.params["patch_embed.b"])
        pe = sincos_2d(ph, pw, cfg.dim)
        tok = T.add(tok, T.tensor(pe, dtype=self.dtype))

        if cfg.ego_token_mode == "shared":
            ego = T.reshape(self.params["ego_token"], (1, 1, 1, cfg.dim))
        else:
            if Nn > cfg.max_view_slots:
                raise T.ShapeError(f"{Nn} views exceed max_view_slots={cfg.max_view_slots}")
            ego = T.reshape(self.params["ego_token"][:Nn], (1, Nn, 1, cfg.dim))
        ego = T.broadcast_to(ego, (Tn, Nn, 1, cfg.dim))
        tokens = T.concat([tok, ego], axis=2)

        if cfg.use_temporal_embedding:
            te = sincos_1d(np.arange(Tn), cfg.dim).reshape(Tn, 1, 1, cfg.dim)
            tokens = T.add(tokens, T.tensor(te, dtype=self.dtype))
        return TokenGrid(tokens=tokens, patch_rows=ph, patch_cols=pw)

    # -- attention machinery ----------------------------------------------
    def _attention(self, x: T.Tensor, prefix: str, stage: str) -> T.Tensor:
        """Pre-norm multi-head attention over (groups, tokens, dim)."""
        cfg = self.cfg
        G, S, d = x.shape
        h = cfg.heads
        dh = d // h
        p = self.params
        nx = T.add(T.mul(T.layer_norm(x), p[f"{prefix}.ln_g"]), p[f"{prefix}.ln_b"])

        def proj(which: str) -> T.Tensor:
            y = T.add(T.matmul(nx, p[f"{prefix}.w{which}"]), p[f"{prefix}.b{which}"])
            y = T.reshape(y, (G, S, h, dh))
            return T.transpose(y, (0, 2, 1, 3))

        q, k, v = proj("q"), proj("k"), proj("v")
        if cfg.qk_norm:
            q = T.l2_normalize(q, axis=-1)
            k = T.l2_normalize(k, axis=-1)
            scale = T.reshape(p[f"{prefix}.qk_scale"], (1, h, 1, 1))
            scores = T.mul(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), scale)
        else:
            scores = T.mul(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
        for c in _COUNTERS:
            c.add(stage, G * S * S)
        attn = T.softmax(scores, axis=-1)
        out = T.matmul(attn, v)
        out = T.reshape(T.transpose(out, (0, 2, 1, 3)), (G, S, d))
        out = T.add(T.matmul(out, p[f"{prefix}.wo"]), p[f"{prefix}.bo"])
        return T.add(x, T.mul(out, p[f"{prefix}.ls"]))

    def _mlp(self, x: T.Tensor, prefix: str) -> T.Tensor:
        p = self.params
        nx = T.add(T.mul(T.layer_norm(x), p[f"{prefix}.mlp_ln_g"]), p[f"{prefix}.mlp_ln_b"])
        hdn = T.gelu(T.add(T.matmul(nx, p[f"{prefix}.mlp_w1"]), p[f"{prefix}.mlp_b1"]))
        out = T.add(T.matmul(hdn, p[f"{prefix}.mlp_w2"]), p[f"{prefix}.mlp_b2"])
        return T.add(x, T.mul(out, p[f"{prefix}.mlp_ls"]))

    def _stage(self, grid: T.Tensor, block: int, stage: str) -> T.Tensor:
        """Group tokens for one attention stage, run it plus its MLP sublayer."""
        Tn, Nn, S, d = grid.shape
        prefix = f"blocks.{block}.{stage}"
        if stage == "local":
            x = T.reshape(grid, (Tn * Nn, S, d))
            x = self._attention(x, prefix, stage)
            x = self._mlp(x, prefix)
            return T.reshape(x, (Tn, Nn, S, d))
        if stage == "spatial":
            x = T.reshape(grid, (Tn, Nn * S, d))
            x = self._attention(x, prefix, stage)
            x = self._mlp(x, prefix)
            return T.reshape(x, (Tn, Nn, S, d))
        if stage == "temporal":
            x = T.transpose(grid, (1, 0, 2, 3))
            x = T.reshape(x, (Nn, Tn * S, d))
            x = self._attention(x, prefix, stage)
            x = self._mlp(x, prefix)
            x = T.reshape(x, (Nn, Tn, S, d))
            return T.transpose(x, (1, 0, 2, 3))
        if stage == "global":
            x = T.reshape(grid, (1, Tn * Nn * S, d))
            x = self._attention(x, prefix, stage)
            x = self._mlp(x, prefix)
            return T.reshape(x, (Tn, Nn, S, d))
        raise ValueError(f"unknown stage {stage!r}")

    def apply_blocks(self, grid: TokenGrid) -> TokenGrid:
        tokens = grid.tokens
        for b in range(self.cfg.blocks):
            for stage in self.stages:
                tokens = self._stage(tokens, b, stage)
        return TokenGrid(tokens=tokens, patch_rows=grid.patch_rows, patch_cols=grid.patch_cols)

    # -- heads -------------------------------------------------------------
    def decode_heads(self, grid: TokenGrid) -> ModelOutput:
        cfg = self.cfg
        p = self.params
        tokens = grid.tokens
        Tn, Nn, S, d = tokens.shape
        P = grid.patch_count
        pe = cfg.patch
        normed = T.add(T.mul(T.layer_norm(tokens), p["final_ln_g"]), p["final_ln_b"])

        patch_tok = normed[:, :, :P, :]
        out = T.add(T.matmul(patch_tok, p["point_head.w"]), p["point_head.b"])
        out = T.reshape(out, (Tn, Nn, grid.patch_rows, grid.patch_cols, pe, pe, 4))
        out = T.transpose(out, (0, 1, 2, 4, 3, 5, 6))
        out = T.reshape(out, (Tn, Nn, grid.patch_rows * pe, grid.patch_cols * pe, 4))
        coords_scaled = out[..., 0:3]
        raw_sigma = out[..., 3:4]
        lo, hi = cfg.uncertainty_clamp
        # inner clamp keeps exp finite; outer clamp pins the exact bounds
        sigma = T.clamp(T.exp(T.clamp(raw_sigma, -60.0, 60.0)), lo, hi)

        ego = normed[:, :, S - 1, :]
        pooled = T.tsum(ego, axis=1)
        hid = T.gelu(T.add(T.matmul(pooled, p["pose_head.w1"]), p["pose_head.b1"]))
        raw_pose = T.add(T.matmul(hid, p["pose_head.w2"]), p["pose_head.b2"])
        quat = T.l2_normalize(raw_pose[:, 3:7], axis=-1)
        poses7 = T.concat([raw_pose[:, 0:3], quat], axis=-1)

        scaling = ScalingTransform(cfg.scaling)
        pointmaps = scaling.inverse(coords_scaled.data)
        poses = [
            EgoPose.from_tq(scaling.inverse(v[:3]), v[3:]) for v in poses7.data.astype(np.float64)
        ]
        return ModelOutput(
            pointmaps=pointmaps,
            sigma=sigma.data.copy(),
            poses=poses,
            pointmaps_scaled_t=coords_scaled,
            sigma_t=sigma,
            poses_raw_t=poses7,
        )

    def forward(self, images: np.ndarray) -> ModelOutput:
        return self.decode_heads(self.apply_blocks(self.encode_images(images)))

    # -- checkpointing -------------------------------------------------------
    def save_weights(self, directory: str | Path) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        index = {}
        for name, param in self.params.items():
            fname = "param_" + re.sub(r"[^A-Za-z0-9_]", "_", name) + ".dvt"
            write_tensor(directory / fname, param.data)
            index[name] = fname
        manifest = {
            "format_version": CHECKPOINT_FORMAT_VERSION,
            "config": self.cfg.to_json(),
            "dtype": self.dtype,
            "params": index,
        }
        (directory / "model.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))

    @staticmethod
    def load_weights(directory: str | Path) -> "DVGTModel":
        directory = Path(directory)
        manifest = json.loads((directory / "model.json").read_text())
        if manifest.get("format_version") != CHECKPOINT_FORMAT_VERSION:
            raise ValueError(f"unexpected checkpoint version {manifest.get('format_version')!r}")
        cfg = ModelConfig.from_json(manifest["config"])
        model = DVGTModel(cfg, seed=0, dtype=manifest["dtype"])
        for name, fname in manifest["params"].items():
            arr = read_tensor(directory / fname)
            if model.params[name].shape != arr.shape:
                raise ValueError(f"parameter {name} shape mismatch")
            model.params[name].data = arr.astype(model.params[name].data.dtype, copy=False)
        return model

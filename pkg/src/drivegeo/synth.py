"""Synthetic driving clips with exact geometric ground truth.

Scenes are a ground plane, axis-aligned boxes (optionally moving at
constant velocity), and an optional far wall, viewed by a surround camera
rig from a parametric ego trajectory sampled at 2 Hz. Ray casting gives
closed-form depth, so point maps, masks, poses, and emulated LiDAR returns
are exact. World coordinates coincide with the ego frame of frame 0:
x forward, y left, z up, ground at z = 0.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import CameraModel, EgoPose, matrix_to_quat, pose_compose, quat_to_matrix, yaw_quat
from .serialization import FormatError, read_tensor, sha256_file, write_tensor

DATASET_FORMAT_VERSION = "dvgt-ds-1"
DEFAULT_PIXEL_BUDGET = 8_000_000
_SKY_COLOR = np.array([0.55, 0.70, 0.90])
_LIGHT_DIR = np.array([-0.35, 0.25, -0.90]) / np.linalg.norm([-0.35, 0.25, -0.90])

# camera axes (x right, y down, z forward) expressed in ego axes
_CAM_TO_EGO = np.array([[0.0, 0.0, 1.0], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]])


@dataclass(frozen=True)
class BoxSpec:
    """Axis-aligned box resting in the scene; moves at constant velocity."""

    center: tuple[float, float, float]
    size: tuple[float, float, float]
    albedo: tuple[float, float, float] = (0.6, 0.6, 0.6)
    velocity: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def corners_at(self, elapsed: float) -> tuple[np.ndarray, np.ndarray]:
        c = np.asarray(self.center) + np.asarray(self.velocity) * elapsed
        h = np.asarray(self.size) / 2.0
        return c - h, c + h


@dataclass(frozen=True)
class TrajectorySpec:
    """Parametric ego path sampled at ``frame_hz``."""

    kind: str = "straight"  # straight | arc | lane_change
    speed: float = 10.0  # m/s
    frame_hz: float = 2.0
    turn_rate_deg_s: float = 8.0  # arc only
    lateral_shift: float = 3.5  # lane_change only

    def poses(self, frames: int) -> list[EgoPose]:
        if self.kind not in ("straight", "arc", "lane_change"):
            raise ValueError(f"unknown trajectory kind {self.kind!r}")
        dt = 1.0 / self.frame_hz
        if self.speed == 0.0 or frames == 1:
            return [EgoPose.identity() for _ in range(frames)]
        out = []
        for i in range(frames):
            s = self.speed * dt * i
            if self.kind == "straight":
                pos = np.array([s, 0.0, 0.0])
                yaw = 0.0
            elif self.kind == "arc":
                omega = math.radians(self.turn_rate_deg_s)
                yaw = omega * dt * i
                radius = self.speed / omega
                pos = np.array([radius * math.sin(yaw), radius * (1.0 - math.cos(yaw)), 0.0])
            else:  # lane_change
                tau = i / max(frames - 1, 1)
                y = self.lateral_shift * (3 * tau**2 - 2 * tau**3)
                dy = self.lateral_shift * (6 * tau - 6 * tau**2) / max(frames - 1, 1)
                pos = np.array([s, y, 0.0])
                yaw = math.atan2(dy, self.speed * dt)
            out.append(EgoPose(pos, yaw_quat(yaw)))
        return out


@dataclass(frozen=True)
class GeometrySpec:
    ground: bool = True
    ground_albedo: tuple[float, float, float] = (0.42, 0.42, 0.45)
    boxes: tuple[BoxSpec, ...] = ()
    far_wall: bool = True
    wall_albedo: tuple[float, float, float] = (0.75, 0.72, 0.65)


@dataclass(frozen=True)
class SceneSpec:
    seed: int = 0
    frames: int = 2
    views: int = 2
    height: int = 32
    width: int = 48
    extent: float = 100.0
    trajectory: TrajectorySpec = field(default_factory=TrajectorySpec)
    geometry: GeometrySpec = field(default_factory=GeometrySpec)
    rig: tuple[CameraModel, ...] | None = None  # None -> default surround rig
    sparse_rate: float = 0.01
    sparse_concentrated: bool = False

    def __post_init__(self):
        if self.frames < 1 or self.views < 1:
            raise ValueError("frames and views must be >= 1")
        if self.height < 8 or self.width < 8:
            raise ValueError("image size too small")

    def resolved_rig(self) -> list[CameraModel]:
        if self.rig is not None:
            if len(self.rig) != self.views:
                raise ValueError("rig length does not match views")
            return list(self.rig)
        return default_rig(self.views, self.height, self.width)

    def to_json(self) -> dict:
        d = {
            "seed": self.seed,
            "frames": self.frames,
            "views": self.views,
            "height": self.height,
            "width": self.width,
            "extent": self.extent,
            "trajectory": vars(self.trajectory).copy(),
            "geometry": {
                "ground": self.geometry.ground,
                "ground_albedo": list(self.geometry.ground_albedo),
                "boxes": [
                    {
                        "center": list(b.center),
                        "size": list(b.size),
                        "albedo": list(b.albedo),
                        "velocity": list(b.velocity),
                    }
                    for b in self.geometry.boxes
                ],
                "far_wall": self.geometry.far_wall,
                "wall_albedo": list(self.geometry.wall_albedo),
            },
            "rig": None if self.rig is None else [c.to_json() for c in self.rig],
            "sparse_rate": self.sparse_rate,
            "sparse_concentrated": self.sparse_concentrated,
        }
        return d

    @staticmethod
    def from_json(d: dict) -> "SceneSpec":
        geo = d["geometry"]
        return SceneSpec(
            seed=int(d["seed"]),
            frames=int(d["frames"]),
            views=int(d["views"]),
            height=int(d["height"]),
            width=int(d["width"]),
            extent=float(d["extent"]),
            trajectory=TrajectorySpec(**d["trajectory"]),
            geometry=GeometrySpec(
                ground=bool(geo["ground"]),
                ground_albedo=tuple(geo["ground_albedo"]),
                boxes=tuple(
                    BoxSpec(
                        center=tuple(b["center"]),
                        size=tuple(b["size"]),
                        albedo=tuple(b["albedo"]),
                        velocity=tuple(b["velocity"]),
                    )
                    for b in geo["boxes"]
                ),
                far_wall=bool(geo["far_wall"]),
                wall_albedo=tuple(geo["wall_albedo"]),
            ),
            rig=None if d["rig"] is None else tuple(CameraModel.from_json(c) for c in d["rig"]),
            sparse_rate=float(d["sparse_rate"]),
            sparse_concentrated=bool(d["sparse_concentrated"]),
        )


def default_rig(views: int, height: int, width: int, cam_height: float = 1.5) -> list[CameraModel]:
    """Surround rig: cameras at evenly spaced yaw, 0.5 m radial offset."""
    rig = []
    for n in range(views):
        yaw = 2.0 * math.pi * n / views
        q = matrix_to_quat(quat_to_matrix(yaw_quat(yaw)) @ _CAM_TO_EGO)
        t = np.array([0.5 * math.cos(yaw), 0.5 * math.sin(yaw), cam_height])
        rig.append(
            CameraModel(
                fx=width / 2.0,
                fy=width / 2.0,
                cx=(width - 1) / 2.0,
                cy=(height - 1) / 2.0,
                width=width,
                height=height,
                extrinsic=EgoPose(t, q),
            )
        )
    return rig


@dataclass
class SceneSample:
    """One clip with images, exact point maps, masks, poses, and LiDAR-style returns."""

    images: np.ndarray  # (T, N, H, W, 3) float32 in [0, 1]
    pointmaps: np.ndarray  # (T, N, H, W, 3) float64, frame-0 ego coordinates
    valid: np.ndarray  # (T, N, H, W) bool
    poses: list[EgoPose]  # length T, poses[0] = identity
    rig: list[CameraModel]
    sparse: list[list[np.ndarray]]  # [t][n] -> (M, 3) float64 points
    spec: SceneSpec

    @property
    def frames(self) -> int:
        return self.images.shape[0]

    @property
    def views(self) -> int:
        return self.images.shape[1]

    def camera_pose(self, t: int, n: int) -> EgoPose:
        """Camera-to-world (frame-0 ego) pose for image (t, n)."""
        return pose_compose(self.poses[t], self.rig[n].extrinsic)


# ---------------------------------------------------------------------------
# Ray casting
# ---------------------------------------------------------------------------


def _ray_ground(origins: np.ndarray, dirs: np.ndarray) -> np.ndarray:
    """Distance to the z=0 plane, +inf where the ray never crosses it."""
    with np.errstate(divide="ignore", invalid="ignore"):
        t = -origins[:, 2] / dirs[:, 2]
    t = np.where(np.isfinite(t) & (t > 1e-9), t, np.inf)
    return t


def _ray_wall(origins: np.ndarray, dirs: np.ndarray, wall_x: float) -> np.ndarray:
    """Distance to the x=wall_x plane approached from below."""
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (wall_x - origins[:, 0]) / dirs[:, 0]
    t = np.where(np.isfinite(t) & (t > 1e-9) & (dirs[:, 0] > 0), t, np.inf)
    return t


def _ray_box(
    origins: np.ndarray, dirs: np.ndarray, bmin: np.ndarray, bmax: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Slab-method entry distance, hit axis, and normal sign per ray."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
    lo = (bmin[None, :] - origins) * inv
    hi = (bmax[None, :] - origins) * inv
    lo = np.nan_to_num(lo, nan=-np.inf)
    hi = np.nan_to_num(hi, nan=np.inf)
    near = np.minimum(lo, hi)
    far = np.maximum(lo, hi)
    axis = np.argmax(near, axis=1)
    tmin = near[np.arange(len(near)), axis]
    tmax = far.min(axis=1)
    hit = (tmax >= tmin) & (tmin > 1e-9)
    t = np.where(hit, tmin, np.inf)
    sign = -np.sign(dirs[np.arange(len(dirs)), axis])
    return t, axis, sign


def synthesize(spec: SceneSpec, pixel_budget: int = DEFAULT_PIXEL_BUDGET) -> SceneSample:
    """Render a SceneSample; deterministic for a fixed spec (incl. seed)."""
    T, N, H, W = spec.frames, spec.views, spec.height, spec.width
    if T * N * H * W > pixel_budget:
        raise ValueError(f"scene size {T * N * H * W} pixels exceeds budget {pixel_budget}")
    rig = spec.resolved_rig()
    poses = spec.trajectory.poses(T)
    dt = 1.0 / spec.trajectory.frame_hz
    rng = np.random.default_rng(spec.seed)

    vv, uu = np.meshgrid(np.arange(H, dtype=np.float64), np.arange(W, dtype=np.float64), indexing="ij")
    images = np.zeros((T, N, H, W, 3), dtype=np.float32)
    pointmaps = np.zeros((T, N, H, W, 3), dtype=np.float64)
    valid = np.zeros((T, N, H, W), dtype=bool)
    sparse: list[list[np.ndarray]] = []

    for t in range(T):
        elapsed = t * dt
        boxes = [b.corners_at(elapsed) for b in spec.geometry.boxes]
        sparse_t: list[np.ndarray] = []
        for n in range(N):
            cam = rig[n]
            c2w = pose_compose(poses[t], cam.extrinsic)
            rot = quat_to_matrix(c2w.q)
            dirs_cam = np.stack(
                [(uu - cam.cx) / cam.fx, (vv - cam.cy) / cam.fy, np.ones_like(uu)], axis=-1
            ).reshape(-1, 3)
            dirs = dirs_cam @ rot.T
            origins = np.broadcast_to(c2w.t, dirs.shape)

            best_t = np.full(len(dirs), np.inf)
            normals = np.zeros_like(dirs)
            albedo = np.zeros_like(dirs)

            def assign(tt, nrm, alb):
                closer = tt < best_t
                best_t[closer] = tt[closer]
                normals[closer] = nrm[closer] if nrm.ndim == 2 else nrm
                albedo[closer] = alb

            if spec.geometry.ground:
                tg = _ray_ground(origins, dirs)
                assign(tg, np.array([0.0, 0.0, 1.0]), np.asarray(spec.geometry.ground_albedo))
            if spec.geometry.far_wall:
                tw = _ray_wall(origins, dirs, spec.extent)
                assign(tw, np.array([-1.0, 0.0, 0.0]), np.asarray(spec.geometry.wall_albedo))
            for (bmin, bmax), bspec in zip(boxes, spec.geometry.boxes):
                tb, axis, sign = _ray_box(origins, dirs, bmin, bmax)
                nrm = np.zeros_like(dirs)
                nrm[np.arange(len(dirs)), axis] = sign
                assign(tb, nrm, np.asarray(bspec.albedo))

            hit = np.isfinite(best_t) & (best_t <= spec.extent)
            pts = origins + best_t[:, None] * dirs
            shade = 0.25 + 0.75 * np.clip((normals * (-_LIGHT_DIR)).sum(axis=1), 0.0, None)
            rgb = albedo * shade[:, None]
            rgb[~hit] = _SKY_COLOR
            pts[~hit] = 0.0

            images[t, n] = np.clip(rgb, 0.0, 1.0).reshape(H, W, 3).astype(np.float32)
            pointmaps[t, n] = np.where(hit[:, None], pts, 0.0).reshape(H, W, 3)
            valid[t, n] = hit.reshape(H, W)
            sparse_t.append(_sample_sparse(pointmaps[t, n], valid[t, n], spec, rng))
        sparse.append(sparse_t)

    return SceneSample(
        images=images, pointmaps=pointmaps, valid=valid, poses=poses, rig=rig, sparse=sparse, spec=spec
    )


def _sample_sparse(
    pointmap: np.ndarray, valid: np.ndarray, spec: SceneSpec, rng: np.random.Generator
) -> np.ndarray:
    """Subsample valid pixels as emulated range returns (reference coordinates)."""
    H, W = valid.shape
    ys, xs = np.nonzero(valid)
    if len(ys) == 0:
        return np.zeros((0, 3))
    count = max(2, int(round(spec.sparse_rate * H * W)))
    count = min(count, len(ys))
    if spec.sparse_concentrated:
        # cluster returns around one pixel: the ill-conditioned alignment regime
        center = rng.integers(len(ys))
        d2 = (ys - ys[center]) ** 2 + (xs - xs[center]) ** 2
        order = np.argsort(d2, kind="stable")[:count]
        pick = order
    else:
        pick = rng.choice(len(ys), size=count, replace=False)
    return pointmap[ys[pick], xs[pick]].copy()


def random_scene_spec(
    seed: int,
    frames: int = 4,
    views: int = 2,
    height: int = 32,
    width: int = 48,
    extent: float = 100.0,
    n_boxes: tuple[int, int] = (5, 9),
    moving_fraction: float = 0.25,
    trajectory_kind: str | None = None,
    speed: float | None = None,
    sparse_rate: float = 0.01,
) -> SceneSpec:
    """Procedural scene: randomized boxes off the ego corridor, random path."""
    rng = np.random.default_rng(seed)
    kind = trajectory_kind or rng.choice(["straight", "arc", "lane_change"])
    spd = speed if speed is not None else float(rng.uniform(6.0, 14.0))
    traj = TrajectorySpec(kind=str(kind), speed=spd, turn_rate_deg_s=float(rng.uniform(4.0, 10.0)))
    path = np.stack([p.t for p in traj.poses(frames)])

    boxes = []
    target = int(rng.integers(n_boxes[0], n_boxes[1]))
    attempts = 0
    while len(boxes) < target and attempts < 200:
        attempts += 1
        size = rng.uniform([1.5, 1.5, 1.5], [8.0, 6.0, 6.0])
        x = float(rng.uniform(6.0, 0.75 * extent))
        y = float(rng.uniform(-0.3 * extent, 0.3 * extent))
        center = np.array([x, y, size[2] / 2.0])
        vel = np.zeros(3)
        if rng.random() < moving_fraction:
            vel = np.array([rng.uniform(-8.0, 8.0), rng.uniform(-2.0, 2.0), 0.0])
        # keep the corridor clear across all frames (cameras sit near the path)
        clearance = np.inf
        dt = 1.0 / traj.frame_hz
        for ti in range(frames):
            bmin = center + vel * ti * dt - size / 2.0
            bmax = center + vel * ti * dt + size / 2.0
            gap = np.maximum(bmin - path[ti], 0.0) + np.maximum(path[ti] - bmax, 0.0)
            clearance = min(clearance, float(np.linalg.norm(gap)))
        if clearance < 3.0:
            continue
        albedo = tuple(rng.uniform(0.25, 0.95, size=3).round(4))
        boxes.append(
            BoxSpec(
                center=tuple(center.round(4)),
                size=tuple(size.round(4)),
                albedo=albedo,
                velocity=tuple(vel.round(4)),
            )
        )

    ground_albedo = tuple((0.35 + 0.15 * rng.random(3)).round(4))
    return SceneSpec(
        seed=seed,
        frames=frames,
        views=views,
        height=height,
        width=width,
        extent=extent,
        trajectory=traj,
        geometry=GeometrySpec(ground_albedo=ground_albedo, boxes=tuple(boxes)),
        sparse_rate=sparse_rate,
    )


# ---------------------------------------------------------------------------
# Dataset directory format
# ---------------------------------------------------------------------------


def write_dataset(directory: str | Path, samples: list[SceneSample]) -> Path:
    """Write scenes plus a checksummed manifest; returns the manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    scenes = []
    for i, s in enumerate(samples):
        sid = f"scene{i:04d}"
        files = {
            "images": f"{sid}_images.dvt",
            "pointmaps": f"{sid}_pointmaps.dvt",
            "valid": f"{sid}_valid.dvt",
        }
        write_tensor(directory / files["images"], s.images)
        write_tensor(directory / files["pointmaps"], s.pointmaps)
        write_tensor(directory / files["valid"], s.valid.astype(np.float32))
        sparse_files = []
        for t in range(s.frames):
            row = []
            for n in range(s.views):
                fname = f"{sid}_sparse_t{t}_n{n}.dvt"
                write_tensor(directory / fname, s.sparse[t][n])
                row.append(fname)
            sparse_files.append(row)
        all_files = list(files.values()) + [f for row in sparse_files for f in row]
        scenes.append(
            {
                "id": sid,
                "spec": s.spec.to_json(),
                "poses": [p.vec7().tolist() for p in s.poses],
                "cameras": [c.to_json() for c in s.rig],
                "files": files,
                "sparse_files": sparse_files,
                "checksums": {f: sha256_file(directory / f) for f in all_files},
            }
        )
    manifest = {"format_version": DATASET_FORMAT_VERSION, "scenes": scenes}
    path = directory / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return path


def read_dataset(directory: str | Path, verify_checksums: bool = True) -> list[SceneSample]:
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.exists():
        raise FormatError(f"no manifest.json in {directory}")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format_version") != DATASET_FORMAT_VERSION:
        raise FormatError(
            f"dataset version {manifest.get('format_version')!r}, expected {DATASET_FORMAT_VERSION!r}"
        )
    samples = []
    for scene in manifest["scenes"]:
        if verify_checksums:
            for fname, digest in scene["checksums"].items():
                actual = sha256_file(directory / fname)
                if actual != digest:
                    raise FormatError(f"checksum mismatch for {fname}")
        spec = SceneSpec.from_json(scene["spec"])
        images = read_tensor(directory / scene["files"]["images"]).astype(np.float32, copy=False)
        pointmaps = read_tensor(directory / scene["files"]["pointmaps"])
        valid = read_tensor(directory / scene["files"]["valid"]) != 0.0
        poses = [EgoPose.from_vec7(v) for v in scene["poses"]]
        rig = [CameraModel.from_json(c) for c in scene["cameras"]]
        sparse = [
            [read_tensor(directory / f) for f in row] for row in scene["sparse_files"]
        ]
        samples.append(
            SceneSample(
                images=images,
                pointmaps=pointmaps,
                valid=valid,
                poses=poses,
                rig=rig,
                sparse=sparse,
                spec=spec,
            )
        )
    return samples

"""SE(3) ego poses, quaternions, and pinhole cameras.

Conventions: quaternions are (w, x, y, z), unit norm, canonicalized to the
w >= 0 hemisphere (ties broken by the first nonzero component). Angles are
radians internally and degrees at metric boundaries. The ego frame is
x forward, y left, z up; cameras look along +z with x right, y down.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

QUAT_UNIT_TOL = 1e-9


def canonicalize_quat(q: np.ndarray) -> np.ndarray:
    """Flip sign so w >= 0; if w == 0, the first nonzero of (x,y,z) is >= 0."""
    q = np.asarray(q, dtype=np.float64)
    if q[0] < 0.0:
        return -q
    if q[0] == 0.0:
        for c in q[1:]:
            if c != 0.0:
                return q if c > 0.0 else -q
    return q


def normalize_quat(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q)
    if n == 0.0:
        raise ValueError("zero quaternion")
    return canonicalize_quat(q / n)


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    w1, x1, y1, z1 = a
    w2, x2, y2, z2 = b
    return np.array(
        [
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        ]
    )


def quat_conjugate(q: np.ndarray) -> np.ndarray:
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def matrix_to_quat(m: np.ndarray) -> np.ndarray:
    """Shepperd's method; returns a canonicalized unit quaternion."""
    m = np.asarray(m, dtype=np.float64)
    tr = m[0, 0] + m[1, 1] + m[2, 2]
    if tr > 0:
        s = math.sqrt(tr + 1.0) * 2
        q = np.array(
            [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
        )
    elif m[0, 0] >= m[1, 1] and m[0, 0] >= m[2, 2]:
        s = math.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2
        q = np.array(
            [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
        )
    elif m[1, 1] >= m[2, 2]:
        s = math.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2
        q = np.array(
            [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s]
        )
    else:
        s = math.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2
        q = np.array(
            [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s]
        )
    return normalize_quat(q)


def yaw_quat(angle_rad: float) -> np.ndarray:
    """Rotation about +z (heading change)."""
    return canonicalize_quat(
        np.array([math.cos(angle_rad / 2.0), 0.0, 0.0, math.sin(angle_rad / 2.0)])
    )


@dataclass(frozen=True)
class EgoPose:
    """Rigid transform: translation in meters plus a unit quaternion."""

    t: np.ndarray = field(default_factory=lambda: np.zeros(3))
    q: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))

    def __post_init__(self):
        object.__setattr__(self, "t", np.asarray(self.t, dtype=np.float64).reshape(3))
        object.__setattr__(self, "q", np.asarray(self.q, dtype=np.float64).reshape(4))
        if abs(np.linalg.norm(self.q) - 1.0) > QUAT_UNIT_TOL:
            raise ValueError(f"quaternion not unit norm: {self.q}")
        object.__setattr__(self, "q", canonicalize_quat(self.q))

    @staticmethod
    def identity() -> "EgoPose":
        return EgoPose()

    @staticmethod
    def from_tq(t, q) -> "EgoPose":
        """Build from an arbitrary (t, q); normalizes and canonicalizes q."""
        return EgoPose(np.asarray(t, dtype=np.float64), normalize_quat(q))

    @staticmethod
    def from_vec7(v) -> "EgoPose":
        v = np.asarray(v, dtype=np.float64).reshape(7)
        return EgoPose.from_tq(v[:3], v[3:])

    @staticmethod
    def from_matrix(m: np.ndarray) -> "EgoPose":
        m = np.asarray(m, dtype=np.float64)
        return EgoPose(m[:3, 3].copy(), matrix_to_quat(m[:3, :3]))

    def rotation(self) -> np.ndarray:
        return quat_to_matrix(self.q)

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation()
        m[:3, 3] = self.t
        return m

    def vec7(self) -> np.ndarray:
        return np.concatenate([self.t, self.q])

    def is_identity(self, tol: float = 1e-12) -> bool:
        return bool(
            np.all(np.abs(self.t) <= tol)
            and abs(self.q[0] - 1.0) <= tol
            and np.all(np.abs(self.q[1:]) <= tol)
        )


def pose_compose(a: EgoPose, b: EgoPose) -> EgoPose:
    """a then b: R = Ra Rb, t = ta + Ra tb."""
    q = normalize_quat(quat_multiply(a.q, b.q))
    t = a.t + quat_to_matrix(a.q) @ b.t
    return EgoPose(t, q)


def pose_inverse(p: EgoPose) -> EgoPose:
    qi = quat_conjugate(p.q)
    ti = -(quat_to_matrix(qi) @ p.t)
    return EgoPose(ti, canonicalize_quat(qi))


def pose_relative(a: EgoPose, b: EgoPose) -> EgoPose:
    """inverse(a) composed with b."""
    return pose_compose(pose_inverse(a), b)


def transform_points(p: EgoPose, pts: np.ndarray) -> np.ndarray:
    """Apply x' = R x + t to an (..., 3) array of points."""
    pts = np.asarray(pts, dtype=np.float64)
    return pts @ quat_to_matrix(p.q).T + p.t


def quat_geodesic_deg(q1: np.ndarray, q2: np.ndarray) -> float:
    """Rotation angle between two unit quaternions in [0, 180] degrees."""
    d = abs(float(np.dot(np.asarray(q1, dtype=np.float64), np.asarray(q2, dtype=np.float64))))
    return math.degrees(2.0 * math.acos(min(1.0, d)))


@dataclass(frozen=True)
class CameraModel:
    """Pinhole intrinsics plus the camera-to-ego extrinsic."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    extrinsic: EgoPose = field(default_factory=EgoPose.identity)

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 < self.cx < self.width) or not (0 < self.cy < self.height):
            raise ValueError("principal point outside image")

    def to_json(self) -> dict:
        return {
            "fx": self.fx,
            "fy": self.fy,
            "cx": self.cx,
            "cy": self.cy,
            "width": self.width,
            "height": self.height,
            "extrinsic": self.extrinsic.vec7().tolist(),
        }

    @staticmethod
    def from_json(d: dict) -> "CameraModel":
        return CameraModel(
            fx=float(d["fx"]),
            fy=float(d["fy"]),
            cx=float(d["cx"]),
            cy=float(d["cy"]),
            width=int(d["width"]),
            height=int(d["height"]),
            extrinsic=EgoPose.from_vec7(d["extrinsic"]),
        )


def project(cam: CameraModel, pts_cam: np.ndarray) -> np.ndarray:
    """Camera-frame points (N, 3) to pixel coordinates (N, 2); z must be > 0."""
    pts_cam = np.asarray(pts_cam, dtype=np.float64).reshape(-1, 3)
    z = pts_cam[:, 2]
    if pts_cam.size and float(z.min()) <= 0.0:
        raise ValueError("project: point at or behind the camera plane")
    u = cam.fx * pts_cam[:, 0] / z + cam.cx
    v = cam.fy * pts_cam[:, 1] / z + cam.cy
    return np.stack([u, v], axis=-1)


def unproject(cam: CameraModel, pixels: np.ndarray, depth: np.ndarray) -> np.ndarray:
    """Pixel coordinates plus positive z-depth to camera-frame points."""
    pixels = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    depth = np.asarray(depth, dtype=np.float64).reshape(-1)
    if depth.size and float(depth.min()) <= 0.0:
        raise ValueError("unproject: depth must be positive")
    x = (pixels[:, 0] - cam.cx) / cam.fx * depth
    y = (pixels[:, 1] - cam.cy) / cam.fy * depth
    return np.stack([x, y, depth], axis=-1)

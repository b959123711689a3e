"""SE(3) poses, quaternion math and pinhole camera geometry.

Conventions:
  - Quaternions are (w, x, y, z), unit norm, normalized to w >= 0 at
    construction so the double cover never leaks into comparisons.
  - A Pose maps points from its "source" frame into its "target" frame:
    x_target = R(q) @ x_source + t.
  - All operations are pure; Pose and CameraModel are immutable values.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class GeometryError(Exception):
    pass


class BehindCamera(GeometryError):
    """Point has non-positive depth and cannot be projected."""


class InvalidDepth(GeometryError):
    """Depth value is zero, negative or non-finite."""


class EmptyInput(GeometryError):
    pass


# ---------------------------------------------------------------------------
# quaternion helpers (w, x, y, z)


def normalize_quat(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q)
    if not np.isfinite(n) or n == 0.0:
        raise GeometryError(f"cannot normalize quaternion {q!r}")
    q = q / n
    if q[0] < 0.0:
        q = -q
    return q


def quat_mul(a, b) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )


def quat_conj(q) -> np.ndarray:
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_from_axis_angle(axis, angle_rad: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    half = 0.5 * angle_rad
    return normalize_quat(np.concatenate(([math.cos(half)], math.sin(half) * axis)))


def quat_to_matrix(q) -> np.ndarray:
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def matrix_to_quat(R) -> np.ndarray:
    """Shepperd's method, numerically stable for all rotations."""
    R = np.asarray(R, dtype=np.float64)
    tr = R[0, 0] + R[1, 1] + R[2, 2]
    if tr > 0.0:
        s = math.sqrt(tr + 1.0) * 2.0
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = math.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2.0
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = math.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2.0
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = math.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2.0
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    return normalize_quat(q)


def quat_rotate(q, pts) -> np.ndarray:
    """Rotate one point (3,) or many points (n, 3) by quaternion q."""
    pts = np.asarray(pts, dtype=np.float64)
    return pts @ quat_to_matrix(q).T if pts.ndim == 2 else quat_to_matrix(q) @ pts


def geodesic_deg(q1, q2) -> float:
    """Rotation angle in degrees between two unit quaternions, in [0, 180].

    Invariant under the quaternion double cover: geodesic_deg(q, -q) == 0.
    """
    d = abs(float(np.dot(np.asarray(q1, dtype=np.float64), np.asarray(q2, dtype=np.float64))))
    return math.degrees(2.0 * math.acos(min(1.0, d)))


def slerp(q1, q2, t: float) -> np.ndarray:
    """Spherical linear interpolation along the shorter arc."""
    q1 = np.asarray(q1, dtype=np.float64)
    q2 = np.asarray(q2, dtype=np.float64)
    dot = float(np.dot(q1, q2))
    if dot < 0.0:
        q2 = -q2
        dot = -dot
    if dot > 1.0 - 1e-12:
        # nearly parallel: lerp avoids division by sin(0)
        return normalize_quat(q1 + t * (q2 - q1))
    theta = math.acos(min(1.0, dot))
    s = math.sin(theta)
    return normalize_quat((math.sin((1.0 - t) * theta) / s) * q1 + (math.sin(t * theta) / s) * q2)


def weighted_quat_mean(quats, weights) -> np.ndarray:
    """Weighted orientation mean via an incremental slerp chain.

    The chain folds inputs in the given order with cumulative weights:
    q_acc <- slerp(q_acc, q_i, w_i / (W + w_i)).  Callers that need an
    order-independent result must sort inputs (e.g. by sensor id) first.
    """
    quats = [np.asarray(q, dtype=np.float64) for q in quats]
    weights = [float(w) for w in weights]
    if not quats:
        raise EmptyInput("weighted_quat_mean needs at least one quaternion")
    if len(quats) != len(weights) or any(w <= 0 for w in weights):
        raise GeometryError("weights must be positive and match quaternions")
    acc = normalize_quat(quats[0])
    w_total = weights[0]
    for q, w in zip(quats[1:], weights[1:]):
        w_total += w
        acc = slerp(acc, q, w / w_total)
    return acc


def yaw_from_quat(q) -> float:
    """Z-axis (yaw) angle in radians of the rotation, ZYX convention."""
    R = quat_to_matrix(q)
    return math.atan2(R[1, 0], R[0, 0])


def quat_from_yaw(yaw: float) -> np.ndarray:
    return quat_from_axis_angle([0.0, 0.0, 1.0], yaw)


# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Pose:
    """Rigid transform: translation in meters plus unit quaternion (w,x,y,z)."""

    t: np.ndarray = field(default_factory=lambda: np.zeros(3))
    q: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))

    def __post_init__(self):
        t = np.asarray(self.t, dtype=np.float64).reshape(3)
        if not np.all(np.isfinite(t)):
            raise GeometryError(f"non-finite translation {t!r}")
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "q", normalize_quat(self.q))

    @staticmethod
    def identity() -> "Pose":
        return Pose()

    @staticmethod
    def from_matrix(T) -> "Pose":
        T = np.asarray(T, dtype=np.float64)
        return Pose(T[:3, 3], matrix_to_quat(T[:3, :3]))

    def to_matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = quat_to_matrix(self.q)
        T[:3, 3] = self.t
        return T

    def compose(self, other: "Pose") -> "Pose":
        """Apply `other` first, then `self`."""
        return Pose(self.t + quat_rotate(self.q, other.t), quat_mul(self.q, other.q))

    def __matmul__(self, other: "Pose") -> "Pose":
        return self.compose(other)

    def inverse(self) -> "Pose":
        qinv = quat_conj(self.q)
        return Pose(-quat_rotate(qinv, self.t), qinv)

    def apply(self, x) -> np.ndarray:
        """Transform one point (3,) or many points (n, 3)."""
        x = np.asarray(x, dtype=np.float64)
        return quat_rotate(self.q, x) + self.t

    def rotation_matrix(self) -> np.ndarray:
        return quat_to_matrix(self.q)

    def is_close(self, other: "Pose", t_tol: float = 1e-9, rot_tol_deg: float = 1e-7) -> bool:
        return (
            float(np.linalg.norm(self.t - other.t)) <= t_tol
            and geodesic_deg(self.q, other.q) <= rot_tol_deg
        )


def compose(a: Pose, b: Pose) -> Pose:
    return a.compose(b)


def inverse(p: Pose) -> Pose:
    return p.inverse()


def apply(p: Pose, x) -> np.ndarray:
    return p.apply(x)


@dataclass(frozen=True)
class Pixel:
    u: float
    v: float

    def __post_init__(self):
        if not (math.isfinite(self.u) and math.isfinite(self.v)):
            raise GeometryError(f"non-finite pixel ({self.u}, {self.v})")


@dataclass(frozen=True)
class CameraModel:
    """Undistorted pinhole camera with an extrinsic camera-in-world pose."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    extrinsic: Pose = field(default_factory=Pose.identity)

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise GeometryError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise GeometryError("principal point must lie inside the image")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def project(self, x_cam) -> Pixel:
        x, y, z = np.asarray(x_cam, dtype=np.float64)
        if z <= 0.0:
            raise BehindCamera(f"z={z} is not in front of the camera")
        return Pixel(self.fx * x / z + self.cx, self.fy * y / z + self.cy)

    def project_many(self, pts_cam: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Vectorized projection; returns (n,2) pixels and the z>0 validity mask."""
        pts_cam = np.asarray(pts_cam, dtype=np.float64)
        z = pts_cam[:, 2]
        valid = z > 0.0
        with np.errstate(divide="ignore", invalid="ignore"):
            uv = np.stack(
                [self.fx * pts_cam[:, 0] / z + self.cx, self.fy * pts_cam[:, 1] / z + self.cy],
                axis=1,
            )
        return uv, valid

    def backproject(self, px: Pixel, depth: float) -> np.ndarray:
        if not (math.isfinite(depth) and depth > 0.0):
            raise InvalidDepth(f"depth={depth}")
        return np.array(
            [(px.u - self.cx) / self.fx * depth, (px.v - self.cy) / self.fy * depth, depth]
        )

    def in_bounds(self, u, v) -> np.ndarray:
        return (np.asarray(u) >= 0) & (np.asarray(u) < self.width) & (np.asarray(v) >= 0) & (
            np.asarray(v) < self.height
        )

    def world_to_cam(self, pts_world) -> np.ndarray:
        return self.extrinsic.inverse().apply(pts_world)

    def cam_to_world(self, pts_cam) -> np.ndarray:
        return self.extrinsic.apply(pts_cam)


def project(c: CameraModel, x_cam) -> Pixel:
    return c.project(x_cam)


def backproject(c: CameraModel, px: Pixel, depth: float) -> np.ndarray:
    return c.backproject(px, depth)

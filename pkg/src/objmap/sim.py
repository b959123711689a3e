"""Deterministic scene simulator.

Replaces the learned front-end: scripted ground-truth object trajectories
on the ground plane, per-camera noisy 2D keypoint detections, synthetic
depth segments with back-face and occluder culling, and replay of recorded
message streams. All randomness flows from the scenario seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .geometry import CameraModel, Pose, quat_from_yaw
from .models import ObjectModel, builtin_model
from .pose_est import KeypointSet2D, ObjectObservation
from .protocol import BadLength, ProtocolError, SessionLogEntry
from .segmentation import FRAME_CAMERA, PointCloudSegment


class ConfigError(Exception):
    pass


class CorruptFile(Exception):
    pass


@dataclass(frozen=True)
class NoiseConfig:
    keypoint_sigma_px: float = 0.0
    depth_sigma_m: float = 0.0
    dropout_prob: float = 0.0
    outlier_prob: float = 0.0
    outlier_px: float = 50.0


@dataclass(frozen=True)
class Occluder:
    box_min: np.ndarray  # (3,) world AABB
    box_max: np.ndarray
    t_start_s: float
    t_end_s: float

    def __post_init__(self):
        object.__setattr__(self, "box_min", np.asarray(self.box_min, float).reshape(3))
        object.__setattr__(self, "box_max", np.asarray(self.box_max, float).reshape(3))

    def active(self, t_s: float) -> bool:
        return self.t_start_s <= t_s <= self.t_end_s


@dataclass(frozen=True)
class ObjectSpec:
    model: str  # builtin model name
    waypoints: np.ndarray  # (k, 4) rows of (t_s, x, y, yaw)

    def __post_init__(self):
        wp = np.asarray(self.waypoints, float).reshape(-1, 4)
        wp = wp[np.argsort(wp[:, 0], kind="stable")]
        if len(np.unique(wp[:, 0])) != len(wp):
            raise ConfigError("object waypoints contain duplicate times")
        object.__setattr__(self, "waypoints", wp)


@dataclass(frozen=True)
class ScenarioConfig:
    seed: int = 0
    duration_s: float = 60.0
    rate_hz: float = 1.0
    cameras: tuple[CameraModel, ...] = ()
    objects: tuple[ObjectSpec, ...] = ()
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    occluders: tuple[Occluder, ...] = ()
    segment_point_budget: int = 250  # wire-side downsample target per segment

    def __post_init__(self):
        if self.rate_hz <= 0:
            raise ConfigError("rate_hz must be positive")

    def models(self) -> list[ObjectModel]:
        return [builtin_model(o.model) for o in self.objects]


@dataclass(frozen=True)
class GroundTruthFrame:
    index: int
    timestamp_us: int
    poses: tuple[Pose, ...]  # one world pose per scenario object


@dataclass(frozen=True)
class SensorDetection:
    """What one camera sees of one object in one frame."""

    object_index: int
    keypoints: KeypointSet2D | None  # None when < 4 keypoints survive
    segment: PointCloudSegment | None  # camera frame; None when empty
    visibility_fraction: float


# ---------------------------------------------------------------------------
# camera / scenario construction


def look_at_camera(
    position, target, fx=450.0, fy=450.0, cx=320.0, cy=240.0, width=640, height=480
) -> CameraModel:
    """Camera at `position` looking at `target` (z forward, x right, y down)."""
    position = np.asarray(position, float)
    z = np.asarray(target, float) - position
    z = z / np.linalg.norm(z)
    up = np.array([0.0, 0.0, 1.0])
    x = np.cross(z, up)
    nx = np.linalg.norm(x)
    if nx < 1e-9:
        x = np.array([1.0, 0.0, 0.0])
    else:
        x = x / nx
    y = np.cross(z, x)
    T = np.eye(4)
    T[:3, 0], T[:3, 1], T[:3, 2], T[:3, 3] = x, y, z, position
    return CameraModel(fx, fy, cx, cy, width, height, Pose.from_matrix(T))


def default_scenario(
    seed: int = 0, duration_s: float = 60.0, noise: NoiseConfig | None = None
) -> ScenarioConfig:
    """The reference scene: 4 cameras around a room, 5 chairs and a table."""
    center = np.array([0.0, 0.0, 0.8])
    cameras = tuple(
        look_at_camera(pos, center)
        for pos in [(-3.5, -2.5, 2.2), (3.5, -2.5, 2.2), (3.5, 2.5, 2.2), (-3.5, 2.5, 2.2)]
    )
    objects = (
        ObjectSpec("chair", [(0.0, -1.6, -1.0, 0.3), (duration_s, -1.6, -1.0, 0.3)]),
        ObjectSpec("chair", [(0.0, -1.5, 1.0, 2.0), (duration_s, -0.6, 1.2, 2.6)]),
        ObjectSpec("chair", [(0.0, 1.6, -1.1, -1.2), (duration_s, 1.0, -1.4, -0.4)]),
        ObjectSpec("chair", [(0.0, 1.5, 1.1, 1.0), (duration_s, 1.7, 0.4, 1.8)]),
        ObjectSpec(
            "chair",
            [(0.0, 0.1, -1.5, 0.0), (duration_s / 2, 0.5, -1.6, 0.8), (duration_s, 0.1, -1.5, 0.0)],
        ),
        ObjectSpec("table", [(0.0, 0.0, 0.9, 0.1), (duration_s, 0.0, 0.9, 0.1)]),
    )
    return ScenarioConfig(
        seed=seed,
        duration_s=duration_s,
        rate_hz=1.0,
        cameras=cameras,
        objects=objects,
        noise=noise or NoiseConfig(),
    )


def save_scenario(cfg: ScenarioConfig, path: str | Path) -> None:
    doc = {
        "seed": cfg.seed,
        "duration_s": cfg.duration_s,
        "rate_hz": cfg.rate_hz,
        "segment_point_budget": cfg.segment_point_budget,
        "cameras": [
            {
                "fx": c.fx,
                "fy": c.fy,
                "cx": c.cx,
                "cy": c.cy,
                "width": c.width,
                "height": c.height,
                "position": [float(v) for v in c.extrinsic.t],
                "quaternion": [float(v) for v in c.extrinsic.q],
            }
            for c in cfg.cameras
        ],
        "objects": [
            {"model": o.model, "waypoints": [[float(v) for v in w] for w in o.waypoints]}
            for o in cfg.objects
        ],
        "noise": {
            "keypoint_sigma_px": cfg.noise.keypoint_sigma_px,
            "depth_sigma_m": cfg.noise.depth_sigma_m,
            "dropout_prob": cfg.noise.dropout_prob,
            "outlier_prob": cfg.noise.outlier_prob,
            "outlier_px": cfg.noise.outlier_px,
        },
        "occluders": [
            {
                "min": [float(v) for v in o.box_min],
                "max": [float(v) for v in o.box_max],
                "t_start_s": o.t_start_s,
                "t_end_s": o.t_end_s,
            }
            for o in cfg.occluders
        ],
    }
    Path(path).write_text(yaml.safe_dump(doc, sort_keys=False))


def load_scenario(path: str | Path) -> ScenarioConfig:
    try:
        doc = yaml.safe_load(Path(path).read_text())
        cameras = tuple(
            CameraModel(
                c["fx"], c["fy"], c["cx"], c["cy"], c["width"], c["height"],
                Pose(c["position"], c["quaternion"]),
            )
            for c in doc.get("cameras", [])
        )
        objects = tuple(
            ObjectSpec(o["model"], o["waypoints"]) for o in doc.get("objects", [])
        )
        noise = NoiseConfig(**doc.get("noise", {}))
        occluders = tuple(
            Occluder(o["min"], o["max"], o["t_start_s"], o["t_end_s"])
            for o in doc.get("occluders", [])
        )
        return ScenarioConfig(
            seed=int(doc.get("seed", 0)),
            duration_s=float(doc["duration_s"]),
            rate_hz=float(doc.get("rate_hz", 1.0)),
            cameras=cameras,
            objects=objects,
            noise=noise,
            occluders=occluders,
            segment_point_budget=int(doc.get("segment_point_budget", 250)),
        )
    except ConfigError:
        raise
    except Exception as exc:
        raise ConfigError(f"invalid scenario file {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# trajectory sampling


def _interp_yaw(y0: float, y1: float, a: float) -> float:
    d = (y1 - y0 + math.pi) % (2.0 * math.pi) - math.pi  # shortest arc
    return y0 + a * d


def object_pose_at(spec: ObjectSpec, model: ObjectModel, t_s: float) -> Pose:
    wp = spec.waypoints
    if t_s <= wp[0, 0]:
        t, x, y, yaw = wp[0]
    elif t_s >= wp[-1, 0]:
        t, x, y, yaw = wp[-1]
    else:
        k = int(np.searchsorted(wp[:, 0], t_s, side="right")) - 1
        t0, x0, y0, yaw0 = wp[k]
        t1, x1, y1, yaw1 = wp[k + 1]
        a = (t_s - t0) / (t1 - t0)
        x = x0 + a * (x1 - x0)
        y = y0 + a * (y1 - y0)
        yaw = _interp_yaw(yaw0, yaw1, a)
    return Pose([x, y, model.ground_offset], quat_from_yaw(yaw))


def generate(cfg: ScenarioConfig) -> list[GroundTruthFrame]:
    """Sample the scripted trajectories at the configured frame rate."""
    models = cfg.models()
    n_frames = max(1, int(round(cfg.duration_s * cfg.rate_hz)))
    period_us = int(round(1e6 / cfg.rate_hz))
    frames = []
    for k in range(n_frames):
        t_us = k * period_us
        poses = tuple(
            object_pose_at(spec, model, t_us * 1e-6) for spec, model in zip(cfg.objects, models)
        )
        frames.append(GroundTruthFrame(index=k, timestamp_us=t_us, poses=poses))
    return frames


# ---------------------------------------------------------------------------
# per-camera observation synthesis


def _ray_occluded(origin: np.ndarray, pts_world: np.ndarray, boxes: list[Occluder]) -> np.ndarray:
    """True where the camera->point segment intersects any active box."""
    occ = np.zeros(len(pts_world), dtype=bool)
    if not boxes:
        return occ
    d = pts_world - origin
    with np.errstate(divide="ignore", invalid="ignore"):
        for box in boxes:
            t1 = (box.box_min - origin) / d
            t2 = (box.box_max - origin) / d
            tnear = np.nanmax(np.minimum(t1, t2), axis=1)
            tfar = np.nanmin(np.maximum(t1, t2), axis=1)
            occ |= (tnear <= tfar) & (tfar > 1e-6) & (tnear < 1.0 - 1e-6)
    return occ


def _frame_rng(seed: int, frame_index: int, cam_index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((seed, frame_index, cam_index)))


def observe(
    cfg: ScenarioConfig,
    frame: GroundTruthFrame,
    cam_index: int,
    rng: np.random.Generator | None = None,
) -> list[SensorDetection]:
    """Synthesize what one camera detects in one frame.

    Keypoints are the projected ground-truth model keypoints plus Gaussian
    pixel noise, with dropout, gross outliers and occluder culling; objects
    retaining fewer than 4 valid keypoints yield no keypoint set. Segments
    are the back-face- and occluder-culled model cloud points, backprojected
    with range noise, in the camera frame.
    """
    cam = cfg.cameras[cam_index]
    models = cfg.models()
    noise = cfg.noise
    t_s = frame.timestamp_us * 1e-6
    boxes = [b for b in cfg.occluders if b.active(t_s)]
    cam_origin = cam.extrinsic.t
    if rng is None:
        rng = _frame_rng(cfg.seed, frame.index, cam_index)

    detections = []
    for oi, (spec, model, pose) in enumerate(zip(cfg.objects, models, frame.poses)):
        # --- keypoints
        kp_world = pose.apply(model.keypoints_obj)
        kp_cam = cam.world_to_cam(kp_world)
        uv, in_front = cam.project_many(kp_cam)
        valid = in_front.copy()
        valid[in_front] &= cam.in_bounds(uv[in_front, 0], uv[in_front, 1])
        valid &= ~_ray_occluded(cam_origin, kp_world, boxes)
        L = len(kp_world)
        points = np.where(valid[:, None], uv, 0.0)
        if noise.keypoint_sigma_px > 0:
            points = points + rng.normal(0.0, noise.keypoint_sigma_px, size=(L, 2))
        if noise.outlier_prob > 0:
            hit = rng.random(L) < noise.outlier_prob
            ang = rng.uniform(0.0, 2.0 * math.pi, size=L)
            offs = noise.outlier_px * np.stack([np.cos(ang), np.sin(ang)], axis=1)
            points = np.where(hit[:, None], points + offs, points)
        if noise.dropout_prob > 0:
            valid &= rng.random(L) >= noise.dropout_prob
        kps = None
        if int(valid.sum()) >= 4:
            kps = KeypointSet2D(
                class_id=model.class_id,
                points=points,
                confidences=np.where(valid, 1.0, 0.0),
                valid=valid,
            )

        # --- depth segment
        cloud_world = pose.apply(model.model_cloud)
        normals_world = model.normals @ pose.rotation_matrix().T
        facing = np.einsum("ij,ij->i", normals_world, cam_origin - cloud_world) > 1e-9
        pts_cam = cam.world_to_cam(cloud_world)
        uv_c, front = cam.project_many(pts_cam)
        vis = facing & front
        vis[vis] &= cam.in_bounds(uv_c[vis, 0], uv_c[vis, 1])
        vis &= ~_ray_occluded(cam_origin, cloud_world, boxes)
        visibility = float(vis.sum()) / len(cloud_world)
        seg = None
        if vis.any():
            pts = pts_cam[vis]
            if noise.depth_sigma_m > 0:
                r = np.linalg.norm(pts, axis=1)
                pts = pts * ((r + rng.normal(0.0, noise.depth_sigma_m, size=len(pts))) / r)[:, None]
            seg = PointCloudSegment(
                xyz=pts,
                class_id=model.class_id,
                frame=FRAME_CAMERA,
                timestamp_us=frame.timestamp_us,
                sensor_id=cam_index,
            )
        detections.append(SensorDetection(oi, kps, seg, visibility))
    return detections


def visibility_fraction(cfg: ScenarioConfig, frame: GroundTruthFrame, cam_index: int,
                        object_index: int) -> float:
    return observe(cfg, frame, cam_index)[object_index].visibility_fraction


# ---------------------------------------------------------------------------
# replay


def replay(path: str | Path) -> tuple[list[ObjectObservation], list[SessionLogEntry]]:
    """Re-read a recorded message stream file.

    Returns the decoded observations (segments re-attached) and the message
    log, exactly as a live backend would have seen them. Raises CorruptFile
    on a truncated or malformed envelope.
    """
    from .protocol import read_session

    try:
        with open(path, "rb") as fh:
            return read_session(fh)
    except (ProtocolError, BadLength) as exc:
        raise CorruptFile(str(exc)) from exc

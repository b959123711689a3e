"""Sensor-side object pose estimation.

PnP-RANSAC on 2D keypoint detections, ground-plane projection,
keypoint-skeleton to point-segment association, ICP refinement against the
sampled model cloud, and assembly of the per-sensor observation record.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from itertools import combinations

import cv2
import numpy as np

from .geometry import Pose, CameraModel, matrix_to_quat, quat_from_yaw, yaw_from_quat
from .models import ObjectModel
from .segmentation import PointCloudSegment


class PoseEstimationError(Exception):
    pass


class TooFewKeypoints(PoseEstimationError):
    pass


class NoConsensus(PoseEstimationError):
    pass


class DegenerateSegment(PoseEstimationError):
    pass


@dataclass(frozen=True)
class KeypointSet2D:
    class_id: int
    points: np.ndarray  # (L, 2) pixel coordinates
    confidences: np.ndarray  # (L,) in [0, 1]
    valid: np.ndarray  # (L,) bool

    def __post_init__(self):
        object.__setattr__(self, "points", np.asarray(self.points, float).reshape(-1, 2))
        L = len(self.points)
        object.__setattr__(self, "confidences", np.asarray(self.confidences, float).reshape(L))
        object.__setattr__(self, "valid", np.asarray(self.valid, bool).reshape(L))


@dataclass(frozen=True)
class Skeleton3D:
    """Object model keypoints transformed by an estimated pose."""

    class_id: int
    keypoints: np.ndarray  # (L, 3)
    pose: Pose


@dataclass(frozen=True)
class ObjectObservation:
    """Per-sensor fused result for one object instance (world frame)."""

    timestamp_us: int
    sensor_id: int
    class_id: int
    pose: Pose
    assoc_dist: float
    ellipsoid: np.ndarray  # (3,) semi-axis lengths, descending
    segment: PointCloudSegment | None = None

    def __post_init__(self):
        object.__setattr__(self, "ellipsoid", np.asarray(self.ellipsoid, float).reshape(3))


@dataclass(frozen=True)
class PoseConfig:
    tau_dist: float = 0.30  # max keypoint-to-segment association distance (m)
    ransac_iters: int = 100
    ransac_reproj_thresh: float = 8.0  # px
    icp_max_iters: int = 50
    icp_corr_dist: float = 0.25  # m
    icp_eps: float = 1e-6
    snap_to_ground: bool = True  # also snap z, not only roll/pitch


@dataclass(frozen=True)
class PnPResult:
    pose: Pose  # object in camera frame
    inliers: np.ndarray  # indices into the full keypoint array
    reproj_rmse: float


def _reprojection_errors(obj_pts, img_pts, rvec, tvec, K) -> np.ndarray:
    proj, _ = cv2.projectPoints(obj_pts, rvec, tvec, K, None)
    return np.linalg.norm(proj.reshape(-1, 2) - img_pts, axis=1)


def pnp_ransac(
    kps: KeypointSet2D,
    model: ObjectModel,
    cam: CameraModel,
    cfg: PoseConfig,
    rng: np.random.Generator | None = None,
) -> PnPResult:
    """Recover the object pose in camera coordinates from 2D-3D keypoint
    correspondences.

    Minimal 4-point samples are scored by reprojection-consensus; when the
    number of 4-subsets of the valid keypoints does not exceed the iteration
    budget, all subsets are enumerated (deterministic and exhaustive),
    otherwise samples are drawn from `rng`. The best hypothesis is refined
    by iterative reprojection-error minimization over all its inliers.
    """
    valid_idx = np.flatnonzero(kps.valid)
    if len(valid_idx) < 4:
        raise TooFewKeypoints(f"{len(valid_idx)} valid keypoints, need >= 4")
    obj_pts = np.ascontiguousarray(model.keypoints_obj[valid_idx], dtype=np.float64)
    img_pts = np.ascontiguousarray(kps.points[valid_idx], dtype=np.float64)
    K = cam.K

    n = len(valid_idx)
    total = math.comb(n, 4)
    if total <= cfg.ransac_iters:
        samples = list(combinations(range(n), 4))
    else:
        if rng is None:
            rng = np.random.default_rng(0)
        samples = [tuple(rng.choice(n, size=4, replace=False)) for _ in range(cfg.ransac_iters)]

    best = None  # (num_inliers, -mean_err, inlier_mask, rvec, tvec)
    for sample in samples:
        s = np.asarray(sample)
        try:
            ok, rvec, tvec = cv2.solvePnP(
                obj_pts[s], img_pts[s], K, None, flags=cv2.SOLVEPNP_AP3P
            )
        except cv2.error:
            continue
        if not ok:
            continue
        errs = _reprojection_errors(obj_pts, img_pts, rvec, tvec, K)
        inlier_mask = errs <= cfg.ransac_reproj_thresh
        count = int(inlier_mask.sum())
        if count < 4:
            continue
        score = (count, -float(errs[inlier_mask].mean()))
        if best is None or score > best[0]:
            best = (score, inlier_mask, rvec, tvec)
    if best is None:
        raise NoConsensus("no sample reached 4 reprojection-consistent inliers")

    _, inlier_mask, rvec, tvec = best
    inl = np.flatnonzero(inlier_mask)
    ok, rvec, tvec = cv2.solvePnP(
        obj_pts[inl],
        img_pts[inl],
        K,
        None,
        rvec,
        tvec,
        useExtrinsicGuess=True,
        flags=cv2.SOLVEPNP_ITERATIVE,
    )
    if not ok:
        raise NoConsensus("refinement on the consensus set failed")
    errs = _reprojection_errors(obj_pts, img_pts, rvec, tvec, K)
    inlier_mask = errs <= cfg.ransac_reproj_thresh
    R, _ = cv2.Rodrigues(rvec)
    pose = Pose(tvec.reshape(3), matrix_to_quat(R))
    rmse = float(np.sqrt(np.mean(errs[inlier_mask] ** 2))) if inlier_mask.any() else float("inf")
    return PnPResult(pose=pose, inliers=valid_idx[np.flatnonzero(inlier_mask)], reproj_rmse=rmse)


def ground_project(pose: Pose, model: ObjectModel, snap_z: bool = True) -> Pose:
    """Constrain a world-frame pose to the ground plane.

    Roll and pitch are zeroed (yaw preserved); with snap_z the translation z
    is set to the model's resting height. Idempotent.
    """
    t = pose.t.copy()
    if snap_z:
        t[2] = model.ground_offset
    return Pose(t, quat_from_yaw(yaw_from_quat(pose.q)))


def skeleton_from_pose(model: ObjectModel, pose: Pose) -> Skeleton3D:
    return Skeleton3D(model.class_id, pose.apply(model.keypoints_obj), pose)


def assoc_distance(skeleton: Skeleton3D, segment: PointCloudSegment) -> float:
    """Mean distance from each skeleton keypoint to its exact nearest
    neighbor among the segment points."""
    if len(segment) == 0:
        raise ValueError("segment must be non-empty")
    diff = skeleton.keypoints[:, None, :] - segment.xyz[None, :, :]
    d = np.sqrt((diff * diff).sum(axis=2))
    return float(d.min(axis=1).mean())


def greedy_associate(
    skeletons: list[Skeleton3D],
    segments: list[PointCloudSegment],
    tau_dist: float,
) -> list[tuple[int, int]]:
    """Greedy keypoint-skeleton to segment assignment.

    Segments are visited by descending point count; each takes the so-far
    unassigned skeleton of the same class with minimum association distance,
    kept only if that distance is <= tau_dist. Returns (segment_idx,
    skeleton_idx) pairs.
    """
    order = sorted(range(len(segments)), key=lambda j: (-len(segments[j]), j))
    taken: set[int] = set()
    pairs = []
    for j in order:
        seg = segments[j]
        best_i, best_d = -1, math.inf
        for i, sk in enumerate(skeletons):
            if i in taken or sk.class_id != seg.class_id:
                continue
            d = assoc_distance(sk, seg)
            if d < best_d:
                best_i, best_d = i, d
        if best_i >= 0 and best_d <= tau_dist:
            taken.add(best_i)
            pairs.append((j, best_i))
    return pairs


def _kabsch(src: np.ndarray, dst: np.ndarray) -> Pose:
    """Least-squares rigid transform mapping src points onto dst points."""
    sc = src.mean(axis=0)
    dc = dst.mean(axis=0)
    H = (src - sc).T @ (dst - dc)
    U, _, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    R = Vt.T @ np.diag([1.0, 1.0, d]) @ U.T
    return Pose(dc - R @ sc, matrix_to_quat(R))


@dataclass(frozen=True)
class IcpResult:
    pose: Pose
    rmse: float
    converged: bool
    iterations: int


def icp_refine(
    model: ObjectModel,
    segment: PointCloudSegment,
    init: Pose,
    cfg: PoseConfig,
) -> IcpResult:
    """Point-to-point ICP aligning the model cloud with an observed segment.

    Correspondences are found per observed point against the model cloud
    (every observed point originates from the object surface, while parts
    of the model are unobserved), gated at icp_corr_dist. An update is only
    accepted if it does not increase the correspondence RMSE.
    """
    if len(segment) < 10:
        raise DegenerateSegment(f"segment has {len(segment)} points, need >= 10")
    tree = model.kdtree()
    pose = init
    prev_pose = init
    rmse = math.inf
    converged = False
    it = 0
    for it in range(1, cfg.icp_max_iters + 1):
        local = pose.inverse().apply(segment.xyz)
        d, j = tree.query(local)
        gate = d <= cfg.icp_corr_dist
        if gate.sum() < 3:
            break
        new_rmse = float(np.sqrt(np.mean(d[gate] ** 2)))
        if new_rmse > rmse + 1e-12:
            # the last update made things worse: revert and stop
            pose = prev_pose
            break
        rmse = new_rmse
        prev_pose = pose
        new_pose = _kabsch(model.model_cloud[j[gate]], segment.xyz[gate])
        delta = pose.inverse().compose(new_pose)
        step = float(np.linalg.norm(delta.t)) + 2.0 * math.acos(min(1.0, abs(delta.q[0])))
        pose = new_pose
        if step < cfg.icp_eps:
            converged = True
            break
    return IcpResult(pose=pose, rmse=rmse, converged=converged, iterations=it)


def build_observation(
    pose: Pose,
    segment: PointCloudSegment,
    assoc_dist: float,
    sensor_id: int,
    timestamp_us: int,
    include_segment: bool = False,
) -> ObjectObservation:
    """Assemble the wire-ready observation for one associated object.

    The ellipsoid axes are the descending square roots of the eigenvalues of
    the segment's point covariance about its centroid.
    """
    eigvals = np.linalg.eigvalsh(segment.covariance())
    axes = np.sqrt(np.clip(eigvals, 0.0, None))[::-1]
    return ObjectObservation(
        timestamp_us=timestamp_us,
        sensor_id=sensor_id,
        class_id=segment.class_id,
        pose=pose,
        assoc_dist=float(assoc_dist),
        ellipsoid=axes,
        segment=segment if include_segment else None,
    )

"""Sensor-side geometric processing of depth data.

Depth-mask backprojection, Euclidean clustering and statistical outlier
removal. Everything operates on PointCloudSegment, the unit of evidence a
sensor ships to the backend.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from .geometry import CameraModel

FRAME_CAMERA = "camera"
FRAME_WORLD = "world"


@dataclass(frozen=True)
class DepthFrame:
    """Per-pixel depth (meters, 0 = invalid) plus a semantic class mask."""

    depth: np.ndarray  # (h, w) float
    class_mask: np.ndarray  # (h, w) int
    timestamp_us: int

    def __post_init__(self):
        if self.depth.shape != self.class_mask.shape:
            raise ValueError("depth and class_mask shapes differ")


@dataclass(frozen=True)
class PointCloudSegment:
    """One geometric cluster of 3D points with per-point attributes."""

    xyz: np.ndarray  # (n, 3) float64
    class_id: int
    frame: str = FRAME_CAMERA
    timestamp_us: int = 0
    sensor_id: int = 0
    rgb: np.ndarray | None = None  # (n,) uint32 packed
    confidence: np.ndarray | None = None  # (n,) float32

    def __post_init__(self):
        xyz = np.asarray(self.xyz, dtype=np.float64).reshape(-1, 3)
        object.__setattr__(self, "xyz", xyz)
        n = len(xyz)
        rgb = self.rgb if self.rgb is not None else np.zeros(n, dtype=np.uint32)
        conf = self.confidence if self.confidence is not None else np.ones(n, dtype=np.float32)
        object.__setattr__(self, "rgb", np.asarray(rgb, dtype=np.uint32).reshape(n))
        object.__setattr__(self, "confidence", np.asarray(conf, dtype=np.float32).reshape(n))

    def __len__(self) -> int:
        return len(self.xyz)

    def take(self, idx) -> "PointCloudSegment":
        return replace(self, xyz=self.xyz[idx], rgb=self.rgb[idx], confidence=self.confidence[idx])

    def centroid(self) -> np.ndarray:
        return self.xyz.mean(axis=0)

    def covariance(self) -> np.ndarray:
        d = self.xyz - self.centroid()
        return d.T @ d / len(d)

    def to_world(self, cam: CameraModel) -> "PointCloudSegment":
        if self.frame == FRAME_WORLD:
            return self
        return replace(self, xyz=cam.cam_to_world(self.xyz), frame=FRAME_WORLD)


def depth_to_cloud(frame: DepthFrame, cam: CameraModel, class_id: int) -> PointCloudSegment:
    """Backproject every valid masked pixel to a camera-frame point cloud.

    Invalid depths (zero or non-finite) are silently skipped; the result may
    be empty.
    """
    h, w = frame.depth.shape
    valid = (frame.class_mask == class_id) & np.isfinite(frame.depth) & (frame.depth > 0.0)
    v_idx, u_idx = np.nonzero(valid)
    d = frame.depth[v_idx, u_idx].astype(np.float64)
    x = (u_idx - cam.cx) / cam.fx * d
    y = (v_idx - cam.cy) / cam.fy * d
    return PointCloudSegment(
        xyz=np.stack([x, y, d], axis=1),
        class_id=class_id,
        frame=FRAME_CAMERA,
        timestamp_us=frame.timestamp_us,
    )


def euclidean_cluster(
    cloud: PointCloudSegment, tol: float = 0.10, min_points: int = 50
) -> list[PointCloudSegment]:
    """Partition a cloud into Euclidean clusters.

    Two points share a cluster iff they are connected by a chain of
    neighbors with pairwise distance <= tol. Clusters below min_points are
    dropped; output is sorted by descending size (ties by first point index,
    which makes the result independent of input point order as a set
    partition).
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    n = len(cloud)
    if n == 0:
        return []
    tree = cKDTree(cloud.xyz)
    pairs = tree.query_pairs(tol, output_type="ndarray")
    if len(pairs):
        adj = coo_matrix(
            (np.ones(len(pairs), dtype=np.int8), (pairs[:, 0], pairs[:, 1])), shape=(n, n)
        )
    else:
        adj = coo_matrix((n, n), dtype=np.int8)
    _, labels = connected_components(adj, directed=False)
    clusters = []
    for lbl in np.unique(labels):
        idx = np.flatnonzero(labels == lbl)
        if len(idx) >= min_points:
            clusters.append(cloud.take(idx))
    clusters.sort(key=lambda c: -len(c))
    return clusters


def sor_filter(
    cloud: PointCloudSegment, k_neighbors: int = 20, stddev_mult: float = 2.0
) -> PointCloudSegment:
    """Statistical outlier removal.

    Drops points whose mean distance to their k nearest neighbors exceeds
    mu + stddev_mult * sigma of that statistic over the whole cloud. Clouds
    with <= k_neighbors points are returned unchanged.
    """
    if k_neighbors < 1:
        raise ValueError("k_neighbors must be >= 1")
    n = len(cloud)
    if n <= k_neighbors:
        return cloud
    tree = cKDTree(cloud.xyz)
    dists, _ = tree.query(cloud.xyz, k=k_neighbors + 1)
    mean_d = dists[:, 1:].mean(axis=1)
    thresh = mean_d.mean() + stddev_mult * mean_d.std()
    return cloud.take(np.flatnonzero(mean_d <= thresh))

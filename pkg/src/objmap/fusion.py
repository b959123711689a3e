"""Backend synchronization and multi-view fusion of object observations.

Observation streams from the sensors are grouped into timestamp-synchronized
frame-sets, split into per-instance groups by position gating, and fused by
distance-weighted interpolation (slerp chain for orientations).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import Pose, weighted_quat_mean
from .pose_est import ObjectObservation

WEIGHT_EPSILON = 1e-3  # meters; clamps 1/assoc_dist for perfect associations


class FusionError(Exception):
    pass


class EmptyGroup(FusionError):
    pass


class NoSegments(FusionError):
    pass


@dataclass(frozen=True)
class FrameSet:
    """One timestamp-synchronized group of observations across sensors."""

    t_ref_us: int
    observations: dict[int, list[ObjectObservation]]  # sensor_id -> observations

    def all_observations(self) -> list[ObjectObservation]:
        return [o for sid in sorted(self.observations) for o in self.observations[sid]]


@dataclass(frozen=True)
class FusedObject:
    class_id: int
    pose: Pose
    ellipsoid: np.ndarray  # (3,) semi-axis lengths
    sensor_ids: tuple[int, ...]
    total_weight: float
    merged_cluster: np.ndarray | None = None  # (n, 3) world points


def synchronize(streams: dict[int, list[ObjectObservation]], sync_window_us: int) -> list[FrameSet]:
    """Group per-sensor observation queues into frame-sets.

    Greedy: the earliest unconsumed timestamp opens a frame-set that absorbs
    every observation within sync_window_us of it; each observation is
    consumed exactly once and frame-sets come out in timestamp order.
    """
    pending = sorted(
        (obs for queue in streams.values() for obs in queue),
        key=lambda o: (o.timestamp_us, o.sensor_id),
    )
    frame_sets = []
    i = 0
    n = len(pending)
    while i < n:
        t0 = pending[i].timestamp_us
        members: dict[int, list[ObjectObservation]] = {}
        while i < n and pending[i].timestamp_us - t0 <= sync_window_us:
            obs = pending[i]
            members.setdefault(obs.sensor_id, []).append(obs)
            i += 1
        frame_sets.append(FrameSet(t_ref_us=t0, observations=members))
    return frame_sets


def group_by_instance(fs: FrameSet, gating_dist: float = 0.5) -> list[list[ObjectObservation]]:
    """Split a frame-set into per-object groups.

    Same-class observations are single-linkage clustered on position with
    the given gate. Groups are ordered by (class_id, first observation).
    """
    obs = fs.all_observations()
    n = len(obs)
    parent = list(range(n))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for i in range(n):
        for j in range(i + 1, n):
            if obs[i].class_id != obs[j].class_id:
                continue
            if np.linalg.norm(obs[i].pose.t - obs[j].pose.t) <= gating_dist:
                parent[find(j)] = find(i)

    groups: dict[int, list[ObjectObservation]] = {}
    for i in range(n):
        groups.setdefault(find(i), []).append(obs[i])
    return [groups[r] for r in sorted(groups, key=lambda r: (groups[r][0].class_id, r))]


def fusion_weights(group: list[ObjectObservation]) -> np.ndarray:
    return np.array([1.0 / max(o.assoc_dist, WEIGHT_EPSILON) for o in group])


def fuse(group: list[ObjectObservation]) -> FusedObject:
    """Fuse one per-instance observation group into a single estimate.

    Interpolation weights are inversely proportional to the association
    distance; positions and ellipsoid axes use the weighted arithmetic mean,
    orientations a weighted slerp chain in ascending sensor-id order.
    """
    if not group:
        raise EmptyGroup("cannot fuse an empty observation group")
    classes = {o.class_id for o in group}
    if len(classes) != 1:
        raise FusionError(f"group mixes classes {sorted(classes)}")
    group = sorted(group, key=lambda o: (o.sensor_id, o.timestamp_us))
    w = fusion_weights(group)
    w_sum = float(w.sum())
    wn = w / w_sum
    position = np.einsum("i,ij->j", wn, np.stack([o.pose.t for o in group]))
    quat = weighted_quat_mean([o.pose.q for o in group], list(w))
    ellipsoid = np.einsum("i,ij->j", wn, np.stack([o.ellipsoid for o in group]))
    clusters = [o.segment.xyz for o in group if o.segment is not None]
    return FusedObject(
        class_id=group[0].class_id,
        pose=Pose(position, quat),
        ellipsoid=ellipsoid,
        sensor_ids=tuple(o.sensor_id for o in group),
        total_weight=w_sum,
        merged_cluster=np.concatenate(clusters) if clusters else None,
    )


def merge_clusters(group: list[ObjectObservation]) -> np.ndarray:
    """Concatenate the attached point segments of a group (world frame)."""
    clusters = [o.segment.xyz for o in group if o.segment is not None]
    if not clusters:
        raise NoSegments("no observation in the group carries a segment")
    return np.concatenate(clusters)

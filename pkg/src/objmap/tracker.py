"""Backend object instance tracking.

Constant-velocity prediction over a moving window of past positions,
globally-greedy nearest-neighbor association gated by distance and class,
and a lifecycle with confirmation and stale-track clean-up.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .geometry import Pose
from .fusion import FusedObject
from .submap import VoxelSubMap, integrate


@dataclass(frozen=True)
class TrackerConfig:
    tau_track: float = 0.75  # association gate (m)
    window: int = 5  # position history length (frames)
    max_unseen_s: float = 10.0  # seconds before a stale track is removed
    min_hits_confirm: int = 2


@dataclass
class TrackedObject:
    track_id: int
    class_id: int
    pose: Pose
    last_seen_us: int
    hits: int = 1
    history: deque = field(default_factory=lambda: deque(maxlen=5))  # (t_us, position)
    velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))  # m/s
    ellipsoid: np.ndarray = field(default_factory=lambda: np.zeros(3))
    submap: VoxelSubMap | None = None

    def confirmed(self, min_hits: int) -> bool:
        return self.hits >= min_hits


def _window_velocity(history) -> np.ndarray:
    """Slope between the oldest and newest window entries (robust to
    mid-window jitter); zero until two entries exist."""
    if len(history) < 2:
        return np.zeros(3)
    (t0, p0), (t1, p1) = history[0], history[-1]
    dt = (t1 - t0) * 1e-6
    if dt <= 0:
        return np.zeros(3)
    return (np.asarray(p1) - np.asarray(p0)) / dt


def predict(track: TrackedObject, t_now_us: int) -> np.ndarray:
    """Constant-velocity position prediction at t_now."""
    dt = (t_now_us - track.last_seen_us) * 1e-6
    return track.pose.t + track.velocity * dt


@dataclass
class Association:
    matches: list[tuple[TrackedObject, FusedObject]]
    unmatched_objects: list[FusedObject]
    unmatched_tracks: list[TrackedObject]


def associate(
    tracks: list[TrackedObject],
    fused_objects: list[FusedObject],
    t_now_us: int,
    tau_track: float,
) -> Association:
    """Globally-greedy smallest-distance-first one-to-one matching between
    predicted track positions and fused observations of the same class."""
    candidates = []
    for ti, track in enumerate(tracks):
        pred = predict(track, t_now_us)
        for oi, obj in enumerate(fused_objects):
            if obj.class_id != track.class_id:
                continue
            d = float(np.linalg.norm(obj.pose.t - pred))
            if d <= tau_track:
                candidates.append((d, ti, oi))
    candidates.sort()
    used_t: set[int] = set()
    used_o: set[int] = set()
    matches = []
    for d, ti, oi in candidates:
        if ti in used_t or oi in used_o:
            continue
        used_t.add(ti)
        used_o.add(oi)
        matches.append((tracks[ti], fused_objects[oi]))
    return Association(
        matches=matches,
        unmatched_objects=[o for i, o in enumerate(fused_objects) if i not in used_o],
        unmatched_tracks=[t for i, t in enumerate(tracks) if i not in used_t],
    )


class Tracker:
    """Owns all track hypotheses; driven once per synchronized frame-set."""

    def __init__(self, cfg: TrackerConfig | None = None, submap_resolution: float = 0.05,
                 submap_tau_occ: int = 2, keep_submaps: bool = False):
        self.cfg = cfg or TrackerConfig()
        self.tracks: list[TrackedObject] = []
        self.keep_submaps = keep_submaps
        self.submap_resolution = submap_resolution
        self.submap_tau_occ = submap_tau_occ
        self._next_id = 1  # ids are unique for the lifetime of the tracker

    def _new_track(self, obj: FusedObject, t_now_us: int) -> TrackedObject:
        track = TrackedObject(
            track_id=self._next_id,
            class_id=obj.class_id,
            pose=obj.pose,
            last_seen_us=t_now_us,
            history=deque(maxlen=self.cfg.window),
            ellipsoid=np.asarray(obj.ellipsoid, float),
        )
        self._next_id += 1
        track.history.append((t_now_us, obj.pose.t.copy()))
        if self.keep_submaps:
            track.submap = VoxelSubMap(self.submap_resolution, self.submap_tau_occ)
        return track

    def update(self, fused_objects: list[FusedObject], t_now_us: int) -> list[TrackedObject]:
        """Associate, update matched tracks, spawn tracks for unmatched
        observations, and clean up stale hypotheses."""
        assoc = associate(self.tracks, fused_objects, t_now_us, self.cfg.tau_track)
        for track, obj in assoc.matches:
            track.pose = obj.pose
            track.ellipsoid = np.asarray(obj.ellipsoid, float)
            track.history.append((t_now_us, obj.pose.t.copy()))
            track.velocity = _window_velocity(track.history)
            track.last_seen_us = t_now_us
            track.hits += 1
            if track.submap is not None and obj.merged_cluster is not None:
                integrate(track.submap, obj.merged_cluster, obj.pose)
        for obj in assoc.unmatched_objects:
            track = self._new_track(obj, t_now_us)
            if track.submap is not None and obj.merged_cluster is not None:
                integrate(track.submap, obj.merged_cluster, obj.pose)
            self.tracks.append(track)
        self.cleanup(t_now_us)
        return self.confirmed_tracks()

    def cleanup(self, t_now_us: int) -> None:
        limit = self.cfg.max_unseen_s * 1e6
        self.tracks = [t for t in self.tracks if t_now_us - t.last_seen_us <= limit]

    def confirmed_tracks(self) -> list[TrackedObject]:
        return [t for t in self.tracks if t.confirmed(self.cfg.min_hits_confirm)]

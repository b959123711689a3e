"""End-to-end wiring: sensor pipelines, backend pipeline, run artifacts.

A run executes the full dataflow of the mapping system: the simulator
produces per-camera detections, each sensor pipeline turns them into
world-frame object observations (clustering, PnP-RANSAC, association, ICP),
the observations travel through the wire protocol, and the backend fuses,
tracks and snapshots the scene. The in-process runner executes sensors
sequentially so that identical configs produce byte-identical artifacts;
`serve_backend`/`run_sensor` provide the distributed variant over TCP.
"""

from __future__ import annotations

import io
import json
import socket
import threading
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import protocol
from .fusion import fuse, group_by_instance, synchronize
from .geometry import Pose
from .models import ObjectModel, model_registry
from .pose_est import (
    NoConsensus,
    ObjectObservation,
    PoseConfig,
    Skeleton3D,
    TooFewKeypoints,
    assoc_distance,
    build_observation,
    greedy_associate,
    ground_project,
    icp_refine,
    pnp_ransac,
    skeleton_from_pose,
)
from .protocol import SensorSession, SessionLogEntry, read_session
from .segmentation import PointCloudSegment, euclidean_cluster, sor_filter
from .sim import GroundTruthFrame, ScenarioConfig, _frame_rng, generate, observe
from .submap import save_submap
from .tracker import TrackedObject, Tracker, TrackerConfig

VARIANT_PNP = "pnp"
VARIANT_ICP_LOCAL = "icp_local"
VARIANT_ICP_BACKEND = "icp_backend"
VARIANTS = (VARIANT_PNP, VARIANT_ICP_LOCAL, VARIANT_ICP_BACKEND)

REPR_MESH = "mesh"
REPR_SUBMAP = "submap"

SNAPSHOT_HEADER = "# objmap scene snapshot v1"


class PipelineError(Exception):
    pass


class MissingArtifacts(PipelineError):
    pass


@dataclass(frozen=True)
class RunConfig:
    scenario: ScenarioConfig
    variant: str = VARIANT_ICP_LOCAL
    representation: str = REPR_MESH
    pose: PoseConfig = field(default_factory=PoseConfig)
    tracker: TrackerConfig = field(default_factory=TrackerConfig)
    sync_window_ms: float = 250.0
    gating_dist: float = 0.5
    submap_resolution: float = 0.05
    submap_tau_occ: int = 2
    cluster_tol: float = 0.10
    cluster_min_points: int = 50
    sor_k: int = 20
    sor_stddev_mult: float = 2.0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise PipelineError(f"unknown variant {self.variant!r}")
        if self.representation not in (REPR_MESH, REPR_SUBMAP):
            raise PipelineError(f"unknown representation {self.representation!r}")

    @property
    def transmit_segments(self) -> bool:
        # sub-map maintenance and backend ICP both need the raw segments
        return self.representation == REPR_SUBMAP or self.variant == VARIANT_ICP_BACKEND


def _wire_downsample(segment: PointCloudSegment, budget: int) -> PointCloudSegment:
    """Deterministic even-stride downsample to the transmission budget."""
    n = len(segment)
    if budget <= 0 or n <= budget:
        return segment
    idx = np.floor(np.arange(budget) * n / budget).astype(int)
    return segment.take(idx)


class SensorPipeline:
    """One smart-sensor node: turns simulator detections for its camera into
    world-frame object observations."""

    def __init__(self, cfg: RunConfig, cam_index: int,
                 models: dict[int, ObjectModel] | None = None):
        self.cfg = cfg
        self.cam_index = cam_index
        self.cam = cfg.scenario.cameras[cam_index]
        self.models = models if models is not None else model_registry()

    def process_frame(self, frame: GroundTruthFrame) -> list[ObjectObservation]:
        cfg = self.cfg
        detections = observe(cfg.scenario, frame, self.cam_index)

        # geometric segmentation: merge per-class points, re-cluster, denoise
        segments: list[PointCloudSegment] = []
        by_class: dict[int, list[PointCloudSegment]] = {}
        for det in detections:
            if det.segment is not None:
                by_class.setdefault(det.segment.class_id, []).append(det.segment)
        for class_id in sorted(by_class):
            parts = by_class[class_id]
            merged = PointCloudSegment(
                xyz=np.concatenate([p.xyz for p in parts]),
                class_id=class_id,
                frame=parts[0].frame,
                timestamp_us=frame.timestamp_us,
                sensor_id=self.cam_index,
            ).to_world(self.cam)
            for cluster in euclidean_cluster(merged, cfg.cluster_tol, cfg.cluster_min_points):
                segments.append(sor_filter(cluster, cfg.sor_k, cfg.sor_stddev_mult))

        # keypoint-based pose recovery per detected object
        skeletons: list[Skeleton3D] = []
        skeleton_models: list[ObjectModel] = []
        rng = _frame_rng(cfg.scenario.seed + 0x5EED, frame.index, self.cam_index)
        for det in detections:
            if det.keypoints is None:
                continue
            model = self.models[det.keypoints.class_id]
            try:
                result = pnp_ransac(det.keypoints, model, self.cam, cfg.pose, rng)
            except (TooFewKeypoints, NoConsensus):
                continue
            world_pose = self.cam.extrinsic.compose(result.pose)
            world_pose = ground_project(world_pose, model, cfg.pose.snap_to_ground)
            skeletons.append(skeleton_from_pose(model, world_pose))
            skeleton_models.append(model)

        observations = []
        for seg_idx, sk_idx in greedy_associate(skeletons, segments, cfg.pose.tau_dist):
            segment = segments[seg_idx]
            skeleton = skeletons[sk_idx]
            model = skeleton_models[sk_idx]
            dist = assoc_distance(skeleton, segment)
            pose = skeleton.pose
            if cfg.variant == VARIANT_ICP_LOCAL and len(segment) >= 10:
                refined = icp_refine(model, segment, pose, cfg.pose)
                pose = ground_project(refined.pose, model, cfg.pose.snap_to_ground)
            wire_segment = _wire_downsample(segment, cfg.scenario.segment_point_budget)
            observations.append(
                build_observation(
                    pose=pose,
                    segment=wire_segment,
                    assoc_dist=dist,
                    sensor_id=self.cam_index,
                    timestamp_us=frame.timestamp_us,
                    include_segment=cfg.transmit_segments,
                )
            )
        return observations


@dataclass
class SceneSnapshot:
    t_ref_us: int
    tracks: list[TrackedObject]


class BackendPipeline:
    """Backend: synchronize, fuse, (optionally) refine, track, snapshot."""

    def __init__(self, cfg: RunConfig, models: dict[int, ObjectModel] | None = None):
        self.cfg = cfg
        self.models = models if models is not None else model_registry()
        self.tracker = Tracker(
            cfg.tracker,
            submap_resolution=cfg.submap_resolution,
            submap_tau_occ=cfg.submap_tau_occ,
            keep_submaps=cfg.representation == REPR_SUBMAP,
        )

    def process(self, streams: dict[int, list[ObjectObservation]]) -> list[SceneSnapshot]:
        window_us = int(self.cfg.sync_window_ms * 1000)
        snapshots = []
        for fs in synchronize(streams, window_us):
            fused_objects = []
            for group in group_by_instance(fs, self.cfg.gating_dist):
                fused = fuse(group)
                if self.cfg.variant == VARIANT_ICP_BACKEND and fused.merged_cluster is not None:
                    model = self.models[fused.class_id]
                    cluster_seg = PointCloudSegment(
                        xyz=fused.merged_cluster, class_id=fused.class_id, frame="world",
                        timestamp_us=fs.t_ref_us,
                    )
                    if len(cluster_seg) >= 10:
                        refined = icp_refine(model, cluster_seg, fused.pose, self.cfg.pose)
                        pose = ground_project(refined.pose, model, self.cfg.pose.snap_to_ground)
                        fused = replace(fused, pose=pose)
                fused_objects.append(fused)
            tracks = self.tracker.update(fused_objects, fs.t_ref_us)
            snapshots.append(SceneSnapshot(fs.t_ref_us, [_copy_track(t) for t in tracks]))
        return snapshots


def _copy_track(track: TrackedObject) -> TrackedObject:
    out = TrackedObject(
        track_id=track.track_id,
        class_id=track.class_id,
        pose=track.pose,
        last_seen_us=track.last_seen_us,
        hits=track.hits,
        velocity=track.velocity.copy(),
        ellipsoid=track.ellipsoid.copy(),
        submap=track.submap,  # shared on purpose; exports read, never write
    )
    return out


# ---------------------------------------------------------------------------
# artifacts


def _floats(vals) -> str:
    return " ".join(repr(float(v)) for v in vals)


def write_snapshot(snapshot: SceneSnapshot, path: Path, submap_refs: dict[int, str]) -> None:
    lines = [SNAPSHOT_HEADER, f"# t_ref_us {snapshot.t_ref_us}"]
    for t in sorted(snapshot.tracks, key=lambda t: t.track_id):
        lines.append(
            f"track {t.track_id} class {t.class_id} hits {t.hits} "
            f"pos {_floats(t.pose.t)} quat {_floats(t.pose.q)} "
            f"vel {_floats(t.velocity)} ellipsoid {_floats(t.ellipsoid)} "
            f"submap {submap_refs.get(t.track_id, '-')}"
        )
    path.write_text("\n".join(lines) + "\n")


@dataclass
class SnapshotTrack:
    track_id: int
    class_id: int
    hits: int
    pose: Pose
    velocity: np.ndarray
    ellipsoid: np.ndarray
    submap_ref: str | None


def parse_snapshot(path: Path) -> tuple[int, list[SnapshotTrack]]:
    t_ref = 0
    tracks = []
    for line in path.read_text().splitlines():
        if line.startswith("# t_ref_us"):
            t_ref = int(line.split()[2])
        elif line.startswith("track "):
            tok = line.split()
            ref = tok[24]
            tracks.append(
                SnapshotTrack(
                    track_id=int(tok[1]),
                    class_id=int(tok[3]),
                    hits=int(tok[5]),
                    pose=Pose([float(v) for v in tok[7:10]], [float(v) for v in tok[11:15]]),
                    velocity=np.array([float(v) for v in tok[16:19]]),
                    ellipsoid=np.array([float(v) for v in tok[20:23]]),
                    submap_ref=None if ref == "-" else ref,
                )
            )
    return t_ref, tracks


def write_ground_truth(frames: list[GroundTruthFrame], cfg: ScenarioConfig, path: Path) -> None:
    models = cfg.models()
    with path.open("w") as fh:
        for frame in frames:
            rec = {
                "frame": frame.index,
                "t_us": frame.timestamp_us,
                "objects": [
                    {
                        "model": spec.model,
                        "class_id": model.class_id,
                        "t": [float(v) for v in pose.t],
                        "q": [float(v) for v in pose.q],
                    }
                    for spec, model, pose in zip(cfg.objects, models, frame.poses)
                ],
            }
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_ground_truth(path: Path) -> list[dict]:
    return [json.loads(line) for line in path.read_text().splitlines() if line.strip()]


@dataclass
class RunResult:
    out_dir: Path | None
    snapshots: list[SceneSnapshot]
    session_log: list[SessionLogEntry]
    streams: dict[int, list[ObjectObservation]]


def run_pipeline(cfg: RunConfig, out_dir: str | Path | None = None) -> RunResult:
    """Execute a full in-process run and (optionally) write its artifacts.

    Sensors are processed sequentially and their messages pass through the
    real wire encoding, so the replay file on disk is exactly what a
    networked backend would have received.
    """
    scenario = cfg.scenario
    frames = generate(scenario)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "snapshots").mkdir(exist_ok=True)
        write_ground_truth(frames, scenario, out / "gt.jsonl")
        from .sim import save_scenario

        save_scenario(scenario, out / "scenario.yaml")

    streams: dict[int, list[ObjectObservation]] = {}
    session_log: list[SessionLogEntry] = []
    stream_bytes = io.BytesIO()
    for cam_index in range(len(scenario.cameras)):
        sensor = SensorPipeline(cfg, cam_index)
        buf = io.BytesIO()
        session = SensorSession(buf, with_segments=cfg.transmit_segments)
        for frame in frames:
            for obs in sensor.process_frame(frame):
                session.send(obs)
        data = buf.getvalue()
        stream_bytes.write(data)
        observations, log = read_session(io.BytesIO(data))
        streams[cam_index] = observations
        session_log.extend(log)

    backend = BackendPipeline(cfg)
    snapshots = backend.process(streams)

    if out is not None:
        (out / "stream.bin").write_bytes(stream_bytes.getvalue())
        with (out / "session_log.jsonl").open("w") as fh:
            for e in session_log:
                fh.write(
                    json.dumps(
                        {
                            "t_us": e.timestamp_us,
                            "sensor_id": e.sensor_id,
                            "msg_type": e.msg_type,
                            "payload_len": e.payload_len,
                        },
                        sort_keys=True,
                    )
                    + "\n"
                )
        submap_dir = out / "submaps"
        for i, snapshot in enumerate(snapshots):
            refs: dict[int, str] = {}
            if cfg.representation == REPR_SUBMAP:
                submap_dir.mkdir(exist_ok=True)
                for t in snapshot.tracks:
                    if t.submap is not None:
                        ref = f"submaps/frame_{i:06d}_track_{t.track_id}.txt"
                        save_submap(t.submap, t.pose, out / ref)
                        refs[t.track_id] = ref
            write_snapshot(snapshot, out / "snapshots" / f"frame_{i:06d}.txt", refs)
        meta = {
            "variant": cfg.variant,
            "representation": cfg.representation,
            "n_frames": len(frames),
            "n_sensors": len(scenario.cameras),
            "seed": scenario.seed,
        }
        (out / "run_meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return RunResult(out, snapshots, session_log, streams)


def replay_run(stream_path: str | Path, cfg: RunConfig, out_dir: str | Path | None = None) -> RunResult:
    """Feed a recorded stream file through the backend pipeline."""
    from .sim import replay

    observations, session_log = replay(Path(stream_path))
    streams: dict[int, list[ObjectObservation]] = {}
    for obs in observations:
        streams.setdefault(obs.sensor_id, []).append(obs)
    backend = BackendPipeline(cfg)
    snapshots = backend.process(streams)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "snapshots").mkdir(exist_ok=True)
        submap_dir = out / "submaps"
        for i, snapshot in enumerate(snapshots):
            refs: dict[int, str] = {}
            if cfg.representation == REPR_SUBMAP:
                submap_dir.mkdir(exist_ok=True)
                for t in snapshot.tracks:
                    if t.submap is not None:
                        ref = f"submaps/frame_{i:06d}_track_{t.track_id}.txt"
                        save_submap(t.submap, t.pose, out / ref)
                        refs[t.track_id] = ref
            write_snapshot(snapshot, out / "snapshots" / f"frame_{i:06d}.txt", refs)
    return RunResult(out, snapshots, session_log, streams)


# ---------------------------------------------------------------------------
# networked mode (one TCP session per sensor)


def serve_backend(bind_addr: tuple[str, int], n_sensors: int, cfg: RunConfig,
                  out_dir: str | Path | None = None, timeout_s: float = 30.0) -> RunResult:
    """Accept one session per sensor, then run the backend pipeline."""
    streams: dict[int, list[ObjectObservation]] = {}
    session_log: list[SessionLogEntry] = []
    lock = threading.Lock()

    def handle(conn: socket.socket):
        with conn, conn.makefile("rb") as fh:
            observations, log = read_session(fh)
        with lock:
            for obs in observations:
                streams.setdefault(obs.sensor_id, []).append(obs)
            session_log.extend(log)

    with socket.create_server(bind_addr) as server:
        server.settimeout(timeout_s)
        threads = []
        for _ in range(n_sensors):
            conn, _ = server.accept()
            t = threading.Thread(target=handle, args=(conn,))
            t.start()
            threads.append(t)
        for t in threads:
            t.join(timeout=timeout_s)

    backend = BackendPipeline(cfg)
    snapshots = backend.process(streams)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "snapshots").mkdir(exist_ok=True)
        for i, snapshot in enumerate(snapshots):
            write_snapshot(snapshot, out / "snapshots" / f"frame_{i:06d}.txt", {})
    return RunResult(out, snapshots, session_log, streams)


def run_sensor(cfg: RunConfig, cam_index: int, connect_addr: tuple[str, int]) -> int:
    """Stream one sensor's observations to a remote backend; returns the
    number of payload bytes sent."""
    frames = generate(cfg.scenario)
    sensor = SensorPipeline(cfg, cam_index)
    with socket.create_connection(connect_addr) as sock:
        with sock.makefile("wb") as fh:
            session = SensorSession(fh, with_segments=cfg.transmit_segments)
            for frame in frames:
                for obs in sensor.process_frame(frame):
                    session.send(obs)
            fh.flush()
            sent = session.bytes_sent
    return sent

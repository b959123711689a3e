"""Run-level evaluation: pose-error and IoU reports from run artifacts."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import Pose
from .metrics import (
    PoseErrorStats,
    bandwidth_report,
    format_report_table,
    iou_dilated,
    match_tracks_to_gt,
    render_model_mask,
)
from .models import model_registry
from .pipeline import MissingArtifacts, parse_snapshot, read_ground_truth
from .protocol import SessionLogEntry
from .sim import ScenarioConfig, load_scenario
from .submap import load_submap, render_mask


@dataclass
class RunEvaluation:
    name: str
    pose_stats: PoseErrorStats
    per_frame: list[dict]  # frame index -> matched per-object errors
    bandwidth: dict
    iou_per_camera: dict[int, list[float]]

    def summary(self) -> dict:
        s = self.pose_stats.summary()
        s["name"] = self.name
        for cam, vals in sorted(self.iou_per_camera.items()):
            if vals:
                s[f"iou_cam{cam}"] = float(np.mean(vals))
        if self.iou_per_camera:
            all_vals = [v for vals in self.iou_per_camera.values() for v in vals]
            if all_vals:
                s["iou_total"] = float(np.mean(all_vals))
        return s


def _load_run(run_dir: Path):
    gt_path = run_dir / "gt.jsonl"
    snap_dir = run_dir / "snapshots"
    if not gt_path.exists():
        raise MissingArtifacts(f"{gt_path} not found")
    if not snap_dir.is_dir():
        raise MissingArtifacts(f"{snap_dir} not found")
    gt = read_ground_truth(gt_path)
    snapshots = [parse_snapshot(p) for p in sorted(snap_dir.glob("frame_*.txt"))]
    return gt, snapshots


def _load_session_log(run_dir: Path) -> list[SessionLogEntry]:
    path = run_dir / "session_log.jsonl"
    if not path.exists():
        return []
    entries = []
    for line in path.read_text().splitlines():
        rec = json.loads(line)
        entries.append(
            SessionLogEntry(rec["t_us"], rec["sensor_id"], rec["msg_type"], rec["payload_len"])
        )
    return entries


def evaluate_run(
    run_dir: str | Path,
    name: str | None = None,
    match_dist_m: float = 1.0,
    iou: bool = False,
    iou_stride: int = 10,
    iou_dilate_px: int = 10,
    scenario: ScenarioConfig | None = None,
) -> RunEvaluation:
    """Compare a run's tracked poses against its ground truth.

    Per frame, confirmed tracks are matched to ground-truth objects of the
    same class by smallest distance. With iou=True the tracked object is
    additionally splat-rendered into every camera (one frame in iou_stride)
    and scored against the ground-truth-pose rendering.
    """
    run_dir = Path(run_dir)
    gt, snapshots = _load_run(run_dir)
    if iou and scenario is None:
        scen_path = run_dir / "scenario.yaml"
        if not scen_path.exists():
            raise MissingArtifacts(f"{scen_path} needed for IoU evaluation")
        scenario = load_scenario(scen_path)

    models = model_registry()
    gt_by_t = {rec["t_us"]: rec for rec in gt}
    stats = PoseErrorStats()
    per_frame = []
    iou_per_camera: dict[int, list[float]] = {}
    for snap_idx, (t_ref, tracks) in enumerate(snapshots):
        rec = gt_by_t.get(t_ref)
        if rec is None:
            continue
        gt_states = [(o["class_id"], Pose(o["t"], o["q"])) for o in rec["objects"]]
        track_states = [(t.class_id, t.pose) for t in tracks]
        matches = match_tracks_to_gt(track_states, gt_states, match_dist_m)
        frame_errors = []
        for ti, gi in matches:
            est, gt_pose = track_states[ti][1], gt_states[gi][1]
            stats.add(est, gt_pose)
            frame_errors.append(
                {
                    "track_id": tracks[ti].track_id,
                    "gt_index": gi,
                    "trans_cm": stats.trans_cm[-1],
                    "rot_deg": stats.rot_deg[-1],
                }
            )
            if iou and snap_idx % iou_stride == 0:
                model = models[track_states[ti][0]]
                for cam_idx, cam in enumerate(scenario.cameras):
                    gt_mask = render_model_mask(model, gt_pose, cam)
                    if tracks[ti].submap_ref is not None:
                        submap, _ = load_submap(run_dir / tracks[ti].submap_ref)
                        pred_mask = render_mask(submap, est, cam)
                    else:
                        pred_mask = render_model_mask(model, est, cam)
                    iou_per_camera.setdefault(cam_idx, []).append(
                        iou_dilated(pred_mask, gt_mask, iou_dilate_px)
                    )
        per_frame.append(
            {"t_us": t_ref, "n_tracks": len(tracks), "matches": frame_errors}
        )
    return RunEvaluation(
        name=name or run_dir.name,
        pose_stats=stats,
        per_frame=per_frame,
        bandwidth=bandwidth_report(_load_session_log(run_dir)),
        iou_per_camera=iou_per_camera,
    )


def run_eval(
    run_dirs: dict[str, str | Path],
    out_dir: str | Path | None = None,
    iou: bool = False,
    iou_stride: int = 10,
) -> dict:
    """Evaluate one or more runs (e.g. PnP-only vs ICP variants) and emit
    an aligned-text table plus a machine-readable report."""
    evaluations = [
        evaluate_run(path, name=name, iou=iou, iou_stride=iou_stride)
        for name, path in run_dirs.items()
    ]
    rows = [ev.summary() for ev in evaluations]
    columns = ["name", "n", "e_trans", "sigma_trans", "e_rot", "sigma_rot"]
    if any("iou_total" in r for r in rows):
        columns += sorted({c for r in rows for c in r if c.startswith("iou_cam")}) + ["iou_total"]
    table = format_report_table(rows, columns, title="Pose evaluation (cm / deg)")
    report = {
        "variants": rows,
        "bandwidth": {ev.name: ev.bandwidth for ev in evaluations},
        "per_frame": {ev.name: ev.per_frame for ev in evaluations},
    }
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.txt").write_text(table + "\n")
        (out / "report.json").write_text(json.dumps(report, sort_keys=True, indent=2) + "\n")
    return report

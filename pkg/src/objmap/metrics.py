"""Evaluation metrics: pose errors, dilated-mask IoU, bandwidth accounting.

Translation error is the Euclidean distance in centimeters, rotation error
the quaternion geodesic distance in degrees. The reprojection IoU dilates
the ground-truth mask with a square kernel so that boundary misalignment up
to the sub-map resolution is not penalized: matched pixels are counted
against the dilated ground truth while the union keeps the original mask
sizes (dilation therefore never lowers the score).
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field

import cv2
import numpy as np

from .geometry import CameraModel, Pose, geodesic_deg
from .models import ObjectModel
from .protocol import MSG_OBSERVATION, MSG_SEGMENT, SessionLogEntry


class MetricsError(Exception):
    pass


class DimensionMismatch(MetricsError):
    pass


def trans_error_cm(est: Pose, gt: Pose) -> float:
    return 100.0 * float(np.linalg.norm(est.t - gt.t))


def rot_error_deg(est: Pose, gt: Pose) -> float:
    return geodesic_deg(est.q, gt.q)


def iou_dilated(pred_mask: np.ndarray, gt_mask: np.ndarray, dilate_px: int = 10) -> float:
    """IoU of two binary masks with ground-truth dilation.

    inter = |pred AND dilate(gt)|, union = |pred| + |gt| - inter. Identical
    masks score 1.0 at any dilation; an empty union is defined as 1.0.
    """
    if pred_mask.shape != gt_mask.shape:
        raise DimensionMismatch(f"{pred_mask.shape} vs {gt_mask.shape}")
    pred = pred_mask.astype(bool)
    gt = gt_mask.astype(bool)
    if dilate_px > 0:
        kernel = np.ones((dilate_px, dilate_px), dtype=np.uint8)
        gt_d = cv2.dilate(gt.astype(np.uint8), kernel).astype(bool)
    else:
        gt_d = gt
    inter = int(np.count_nonzero(pred & gt_d))
    union = int(np.count_nonzero(pred)) + int(np.count_nonzero(gt)) - inter
    if union <= 0:
        return 1.0
    return min(1.0, inter / union)


def render_model_mask(
    model: ObjectModel, pose: Pose, cam: CameraModel, splat_radius_m: float = 0.05
) -> np.ndarray:
    """Splat-render the model cloud at a pose as a binary image.

    Each cloud point becomes a filled disc with its projected radius; a pose
    fully behind the camera renders an empty mask.
    """
    mask = np.zeros((cam.height, cam.width), dtype=np.uint8)
    pts_cam = cam.world_to_cam(pose.apply(model.model_cloud))
    uv, valid = cam.project_many(pts_cam)
    if not valid.any():
        return mask
    z = pts_cam[valid, 2]
    r_px = np.maximum(1, np.round(cam.fx * splat_radius_m / z)).astype(int)
    for (u, v), r in zip(np.round(uv[valid]).astype(int), r_px):
        if -r <= u < cam.width + r and -r <= v < cam.height + r:
            cv2.circle(mask, (int(u), int(v)), int(r), 1, -1)
    return mask


def bandwidth_report(
    log: list[SessionLogEntry], fallback_period_s: float = 1.0
) -> dict[int, dict[str, float]]:
    """Payload bytes per second, split by sensor and message type.

    Duration is logical: the timestamp span plus one median inter-frame gap
    (so a run of n frames at rate f spans exactly n/f seconds).
    """
    per_sensor: dict[int, list[SessionLogEntry]] = defaultdict(list)
    for entry in log:
        per_sensor[entry.sensor_id].append(entry)
    report: dict[int, dict[str, float]] = {}
    for sensor_id, entries in sorted(per_sensor.items()):
        ts = sorted({e.timestamp_us for e in entries})
        if len(ts) > 1:
            gaps = np.diff(ts)
            duration_s = (ts[-1] - ts[0] + float(np.median(gaps))) * 1e-6
        else:
            duration_s = fallback_period_s
        by_type = defaultdict(int)
        for e in entries:
            by_type[e.msg_type] += e.payload_len
        report[sensor_id] = {
            "duration_s": duration_s,
            "observation_bytes": by_type[MSG_OBSERVATION],
            "segment_bytes": by_type[MSG_SEGMENT],
            "observation_bps": by_type[MSG_OBSERVATION] / duration_s,
            "segment_bps": by_type[MSG_SEGMENT] / duration_s,
            "total_bps": sum(by_type.values()) / duration_s,
        }
    return report


# ---------------------------------------------------------------------------
# aggregation


@dataclass
class PoseErrorStats:
    trans_cm: list[float] = field(default_factory=list)
    rot_deg: list[float] = field(default_factory=list)

    def add(self, est: Pose, gt: Pose) -> None:
        self.trans_cm.append(trans_error_cm(est, gt))
        self.rot_deg.append(rot_error_deg(est, gt))

    def summary(self) -> dict[str, float]:
        t = np.asarray(self.trans_cm)
        r = np.asarray(self.rot_deg)
        if len(t) == 0:
            return {"n": 0, "e_trans": float("nan"), "sigma_trans": float("nan"),
                    "e_rot": float("nan"), "sigma_rot": float("nan")}
        return {
            "n": len(t),
            "e_trans": float(t.mean()),
            "sigma_trans": float(t.std()),
            "e_rot": float(r.mean()),
            "sigma_rot": float(r.std()),
        }


def match_tracks_to_gt(
    track_states: list[tuple[int, Pose]],
    gt_states: list[tuple[int, Pose]],
    max_dist_m: float = 1.0,
) -> list[tuple[int, int]]:
    """Greedy same-class smallest-distance matching of (class_id, pose)
    track states to ground-truth states; returns (track_idx, gt_idx)."""
    cands = []
    for i, (tc, tp) in enumerate(track_states):
        for j, (gc, gp) in enumerate(gt_states):
            if tc != gc:
                continue
            d = float(np.linalg.norm(tp.t - gp.t))
            if d <= max_dist_m:
                cands.append((d, i, j))
    cands.sort()
    used_i: set[int] = set()
    used_j: set[int] = set()
    out = []
    for d, i, j in cands:
        if i in used_i or j in used_j:
            continue
        used_i.add(i)
        used_j.add(j)
        out.append((i, j))
    return out


def format_report_table(rows: list[dict], columns: list[str], title: str = "") -> str:
    """Aligned-text table, one dict per row."""
    widths = {c: max(len(c), *(len(_fmt(r.get(c))) for r in rows)) if rows else len(c) for c in columns}
    lines = []
    if title:
        lines.append(title)
    lines.append("  ".join(c.ljust(widths[c]) for c in columns))
    lines.append("  ".join("-" * widths[c] for c in columns))
    for r in rows:
        lines.append("  ".join(_fmt(r.get(c)).ljust(widths[c]) for c in columns))
    return "\n".join(lines)


def _fmt(v) -> str:
    if v is None:
        return "-"
    if isinstance(v, float):
        return f"{v:.3f}"
    return str(v)

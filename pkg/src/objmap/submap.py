"""Object-centric sparse voxel sub-maps.

Point hits increment per-voxel occupancy counts in the object's local
frame; a voxel counts as occupied once its count reaches the threshold.
Voxel index = floor(coordinate / resolution) per axis, centers at
half-resolution offsets (bit-exact, relied on by the test oracles).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np

from .geometry import CameraModel, Pose

DEFAULT_RESOLUTION = 0.05  # m, voxel edge length
DEFAULT_TAU_OCC = 2


@dataclass
class VoxelSubMap:
    resolution: float = DEFAULT_RESOLUTION
    tau_occ: int = DEFAULT_TAU_OCC
    counts: dict[tuple[int, int, int], int] = field(default_factory=dict)

    def __post_init__(self):
        if self.resolution <= 0:
            raise ValueError("resolution must be positive")


def voxel_indices(points: np.ndarray, resolution: float) -> np.ndarray:
    """Integer voxel index per point, (n, 3)."""
    return np.floor(np.asarray(points, float) / resolution).astype(np.int64)


def integrate(submap: VoxelSubMap, cluster: np.ndarray, object_pose: Pose) -> VoxelSubMap:
    """Integrate a world-frame point cluster into the sub-map in place.

    Points are mapped into the object frame via the inverse object pose;
    each hit increments its voxel count by one. Counts never decay.
    """
    cluster = np.asarray(cluster, float).reshape(-1, 3)
    if len(cluster) == 0:
        return submap
    local = object_pose.inverse().apply(cluster)
    idx = voxel_indices(local, submap.resolution)
    for key in map(tuple, idx.tolist()):
        submap.counts[key] = submap.counts.get(key, 0) + 1
    return submap


def occupied(submap: VoxelSubMap) -> np.ndarray:
    """Centers (object frame) of voxels with count >= tau_occ, (n, 3)."""
    keys = sorted(k for k, c in submap.counts.items() if c >= submap.tau_occ)
    if not keys:
        return np.zeros((0, 3))
    return (np.asarray(keys, dtype=np.float64) + 0.5) * submap.resolution


_CUBE_CORNERS = np.array(
    [[sx, sy, sz] for sx in (-0.5, 0.5) for sy in (-0.5, 0.5) for sz in (-0.5, 0.5)]
)


def render_mask(submap: VoxelSubMap, object_pose: Pose, cam: CameraModel) -> np.ndarray:
    """Binary image of the occupied voxels seen from a camera.

    Each occupied voxel is drawn as the filled convex hull of its eight
    projected cube corners; voxels (partly) behind the camera are skipped.
    """
    mask = np.zeros((cam.height, cam.width), dtype=np.uint8)
    centers = occupied(submap)
    if len(centers) == 0:
        return mask
    centers_world = object_pose.apply(centers)
    corner_offsets = _CUBE_CORNERS * submap.resolution
    R = object_pose.rotation_matrix()
    for cw in centers_world:
        corners_world = cw + corner_offsets @ R.T
        corners_cam = cam.world_to_cam(corners_world)
        uv, valid = cam.project_many(corners_cam)
        if not valid.all():
            continue
        hull = cv2.convexHull(np.round(uv).astype(np.int32))
        cv2.fillConvexPoly(mask, hull, 1)
    return mask


def save_submap(submap: VoxelSubMap, object_pose: Pose, path: str | Path) -> None:
    """Snapshot export: header with resolution/threshold/pose, then one
    `ix iy iz count` line per voxel meeting the occupancy threshold."""
    lines = [
        "# objmap submap v1",
        f"# resolution {float(submap.resolution)!r}",
        f"# tau_occ {submap.tau_occ}",
        "# pose "
        + " ".join(repr(float(v)) for v in (*object_pose.t, *object_pose.q)),
    ]
    for (ix, iy, iz) in sorted(k for k, c in submap.counts.items() if c >= submap.tau_occ):
        lines.append(f"{ix} {iy} {iz} {submap.counts[(ix, iy, iz)]}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_submap(path: str | Path) -> tuple[VoxelSubMap, Pose]:
    resolution = DEFAULT_RESOLUTION
    tau_occ = DEFAULT_TAU_OCC
    pose = Pose.identity()
    counts: dict[tuple[int, int, int], int] = {}
    for line in Path(path).read_text().splitlines():
        if line.startswith("# resolution"):
            resolution = float(line.split()[2])
        elif line.startswith("# tau_occ"):
            tau_occ = int(line.split()[2])
        elif line.startswith("# pose"):
            vals = [float(v) for v in line.split()[2:]]
            pose = Pose(vals[:3], vals[3:])
        elif line and not line.startswith("#"):
            ix, iy, iz, c = line.split()
            counts[(int(ix), int(iy), int(iz))] = int(c)
    return VoxelSubMap(resolution=resolution, tau_occ=tau_occ, counts=counts), pose

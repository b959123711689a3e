"""Object models: class-specific keypoints and sampled surface clouds.

The chair model carries 6 keypoints (4 seat corners + 2 backrest top
corners), the table model 8 (4 tabletop corners + 4 leg feet). Model clouds
are sampled deterministically from rectangular surface patches so that the
same model bytes exist on sensors and backend without any file exchange.

Model files use a small YAML schema (see save_model/load_model):

    class_id: 62
    name: chair
    ground_offset: 0.0
    keypoints: [[x, y, z], ...]
    cloud: chair_cloud.txt        # relative path, one "x y z nx ny nz" per line
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
import yaml
from scipy.spatial import cKDTree

CHAIR_CLASS_ID = 62
TABLE_CLASS_ID = 60


@dataclass(frozen=True)
class ObjectModel:
    class_id: int
    name: str
    keypoints_obj: np.ndarray  # (L, 3) object frame
    model_cloud: np.ndarray  # (n, 3) object frame
    normals: np.ndarray  # (n, 3) outward surface normals
    ground_offset: float = 0.0  # z of the object origin above ground when resting

    def __post_init__(self):
        object.__setattr__(self, "keypoints_obj", np.asarray(self.keypoints_obj, float))
        object.__setattr__(self, "model_cloud", np.asarray(self.model_cloud, float))
        object.__setattr__(self, "normals", np.asarray(self.normals, float))
        if len(self.model_cloud) == 0:
            raise ValueError("model cloud must be non-empty")

    @property
    def num_keypoints(self) -> int:
        return len(self.keypoints_obj)

    @property
    def extent(self) -> np.ndarray:
        """Axis-aligned bounding box of the cloud, (2, 3): [min; max]."""
        return np.stack([self.model_cloud.min(axis=0), self.model_cloud.max(axis=0)])

    def kdtree(self) -> cKDTree:
        tree = getattr(self, "_tree", None)
        if tree is None:
            tree = cKDTree(self.model_cloud)
            object.__setattr__(self, "_tree", tree)
        return tree


def _sample_patch(origin, u_vec, v_vec, normal, spacing):
    """Grid-sample a rectangular patch spanned by u_vec/v_vec from origin."""
    origin = np.asarray(origin, float)
    u_vec = np.asarray(u_vec, float)
    v_vec = np.asarray(v_vec, float)
    nu = max(2, int(round(np.linalg.norm(u_vec) / spacing)) + 1)
    nv = max(2, int(round(np.linalg.norm(v_vec) / spacing)) + 1)
    su, sv = np.meshgrid(np.linspace(0, 1, nu), np.linspace(0, 1, nv), indexing="ij")
    pts = origin + su[..., None] * u_vec + sv[..., None] * v_vec
    pts = pts.reshape(-1, 3)
    n = np.asarray(normal, float)
    n = n / np.linalg.norm(n)
    return pts, np.tile(n, (len(pts), 1))


def _double_sided(origin, u_vec, v_vec, normal, spacing):
    """Zero-thickness panel sampled once per side (opposite normals)."""
    p1, n1 = _sample_patch(origin, u_vec, v_vec, normal, spacing)
    p2, n2 = _sample_patch(origin, u_vec, v_vec, -np.asarray(normal, float), spacing)
    return [(p1, n1), (p2, n2)]


def _box_sides(center_xy, half_x, half_y, z0, z1, spacing):
    """Four vertical side faces of an axis-aligned box (for legs)."""
    cx, cy = center_xy
    h = z1 - z0
    faces = []
    faces.append(_sample_patch([cx - half_x, cy - half_y, z0], [2 * half_x, 0, 0], [0, 0, h], [0, -1, 0], spacing))
    faces.append(_sample_patch([cx - half_x, cy + half_y, z0], [2 * half_x, 0, 0], [0, 0, h], [0, 1, 0], spacing))
    faces.append(_sample_patch([cx - half_x, cy - half_y, z0], [0, 2 * half_y, 0], [0, 0, h], [-1, 0, 0], spacing))
    faces.append(_sample_patch([cx + half_x, cy - half_y, z0], [0, 2 * half_y, 0], [0, 0, h], [1, 0, 0], spacing))
    return faces


def _assemble(parts):
    pts = np.concatenate([p for p, _ in parts])
    nrm = np.concatenate([n for _, n in parts])
    return pts, nrm


@lru_cache(maxsize=None)
def chair_model(spacing: float = 0.035) -> ObjectModel:
    """Generic office chair: 0.45 m square seat at 0.45 m, backrest to 0.90 m."""
    hw = 0.225  # half seat width
    seat_z = 0.45
    back_y = -hw
    top_z = 0.90
    leg_half = 0.02
    parts = []
    parts += _double_sided([-hw, -hw, seat_z], [2 * hw, 0, 0], [0, 2 * hw, 0], [0, 0, 1], spacing)
    parts += _double_sided(
        [-hw, back_y, seat_z], [2 * hw, 0, 0], [0, 0, top_z - seat_z], [0, -1, 0], spacing
    )
    leg_off = hw - leg_half
    for sx in (-1, 1):
        for sy in (-1, 1):
            parts += _box_sides((sx * leg_off, sy * leg_off), leg_half, leg_half, 0.0, seat_z, spacing)
    cloud, normals = _assemble(parts)
    keypoints = np.array(
        [
            [-hw, -hw, seat_z],
            [hw, -hw, seat_z],
            [hw, hw, seat_z],
            [-hw, hw, seat_z],
            [-hw, back_y, top_z],
            [hw, back_y, top_z],
        ]
    )
    return ObjectModel(CHAIR_CLASS_ID, "chair", keypoints, cloud, normals, ground_offset=0.0)


@lru_cache(maxsize=None)
def table_model(spacing: float = 0.045) -> ObjectModel:
    """Rectangular table: 1.2 x 0.8 m top at 0.75 m on four corner legs."""
    hx, hy = 0.60, 0.40
    top_z = 0.75
    leg_half = 0.025
    parts = []
    parts += _double_sided([-hx, -hy, top_z], [2 * hx, 0, 0], [0, 2 * hy, 0], [0, 0, 1], spacing)
    lx, ly = hx - leg_half, hy - leg_half
    for sx in (-1, 1):
        for sy in (-1, 1):
            parts += _box_sides((sx * lx, sy * ly), leg_half, leg_half, 0.0, top_z, spacing)
    cloud, normals = _assemble(parts)
    keypoints = np.array(
        [
            [-hx, -hy, top_z],
            [hx, -hy, top_z],
            [hx, hy, top_z],
            [-hx, hy, top_z],
            [-lx, -ly, 0.0],
            [lx, -ly, 0.0],
            [lx, ly, 0.0],
            [-lx, ly, 0.0],
        ]
    )
    return ObjectModel(TABLE_CLASS_ID, "table", keypoints, cloud, normals, ground_offset=0.0)


BUILTIN_MODELS = {"chair": chair_model, "table": table_model}


def builtin_model(name: str) -> ObjectModel:
    try:
        return BUILTIN_MODELS[name]()
    except KeyError:
        raise KeyError(f"unknown builtin model {name!r}; have {sorted(BUILTIN_MODELS)}") from None


def model_registry() -> dict[int, ObjectModel]:
    """class_id -> model for all builtin classes."""
    models = [builtin_model(name) for name in BUILTIN_MODELS]
    return {m.class_id: m for m in models}


def save_model(model: ObjectModel, path: str | Path) -> None:
    path = Path(path)
    cloud_path = path.with_suffix(".cloud.txt")
    lines = [
        f"{p[0]:.6f} {p[1]:.6f} {p[2]:.6f} {n[0]:.6f} {n[1]:.6f} {n[2]:.6f}"
        for p, n in zip(model.model_cloud, model.normals)
    ]
    cloud_path.write_text("\n".join(lines) + "\n")
    doc = {
        "class_id": int(model.class_id),
        "name": model.name,
        "ground_offset": float(model.ground_offset),
        "keypoints": [[float(v) for v in kp] for kp in model.keypoints_obj],
        "cloud": cloud_path.name,
    }
    path.write_text(yaml.safe_dump(doc, sort_keys=False))


def load_model(path: str | Path) -> ObjectModel:
    path = Path(path)
    doc = yaml.safe_load(path.read_text())
    data = np.loadtxt(path.parent / doc["cloud"], ndmin=2)
    return ObjectModel(
        class_id=int(doc["class_id"]),
        name=str(doc["name"]),
        keypoints_obj=np.asarray(doc["keypoints"], float),
        model_cloud=data[:, :3],
        normals=data[:, 3:6],
        ground_offset=float(doc["ground_offset"]),
    )

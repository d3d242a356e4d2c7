"""Synthetic ground-truth scene generation and JSON serialization.

A scene is a list of labeled 3D boxes inside a BEV grid plus a camera
rig. Generation is a pure function of (config, seed). Scene files use a
documented JSON schema; feature atlases are regenerated from scenes and
never serialized.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import BevGrid, Box3D, CameraModel, bev_iou, camera_facing


class SceneGenerationError(Exception):
    pass


SCENE_SCHEMA = "poidet-scene/1"

# class_id -> (w, l, h) sampling ranges; car-, van- and pedestrian-like
DEFAULT_CLASS_SIZES = (
    {"w": (1.8, 2.2), "l": (4.2, 5.0), "h": (1.5, 1.9)},
    {"w": (2.0, 2.6), "l": (5.5, 7.0), "h": (2.2, 2.8)},
    {"w": (0.6, 1.0), "l": (0.6, 1.0), "h": (1.6, 1.9)},
)


@dataclass
class SceneConfig:
    n_boxes: int = 5
    class_sizes: tuple = DEFAULT_CLASS_SIZES
    grid: BevGrid = field(default_factory=lambda: BevGrid(-24.0, -24.0, 24.0, 24.0,
                                                          0.125, 0.125, 8))
    n_cameras: int = 6
    image_size: tuple[int, int] = (160, 120)
    focal: float = 70.0
    camera_height: float = 1.6
    non_overlap: bool = True
    min_center_dist: float = 4.0
    max_retries: int = 200

    @property
    def num_classes(self) -> int:
        return len(self.class_sizes)


@dataclass
class Scene:
    boxes: list[tuple[Box3D, int]]
    rig: list[CameraModel]
    grid: BevGrid
    seed: int
    num_classes: int

    def gt_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        """(boxes [n,8], class_ids [n]) for loss/eval consumption."""
        if not self.boxes:
            return np.zeros((0, 8)), np.zeros(0, dtype=np.intp)
        params = np.stack([b.to_array() for b, _ in self.boxes])
        classes = np.array([c for _, c in self.boxes], dtype=np.intp)
        return params, classes


def make_rig(cfg: SceneConfig) -> list[CameraModel]:
    """Evenly spaced surround cameras at the configured height."""
    w, h = cfg.image_size
    intr = np.array([[cfg.focal, 0.0, w / 2.0],
                     [0.0, cfg.focal, h / 2.0],
                     [0.0, 0.0, 1.0]])
    rig = []
    for i in range(cfg.n_cameras):
        yaw = 2.0 * math.pi * i / cfg.n_cameras
        rig.append(camera_facing(yaw, [0.0, 0.0, cfg.camera_height],
                                 intr, cfg.image_size))
    return rig


def generate_scene(cfg: SceneConfig, seed: int) -> Scene:
    """Sample boxes uniformly in the grid; deterministic in (cfg, seed)."""
    if cfg.n_boxes < 0 or cfg.num_classes < 1:
        raise SceneGenerationError("need n_boxes >= 0 and at least one class")
    rng = np.random.default_rng(seed)
    grid = cfg.grid
    boxes: list[tuple[Box3D, int]] = []
    for _ in range(cfg.n_boxes):
        placed = False
        for _attempt in range(cfg.max_retries):
            class_id = int(rng.integers(cfg.num_classes))
            sizes = cfg.class_sizes[class_id]
            w = float(rng.uniform(*sizes["w"]))
            length = float(rng.uniform(*sizes["l"]))
            h = float(rng.uniform(*sizes["h"]))
            margin = max(w, length, h) / 2.0
            x = float(rng.uniform(grid.x_min + margin, grid.x_max - margin))
            y = float(rng.uniform(grid.y_min + margin, grid.y_max - margin))
            z = h / 2.0 + float(rng.uniform(-0.3, 0.3))
            theta = float(rng.uniform(-math.pi, math.pi))
            cand = Box3D(x, y, z, w, length, h, math.sin(theta), math.cos(theta))
            if cfg.non_overlap and not _placement_ok(cand, boxes, cfg.min_center_dist):
                continue
            boxes.append((cand, class_id))
            placed = True
            break
        if not placed:
            raise SceneGenerationError(
                f"could not place box {len(boxes)} after {cfg.max_retries} retries")
    return Scene(boxes=boxes, rig=make_rig(cfg), grid=grid, seed=seed,
                 num_classes=cfg.num_classes)


def _placement_ok(cand: Box3D, placed: list[tuple[Box3D, int]],
                  min_center_dist: float) -> bool:
    for other, _ in placed:
        dx = cand.x_c - other.x_c
        dy = cand.y_c - other.y_c
        if math.hypot(dx, dy) < min_center_dist:
            return False
        if bev_iou(cand, other) > 0.0:
            return False
    return True


def scene_to_dict(scene: Scene) -> dict:
    return {
        "schema": SCENE_SCHEMA,
        "seed": scene.seed,
        "num_classes": scene.num_classes,
        "grid": {
            "x_min": scene.grid.x_min, "y_min": scene.grid.y_min,
            "x_max": scene.grid.x_max, "y_max": scene.grid.y_max,
            "voxel_x": scene.grid.voxel_x, "voxel_y": scene.grid.voxel_y,
            "downsample": scene.grid.downsample,
        },
        "boxes": [{"class_id": cid, "params": box.to_array().tolist()}
                  for box, cid in scene.boxes],
        "cameras": [{
            "intrinsics": cam.intrinsics.reshape(-1).tolist(),
            "rotation": cam.rotation.reshape(-1).tolist(),
            "translation": cam.translation.tolist(),
            "image_size": list(cam.image_size),
        } for cam in scene.rig],
    }


def scene_from_dict(d: dict) -> Scene:
    if d.get("schema") != SCENE_SCHEMA:
        raise SceneGenerationError(f"unsupported scene schema: {d.get('schema')!r}")
    g = d["grid"]
    grid = BevGrid(g["x_min"], g["y_min"], g["x_max"], g["y_max"],
                   g["voxel_x"], g["voxel_y"], g["downsample"])
    boxes = [(Box3D.from_array(b["params"]), int(b["class_id"]))
             for b in d["boxes"]]
    rig = [CameraModel(intrinsics=np.array(c["intrinsics"]).reshape(3, 3),
                       rotation=np.array(c["rotation"]).reshape(3, 3),
                       translation=np.array(c["translation"]),
                       image_size=tuple(c["image_size"]))
           for c in d["cameras"]]
    return Scene(boxes=boxes, rig=rig, grid=grid, seed=int(d["seed"]),
                 num_classes=int(d["num_classes"]))


def dump_scene(scene: Scene) -> str:
    return json.dumps(scene_to_dict(scene), sort_keys=True, indent=1)


def load_scene(path) -> Scene:
    with open(path, "r", encoding="utf-8") as fh:
        return scene_from_dict(json.load(fh))

"""Analytic oracle feature maps standing in for learned backbones.

Low-dimensional analytic fields (clamped signed distance to the nearest
box boundary, truncated Gaussian class bumps at box centers, coordinate
ramps, bump-weighted box attributes) are rendered on the BEV grid and,
per camera, on each pyramid level; a fixed seeded linear lift maps them
to the full channel count. The fields are local by construction: a box
influences the BEV map only within `influence_radius` of itself, which
keeps the detection task information-complete while staying analytic.

Corruptions implement the robustness protocols: random calibration
translation offsets, camera blackout (zero-filled pyramids), and
azimuthal LiDAR sector drop (zero-filled BEV cells).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import BevGrid, CameraModel, project_camera
from .scenes import Scene

# pyramid strides for levels P2..P5
STRIDES = (4, 8, 16, 32)

SDF_SATURATION = 8.0   # meters; signed distance is clamped to +-this
BUMP_SIGMA = 1.2       # meters; Gaussian bump scale at box centers
BUMP_TRUNCATION = 4.0  # bumps are exactly zero beyond this many sigmas
N_ATTR_FIELDS = 5      # w, l, h, sin, cos
DIM_SCALE = 5.0        # meters; box dimensions are stored divided by this
DEFAULT_LIFT_SEED = 7


class CorruptionError(Exception):
    pass


@dataclass
class FeatureAtlas:
    """One BEV feature grid plus a 4-level pyramid per camera."""

    bev: np.ndarray                      # [C, ny, nx]
    images: list[list[np.ndarray]]       # per camera, per level [C, h, w]
    channels: int

    def level_sizes(self, cam_index: int) -> list[tuple[int, int]]:
        return [(m.shape[2], m.shape[1]) for m in self.images[cam_index]]


def pyramid_sizes(image_size: tuple[int, int]) -> list[tuple[int, int]]:
    """(w, h) per level: P2 is size/4, each further level halves, rounding up."""
    w = math.ceil(image_size[0] / STRIDES[0])
    h = math.ceil(image_size[1] / STRIDES[0])
    sizes = [(w, h)]
    for _ in STRIDES[1:]:
        w = math.ceil(w / 2)
        h = math.ceil(h / 2)
        sizes.append((w, h))
    return sizes


def influence_radius() -> float:
    """Max distance at which a single box can alter the BEV fields."""
    return max(SDF_SATURATION, BUMP_TRUNCATION * BUMP_SIGMA)


def bev_field_count(num_classes: int) -> int:
    # sdf, x ramp, y ramp, per-class bumps, attribute fields
    return 3 + num_classes + N_ATTR_FIELDS


def image_field_count(num_classes: int) -> int:
    # occupancy, u ramp, v ramp, per-class bumps, attrs + center xyz
    return 3 + num_classes + N_ATTR_FIELDS + 3


def lift_matrix(n_fields: int, channels: int, seed: int) -> np.ndarray:
    """Fixed random lift [channels, n_fields]; injective for channels >= fields."""
    rng = np.random.default_rng(seed)
    return rng.normal(0.0, 1.0 / math.sqrt(n_fields), size=(channels, n_fields))


def _box_attr_rows(scene: Scene) -> np.ndarray:
    """Per box: [x, y, z, w, l, h, sin, cos]; heading normalized, dims scaled.

    Every stored field stays O(1) so no single field dominates the
    random channel lift.
    """
    rows = []
    for box, _cid in scene.boxes:
        norm = math.hypot(box.sin_theta, box.cos_theta)
        rows.append([box.x_c, box.y_c, box.z_c,
                     box.w / DIM_SCALE, box.l / DIM_SCALE, box.h / DIM_SCALE,
                     box.sin_theta / norm, box.cos_theta / norm])
    return np.array(rows) if rows else np.zeros((0, 8))


def bev_fields(scene: Scene) -> np.ndarray:
    """Analytic fields on the BEV grid, shape [F, ny, nx]."""
    grid = scene.grid
    xs, ys = grid.cell_centers()
    gx, gy = np.meshgrid(xs, ys)  # [ny, nx]
    nc = scene.num_classes
    fields = np.zeros((bev_field_count(nc), grid.ny, grid.nx))

    attrs = _box_attr_rows(scene)
    sdf = np.full_like(gx, SDF_SATURATION)
    trunc = BUMP_TRUNCATION * BUMP_SIGMA
    for (box, cid), row in zip(scene.boxes, attrs):
        theta = math.atan2(row[6], row[7])
        dx = gx - box.x_c
        dy = gy - box.y_c
        lx = dx * math.cos(theta) + dy * math.sin(theta)
        ly = -dx * math.sin(theta) + dy * math.cos(theta)
        qx = np.abs(lx) - box.l / 2.0
        qy = np.abs(ly) - box.w / 2.0
        outside = np.hypot(np.maximum(qx, 0.0), np.maximum(qy, 0.0))
        inside = np.minimum(np.maximum(qx, qy), 0.0)
        sdf = np.minimum(sdf, outside + inside)

        d2 = dx * dx + dy * dy
        bump = np.where(d2 <= trunc * trunc,
                        np.exp(-d2 / (2.0 * BUMP_SIGMA ** 2)), 0.0)
        fields[3 + cid] += bump
        for k in range(N_ATTR_FIELDS):
            fields[3 + nc + k] += bump * row[3 + k]

    fields[0] = np.clip(sdf, -SDF_SATURATION, SDF_SATURATION) / SDF_SATURATION
    # coordinate ramps normalized by the half-range; metric coordinates
    # are half_range * field
    fields[1] = gx / _half_range_x(grid)
    fields[2] = gy / _half_range_y(grid)
    return fields


def _half_range_x(grid: BevGrid) -> float:
    return (grid.x_max - grid.x_min) / 2.0


def _half_range_y(grid: BevGrid) -> float:
    return (grid.y_max - grid.y_min) / 2.0


def image_fields(scene: Scene, cam: CameraModel) -> list[np.ndarray]:
    """Analytic fields rendered per pyramid level, each [F, h, w].

    Level-j pixel (r, c) represents full-resolution position
    (c * stride_j, r * stride_j), matching the decoder's sampling at
    (u, v) / stride with integer cell centers.
    """
    nc = scene.num_classes
    nf = image_field_count(nc)
    w_full, h_full = cam.image_size
    attrs = _box_attr_rows(scene)
    projected = []
    for (box, cid), row in zip(scene.boxes, attrs):
        uvd = project_camera(box.center, cam)
        if uvd is not None:
            projected.append((uvd, row, cid))
    levels = []
    for stride, (w, h) in zip(STRIDES, pyramid_sizes(cam.image_size)):
        cc, rr = np.meshgrid(np.arange(w, dtype=np.float64) * stride,
                             np.arange(h, dtype=np.float64) * stride)
        fields = np.zeros((nf, h, w))
        fields[1] = cc / w_full
        fields[2] = rr / h_full
        for (u, v, depth), row, cid in projected:
            sigma_px = min(max(cam.fx * BUMP_SIGMA / depth, 0.75), 50.0)
            trunc = BUMP_TRUNCATION * sigma_px
            d2 = (cc - u) ** 2 + (rr - v) ** 2
            bump = np.where(d2 <= trunc * trunc,
                            np.exp(-d2 / (2.0 * sigma_px ** 2)), 0.0)
            fields[0] += bump
            fields[3 + cid] += bump
            for k in range(N_ATTR_FIELDS):
                fields[3 + nc + k] += bump * row[3 + k]
            # bump-weighted metric center, normalized like the BEV ramps
            center_scale = (_half_range_x(scene.grid), _half_range_y(scene.grid),
                            DIM_SCALE)
            for k in range(3):
                fields[3 + nc + N_ATTR_FIELDS + k] += bump * row[k] / center_scale[k]
        levels.append(fields)
    return levels


def encode_oracle_features(scene: Scene, channels: int = 256,
                           lift_seed: int = DEFAULT_LIFT_SEED) -> FeatureAtlas:
    """Deterministic analytic encoding of a scene into a feature atlas."""
    nc = scene.num_classes
    bev_lift = lift_matrix(bev_field_count(nc), channels, lift_seed)
    img_lift = lift_matrix(image_field_count(nc), channels, lift_seed + 1)

    bf = bev_fields(scene)
    bev = np.tensordot(bev_lift, bf, axes=([1], [0]))

    images = []
    for cam in scene.rig:
        levels = [np.tensordot(img_lift, f, axes=([1], [0]))
                  for f in image_fields(scene, cam)]
        images.append(levels)
    return FeatureAtlas(bev=bev, images=images, channels=channels)


def invert_bev_lift(atlas: FeatureAtlas, num_classes: int,
                    lift_seed: int = DEFAULT_LIFT_SEED) -> np.ndarray:
    """Recover the low-dim BEV fields by pseudo-inverting the lift."""
    lift = lift_matrix(bev_field_count(num_classes), atlas.channels, lift_seed)
    pinv = np.linalg.pinv(lift)
    return np.tensordot(pinv, atlas.bev, axes=([1], [0]))


@dataclass
class Corruption:
    """One robustness-protocol corruption.

    kinds: calib_offset (uniform translation noise, sup-norm bounded by
    max_offset), camera_drop (zero-fill listed cameras' pyramids),
    lidar_sector (zero-fill BEV cells by azimuth from the origin).
    """

    kind: str
    max_offset: float = 0.0
    cameras: tuple[int, ...] = field(default_factory=tuple)
    center_deg: float = 0.0
    width_deg: float = 0.0
    seed: int = 0

    KINDS = ("calib_offset", "camera_drop", "lidar_sector")

    def __post_init__(self) -> None:
        if self.kind not in self.KINDS:
            raise CorruptionError(f"unknown corruption kind {self.kind!r}")
        if self.max_offset < 0:
            raise CorruptionError("max_offset must be >= 0")
        if not (0.0 <= self.width_deg < 360.0):
            raise CorruptionError("width_deg must be in [0, 360)")


def apply_corruption(scene: Scene, atlas: FeatureAtlas,
                     corruption: Corruption) -> tuple[Scene, FeatureAtlas]:
    """Return (scene', atlas'); inputs are never mutated."""
    if corruption.kind == "calib_offset":
        rng = np.random.default_rng(corruption.seed)
        rig = []
        for cam in scene.rig:
            offset = rng.uniform(-corruption.max_offset, corruption.max_offset, 3)
            rig.append(CameraModel(intrinsics=cam.intrinsics,
                                   rotation=cam.rotation,
                                   translation=cam.translation + offset,
                                   image_size=cam.image_size))
        return replace(scene, rig=rig), atlas

    if corruption.kind == "camera_drop":
        images = []
        for i, levels in enumerate(atlas.images):
            if i in corruption.cameras:
                images.append([np.zeros_like(m) for m in levels])
            else:
                images.append(levels)
        return scene, FeatureAtlas(bev=atlas.bev, images=images,
                                   channels=atlas.channels)

    # lidar_sector
    mask = sector_mask(scene.grid, corruption.center_deg, corruption.width_deg)
    bev = atlas.bev.copy()
    bev[:, mask] = 0.0
    return scene, FeatureAtlas(bev=bev, images=atlas.images,
                               channels=atlas.channels)


def sector_mask(grid: BevGrid, center_deg: float, width_deg: float) -> np.ndarray:
    """[ny, nx] bool: cell centers whose azimuth lies in the sector."""
    xs, ys = grid.cell_centers()
    gx, gy = np.meshgrid(xs, ys)
    azimuth = np.degrees(np.arctan2(gy, gx)) % 360.0
    delta = (azimuth - center_deg + 180.0) % 360.0 - 180.0
    return np.abs(delta) <= width_deg / 2.0

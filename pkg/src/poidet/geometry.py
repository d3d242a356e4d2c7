"""3D box algebra and projection onto the BEV grid and camera image planes.

Conventions:
  - Heading theta is measured in the BEV plane from +x toward +y
    (right-handed about +z). A box stores (sin_theta, cos_theta), which
    need not be normalized; heading extraction uses atan2.
  - Corner order is canonical: local offsets (sx, sy, sz) over the box
    axes (l along heading, w lateral, h vertical), sign bits enumerated
    sz-major, then sy, then sx, with "-" before "+".
  - BEV feature coordinates: m indexes x (columns), n indexes y (rows).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


class GeometryError(Exception):
    pass


class DegenerateHeadingError(GeometryError):
    """(sin, cos) == (0, 0): heading undefined."""


# canonical sign pattern for the 8 corners: rows are (sx, sy, sz),
# sz-major, then sy, then sx
CORNER_SIGNS = np.array([
    [-1, -1, -1],
    [+1, -1, -1],
    [-1, +1, -1],
    [+1, +1, -1],
    [-1, -1, +1],
    [+1, -1, +1],
    [-1, +1, +1],
    [+1, +1, +1],
], dtype=np.float64)

Z_NEAR = 0.1  # meters; points closer to the image plane are not projected


@dataclass
class Box3D:
    """Upright 3D box: center (m), dimensions (m), heading as (sin, cos)."""

    x_c: float
    y_c: float
    z_c: float
    w: float
    l: float
    h: float
    sin_theta: float
    cos_theta: float

    def __post_init__(self) -> None:
        if not (self.w > 0 and self.l > 0 and self.h > 0):
            raise GeometryError(f"box dimensions must be positive, got "
                                f"({self.w}, {self.l}, {self.h})")

    @property
    def center(self) -> np.ndarray:
        return np.array([self.x_c, self.y_c, self.z_c])

    @property
    def theta(self) -> float:
        if self.sin_theta == 0.0 and self.cos_theta == 0.0:
            raise DegenerateHeadingError("(sin, cos) = (0, 0)")
        return math.atan2(self.sin_theta, self.cos_theta)

    def to_array(self) -> np.ndarray:
        return np.array([self.x_c, self.y_c, self.z_c, self.w, self.l,
                         self.h, self.sin_theta, self.cos_theta])

    @classmethod
    def from_array(cls, a) -> "Box3D":
        a = np.asarray(a, dtype=np.float64)
        return cls(*a.tolist())


def box_corners(box: Box3D) -> np.ndarray:
    """The 8 corners [8,3] in canonical order (meters, global frame)."""
    norm = math.hypot(box.sin_theta, box.cos_theta)
    if norm == 0.0:
        raise DegenerateHeadingError("cannot extract corners: (sin, cos) = (0, 0)")
    c = box.cos_theta / norm
    s = box.sin_theta / norm
    half = np.array([box.l / 2.0, box.w / 2.0, box.h / 2.0])
    local = CORNER_SIGNS * half  # [8,3]: x along heading, y lateral, z up
    out = np.empty_like(local)
    out[:, 0] = box.x_c + c * local[:, 0] - s * local[:, 1]
    out[:, 1] = box.y_c + s * local[:, 0] + c * local[:, 1]
    out[:, 2] = box.z_c + local[:, 2]
    return out


def box_bev_polygon(box: Box3D) -> np.ndarray:
    """BEV footprint [4,2] in counter-clockwise order."""
    corners = box_corners(box)[:4, :2]  # bottom face, canonical order
    return corners[[0, 1, 3, 2]]


@dataclass
class BevGrid:
    """Metric range and resolution of the BEV feature map."""

    x_min: float
    y_min: float
    x_max: float
    y_max: float
    voxel_x: float
    voxel_y: float
    downsample: int = 8

    def __post_init__(self) -> None:
        if not (self.x_max > self.x_min and self.y_max > self.y_min):
            raise GeometryError("grid range must be non-empty")
        if self.voxel_x <= 0 or self.voxel_y <= 0 or self.downsample < 1:
            raise GeometryError("voxel size and downsample must be positive")
        for name, extent in (("x", self.nx_float), ("y", self.ny_float)):
            if abs(extent - round(extent)) > 1e-9:
                raise GeometryError(
                    f"{name} range / (voxel * downsample) = {extent} is not integral")

    @property
    def cell_x(self) -> float:
        return self.voxel_x * self.downsample

    @property
    def cell_y(self) -> float:
        return self.voxel_y * self.downsample

    @property
    def nx_float(self) -> float:
        return (self.x_max - self.x_min) / self.cell_x

    @property
    def ny_float(self) -> float:
        return (self.y_max - self.y_min) / self.cell_y

    @property
    def nx(self) -> int:
        return int(round(self.nx_float))

    @property
    def ny(self) -> int:
        return int(round(self.ny_float))

    def cell_centers(self) -> tuple[np.ndarray, np.ndarray]:
        """Metric (x, y) of cell centers, shapes [nx] and [ny]."""
        xs = self.x_min + (np.arange(self.nx) + 0.5) * self.cell_x
        ys = self.y_min + (np.arange(self.ny) + 0.5) * self.cell_y
        return xs, ys


def project_bev(points, grid: BevGrid) -> np.ndarray:
    """Continuous BEV feature coordinates (m, n) for points [..., >=2].

    m = (x - x_min) / (voxel_x * d), n likewise in y. Out-of-range points
    simply land outside the map; the sampling layer zero-pads.
    """
    p = np.asarray(points, dtype=np.float64)
    m = (p[..., 0] - grid.x_min) / grid.cell_x
    n = (p[..., 1] - grid.y_min) / grid.cell_y
    return np.stack([m, n], axis=-1)


def bev_to_metric(mn, grid: BevGrid) -> np.ndarray:
    """Inverse of project_bev: feature coordinates back to meters."""
    mn = np.asarray(mn, dtype=np.float64)
    x = grid.x_min + mn[..., 0] * grid.cell_x
    y = grid.y_min + mn[..., 1] * grid.cell_y
    return np.stack([x, y], axis=-1)


@dataclass
class CameraModel:
    """Pinhole camera: intrinsics plus LiDAR-to-camera extrinsics."""

    intrinsics: np.ndarray  # 3x3, zero skew
    rotation: np.ndarray    # 3x3, LiDAR -> camera
    translation: np.ndarray  # 3, meters
    image_size: tuple[int, int]  # (width, height) pixels

    def __post_init__(self) -> None:
        self.intrinsics = np.asarray(self.intrinsics, dtype=np.float64)
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.translation = np.asarray(self.translation, dtype=np.float64)
        if self.intrinsics.shape != (3, 3) or self.rotation.shape != (3, 3):
            raise GeometryError("intrinsics and rotation must be 3x3")
        if self.fx <= 0 or self.fy <= 0:
            raise GeometryError("focal lengths must be positive")
        err = np.abs(self.rotation @ self.rotation.T - np.eye(3)).max()
        if err > 1e-9 or abs(np.linalg.det(self.rotation) - 1.0) > 1e-9:
            raise GeometryError("rotation must be orthonormal with det +1")

    @property
    def fx(self) -> float:
        return float(self.intrinsics[0, 0])

    @property
    def fy(self) -> float:
        return float(self.intrinsics[1, 1])

    @property
    def cx(self) -> float:
        return float(self.intrinsics[0, 2])

    @property
    def cy(self) -> float:
        return float(self.intrinsics[1, 2])


def project_camera(point, cam: CameraModel) -> tuple[float, float, float] | None:
    """Project one 3D point; None if behind the near plane or off-frame.

    Returns (u, v, depth) pixels/meters. The homogeneous divide by depth
    is applied after q = R p + T.
    """
    q = cam.rotation @ np.asarray(point, dtype=np.float64) + cam.translation
    depth = float(q[2])
    if depth <= Z_NEAR:
        return None
    u = cam.fx * q[0] / depth + cam.cx
    v = cam.fy * q[1] / depth + cam.cy
    w, h = cam.image_size
    if not (0.0 <= u <= w and 0.0 <= v <= h):
        return None
    return float(u), float(v), depth


def project_camera_batch(points: np.ndarray, cam: CameraModel
                         ) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized projection of [P,3] points -> ((u, v, depth) [P,3], valid [P])."""
    q = points @ cam.rotation.T + cam.translation
    depth = q[:, 2]
    safe = np.where(depth > Z_NEAR, depth, 1.0)
    u = cam.fx * q[:, 0] / safe + cam.cx
    v = cam.fy * q[:, 1] / safe + cam.cy
    w, h = cam.image_size
    valid = (depth > Z_NEAR) & (u >= 0.0) & (u <= w) & (v >= 0.0) & (v <= h)
    return np.stack([u, v, depth], axis=1), valid


def visible_views(point, rig: list[CameraModel]) -> list[int]:
    """Indices of cameras (in rig order) where the point projects in-frame."""
    return [i for i, cam in enumerate(rig) if project_camera(point, cam) is not None]


def visibility_matrix(points: np.ndarray, rig: list[CameraModel]) -> np.ndarray:
    """Boolean [P, n_cams] visibility, vectorized across points."""
    cols = [project_camera_batch(points, cam)[1] for cam in rig]
    if not cols:
        return np.zeros((points.shape[0], 0), dtype=bool)
    return np.stack(cols, axis=1)


def camera_facing(yaw: float, position, intrinsics: np.ndarray,
                  image_size: tuple[int, int]) -> CameraModel:
    """Camera at `position` looking along `yaw` in the BEV plane, up = +z.

    Camera axes: +x right, +y down, +z forward. The extrinsics map LiDAR
    coordinates into this frame.
    """
    pos = np.asarray(position, dtype=np.float64)
    forward = np.array([math.cos(yaw), math.sin(yaw), 0.0])
    right = np.array([math.sin(yaw), -math.cos(yaw), 0.0])
    down = np.array([0.0, 0.0, -1.0])
    rot = np.stack([right, down, forward])
    return CameraModel(intrinsics=np.asarray(intrinsics, dtype=np.float64),
                       rotation=rot, translation=-rot @ pos,
                       image_size=image_size)


def bev_iou(a: Box3D, b: Box3D) -> float:
    """Exact BEV IoU of two rotated rectangles (Sutherland-Hodgman clipping)."""
    pa = box_bev_polygon(a)
    pb = box_bev_polygon(b)
    inter = _clip_polygon(pa, pb)
    if inter.shape[0] < 3:
        return 0.0
    ai = _polygon_area(inter)
    union = _polygon_area(pa) + _polygon_area(pb) - ai
    return ai / union if union > 0 else 0.0


def _polygon_area(poly: np.ndarray) -> float:
    x = poly[:, 0]
    y = poly[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def _clip_polygon(subject: np.ndarray, clip: np.ndarray) -> np.ndarray:
    """Clip a convex `subject` polygon by convex CCW `clip` polygon."""
    output = [tuple(p) for p in subject]
    n = clip.shape[0]
    for i in range(n):
        a = clip[i]
        b = clip[(i + 1) % n]
        edge = (b[0] - a[0], b[1] - a[1])
        inputs, output = output, []
        if not inputs:
            break
        for j, cur in enumerate(inputs):
            prev = inputs[j - 1]
            cur_in = edge[0] * (cur[1] - a[1]) - edge[1] * (cur[0] - a[0]) >= 0
            prev_in = edge[0] * (prev[1] - a[1]) - edge[1] * (prev[0] - a[0]) >= 0
            if cur_in:
                if not prev_in:
                    output.append(_intersect(prev, cur, a, b))
                output.append(cur)
            elif prev_in:
                output.append(_intersect(prev, cur, a, b))
    return np.array(output) if output else np.zeros((0, 2))


def _intersect(p1, p2, a, b) -> tuple[float, float]:
    x1, y1 = p1
    x2, y2 = p2
    x3, y3 = a[0], a[1]
    x4, y4 = b[0], b[1]
    den = (x1 - x2) * (y3 - y4) - (y1 - y2) * (x3 - x4)
    t = ((x1 - x3) * (y3 - y4) - (y1 - y3) * (x3 - x4)) / den
    return (x1 + t * (x2 - x1), y1 + t * (y2 - y1))

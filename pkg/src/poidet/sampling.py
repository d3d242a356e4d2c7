"""Multi-modal feature sampling at PoIs.

BEV branch: project metric coordinates onto the feature grid and
bilinear-sample the group's channel slice. Image branch: pick one camera
per PoI (seeded-uniform among visible views, or lowest index in
deterministic mode), project through the pinhole model, sample all four
pyramid levels and blend them with softmax weights predicted from the
query feature. PoIs invisible in every view yield a zero vector, the
same zero-padding contract the BEV branch uses out of range.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .geometry import BevGrid, CameraModel, visibility_matrix
from .oracle import STRIDES, FeatureAtlas
from .seeding import choice_uniform


@dataclass
class SampledPair:
    """Per-PoI modality features for one channel group, each [P, C_g]."""

    f_bev: Tensor
    f_img: Tensor


def group_slice(array: np.ndarray, group: int, groups: int) -> np.ndarray:
    c = array.shape[0]
    if c % groups != 0:
        raise ad.ShapeError(f"channels {c} not divisible into {groups} groups")
    cg = c // groups
    return array[group * cg:(group + 1) * cg]


def bev_coords(pois: Tensor, grid: BevGrid) -> Tensor:
    """Continuous (m, n) feature coordinates from PoIs [P, 3]."""
    xy = ad.narrow(pois, 1, 0, 2)
    shifted = ad.add_row(xy, Tensor([-grid.x_min, -grid.y_min]))
    p = pois.shape[0]
    scale = np.broadcast_to([1.0 / grid.cell_x, 1.0 / grid.cell_y], (p, 2))
    return ad.mul(shifted, Tensor(scale.copy()))


def sample_bev(pois: Tensor, bev: np.ndarray, grid: BevGrid,
               group: int, groups: int) -> Tensor:
    """[P, C_g] bilinear BEV samples of the group's channel slice."""
    coords = bev_coords(pois, grid)
    return ad.grid_sample(Tensor(group_slice(bev, group, groups)), coords)


def choose_views(pois_np: np.ndarray, rig: list[CameraModel],
                 deterministic: bool, seed_keys: np.ndarray | None) -> np.ndarray:
    """Per-PoI camera index, -1 where no view sees the point."""
    vis = visibility_matrix(pois_np, rig)
    p, n_cams = vis.shape
    choice = np.full(p, -1, dtype=np.intp)
    if n_cams == 0:
        return choice
    n_vis = vis.sum(axis=1)
    any_vis = n_vis > 0
    if deterministic:
        choice[any_vis] = np.argmax(vis[any_vis], axis=1)
        return choice
    if seed_keys is None:
        raise ValueError("seeded view selection needs seed keys")
    kth = choice_uniform(seed_keys, n_vis)  # k-th visible view per PoI
    count = np.zeros(p, dtype=np.intp)
    for cam in range(n_cams):
        hit = vis[:, cam] & (count == kth) & (choice < 0)
        choice[hit] = cam
        count += vis[:, cam]
    choice[~any_vis] = -1
    return choice


def camera_uv(pois: Tensor, cam: CameraModel) -> Tensor:
    """Differentiable pinhole projection of [P, 3] points -> [P, 2] pixels.

    Caller guarantees all points are in front of the near plane.
    """
    p = pois.shape[0]
    q = ad.add_row(ad.matmul(pois, Tensor(cam.rotation.T.copy())),
                   Tensor(cam.translation))
    depth = ad.narrow(q, 1, 2, 1)
    xy = ad.narrow(q, 1, 0, 2)
    rays = ad.div(xy, ad.concat([depth, depth], axis=1))
    focal = np.broadcast_to([cam.fx, cam.fy], (p, 2))
    return ad.add_row(ad.mul(rays, Tensor(focal.copy())),
                      Tensor([cam.cx, cam.cy]))


def sample_image(pois: Tensor, atlas: FeatureAtlas, rig: list[CameraModel],
                 scale_weights: Tensor, group: int, groups: int,
                 deterministic: bool = False,
                 seed_keys: np.ndarray | None = None) -> Tensor:
    """[P, C_g] multi-scale image samples, softmax-blended across levels.

    `scale_weights` is [P, 4] softmax weights aligned row-for-row with
    the PoIs (already expanded from per-query or per-anchor logits).
    """
    p = pois.shape[0]
    cg = atlas.channels // groups
    choice = choose_views(pois.data, rig, deterministic, seed_keys)

    parts = [Tensor(np.zeros((1, cg)))]  # row 0: the invisible-PoI zero vector
    mapping = np.zeros(p, dtype=np.intp)
    offset = 1
    for cam_idx, cam in enumerate(rig):
        rows = np.nonzero(choice == cam_idx)[0]
        if rows.size == 0:
            continue
        sub = ad.index_rows(pois, rows)
        uv = camera_uv(sub, cam)
        w_rows = ad.index_rows(scale_weights, rows)
        blended = None
        for level, stride in enumerate(STRIDES):
            level_map = group_slice(atlas.images[cam_idx][level], group, groups)
            sampled = ad.grid_sample(Tensor(level_map),
                                     ad.mul(uv, 1.0 / stride))
            weighted = ad.scale_rows(
                sampled, ad.reshape(ad.narrow(w_rows, 1, level, 1), (rows.size,)))
            blended = weighted if blended is None else ad.add(blended, weighted)
        parts.append(blended)
        mapping[rows] = offset + np.arange(rows.size)
        offset += rows.size
    if len(parts) == 1:
        return Tensor(np.zeros((p, cg)))
    return ad.index_rows(ad.concat(parts, axis=0), mapping)


def scale_weight_rows(logits: Tensor, n_queries: int, n_anchors: int,
                      per_poi: bool) -> Tensor:
    """Softmax scale weights expanded to one row per PoI, [n*A, 4].

    Per-query mode shares the 4 logits across a query's PoIs; per-PoI
    mode gives each anchor index its own 4 logits.
    """
    n_levels = len(STRIDES)
    if per_poi:
        sm = ad.softmax(ad.reshape(logits, (n_queries * n_anchors, n_levels)),
                        axis=-1)
        return sm
    sm = ad.softmax(logits, axis=-1)
    return ad.index_rows(sm, np.repeat(np.arange(n_queries), n_anchors))


def sample_pair(pois: Tensor, atlas: FeatureAtlas, rig: list[CameraModel],
                grid: BevGrid, scale_weights: Tensor, group: int, groups: int,
                deterministic: bool = False,
                seed_keys: np.ndarray | None = None) -> SampledPair:
    """Bundle of (BEV, image) samples for one group of channels."""
    return SampledPair(
        f_bev=sample_bev(pois, atlas.bev, grid, group, groups),
        f_img=sample_image(pois, atlas, rig, scale_weights, group, groups,
                           deterministic=deterministic, seed_keys=seed_keys))

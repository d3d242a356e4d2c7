"""Point-of-interest generation: box-wise transform plus point-wise shifts.

Each query emits a holistic box transform (8 values) and per-group,
per-anchor 3D shifts from two sibling linear heads on the query feature.
Anchors are the center and 8 corners of the (optionally transformed)
box; PoIs are anchors plus shifts. The box transform is shared across
channel groups by default; the shifts are always per-group.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .geometry import CORNER_SIGNS, DegenerateHeadingError


class PoiMode(Enum):
    """Ablation switches for PoI derivation.

    CENTER_ONLY keeps the full transform+shift pipeline but anchors on
    the box center alone; ANCHORS_ONLY is the untransformed baseline;
    BOX_TRANSFORM adds the holistic transform; BOX_TRANSFORM_SHIFT (the
    default) adds the per-point shifts on top.
    """

    CENTER_ONLY = "center_only"
    ANCHORS_ONLY = "anchors_only"
    BOX_TRANSFORM = "box_transform"
    BOX_TRANSFORM_SHIFT = "box_transform_and_shift"

    @property
    def n_anchors(self) -> int:
        return 1 if self is PoiMode.CENTER_ONLY else 9

    @property
    def use_box_transform(self) -> bool:
        return self in (PoiMode.CENTER_ONLY, PoiMode.BOX_TRANSFORM,
                        PoiMode.BOX_TRANSFORM_SHIFT)

    @property
    def use_point_shift(self) -> bool:
        return self in (PoiMode.CENTER_ONLY, PoiMode.BOX_TRANSFORM_SHIFT)


@dataclass
class PoiHeads:
    """Sibling linear heads on the query feature (zero-initialized)."""

    box_w: Tensor    # [C, 8] or [C, G*8] when per-group transforms are on
    box_b: Tensor
    shift_w: Tensor  # [C, G * A * 3]
    shift_b: Tensor
    groups: int
    mode: PoiMode
    per_group_box: bool = False


def make_poi_heads(channels: int, groups: int, mode: PoiMode,
                   per_group_box: bool = False) -> PoiHeads:
    box_out = 8 * (groups if per_group_box else 1)
    shift_out = groups * mode.n_anchors * 3
    return PoiHeads(
        box_w=ad.param(np.zeros((channels, box_out))),
        box_b=ad.param(np.zeros(box_out)),
        shift_w=ad.param(np.zeros((channels, shift_out))),
        shift_b=ad.param(np.zeros(shift_out)),
        groups=groups, mode=mode, per_group_box=per_group_box)


def predict_deltas(feats: Tensor, heads: PoiHeads) -> tuple[Tensor, Tensor]:
    """(box deltas [n, 8|G*8], point shifts [n, G*A*3]) from the feature."""
    box = ad.linear(feats, heads.box_w, heads.box_b)
    shifts = ad.linear(feats, heads.shift_w, heads.shift_b)
    return box, shifts


def transform_box(boxes: Tensor, delta: Tensor) -> Tensor:
    """Additive centers/heading, multiplicative exp dims; no renormalization."""
    if boxes.shape != delta.shape or boxes.shape[1] != 8:
        raise ad.ShapeError(f"transform_box: {boxes.shape} vs {delta.shape}")
    center = ad.narrow(boxes, 1, 0, 3) + ad.narrow(delta, 1, 0, 3)
    dims = ad.mul(ad.narrow(boxes, 1, 3, 3), ad.exp(ad.narrow(delta, 1, 3, 3)))
    sincos = ad.narrow(boxes, 1, 6, 2) + ad.narrow(delta, 1, 6, 2)
    return ad.concat([center, dims, sincos], axis=1)


def anchor_points(boxes: Tensor, n_anchors: int) -> Tensor:
    """Center (+8 corners in canonical order) of each box, [n, A, 3].

    Differentiable; the heading rotation uses (sin, cos) normalized by
    their norm, which equals the atan2 heading wherever it is defined.
    """
    n = boxes.shape[0]
    center = ad.narrow(boxes, 1, 0, 3)
    if n_anchors == 1:
        return ad.reshape(center, (n, 1, 3))
    sin = ad.narrow(boxes, 1, 6, 1)
    cos = ad.narrow(boxes, 1, 7, 1)
    norm_sq = ad.add(ad.mul(sin, sin), ad.mul(cos, cos))
    if np.any(norm_sq.data < 1e-18):
        raise DegenerateHeadingError("anchor extraction with (sin, cos) ~ (0, 0)")
    norm = ad.sqrt(norm_sq)
    c = ad.div(cos, norm)
    s = ad.div(sin, norm)

    w = ad.narrow(boxes, 1, 3, 1)
    length = ad.narrow(boxes, 1, 4, 1)
    h = ad.narrow(boxes, 1, 5, 1)
    half = ad.mul(ad.concat([length, w, h], axis=1), 0.5)   # local x=l, y=w, z=h
    local = ad.mul(ad.repeat_mid(half, 8),
                   Tensor(np.broadcast_to(CORNER_SIGNS, (n, 8, 3)).copy()))
    lx = ad.narrow(local, 2, 0, 1)
    ly = ad.narrow(local, 2, 1, 1)
    lz = ad.narrow(local, 2, 2, 1)
    c3 = ad.repeat_mid(c, 8)
    s3 = ad.repeat_mid(s, 8)
    gx = ad.sub(ad.mul(c3, lx), ad.mul(s3, ly))
    gy = ad.add(ad.mul(s3, lx), ad.mul(c3, ly))
    corners = ad.add(ad.concat([gx, gy, lz], axis=2), ad.repeat_mid(center, 8))
    return ad.concat([ad.reshape(center, (n, 1, 3)), corners], axis=1)


def generate_pois(boxes: Tensor, feats: Tensor, heads: PoiHeads) -> list[Tensor]:
    """Per-group PoI coordinates, each [n, A, 3], in canonical anchor order."""
    mode = heads.mode
    n = boxes.shape[0]
    a = mode.n_anchors
    box_delta = shifts = None
    if mode.use_box_transform or mode.use_point_shift:
        box_delta, shifts = predict_deltas(feats, heads)
    shared = None
    if not (mode.use_box_transform and heads.per_group_box):
        b = transform_box(boxes, box_delta) if mode.use_box_transform else boxes
        shared = anchor_points(b, a)
    pois = []
    for g in range(heads.groups):
        if shared is None:
            delta = ad.narrow(box_delta, 1, 8 * g, 8)
            anchors = anchor_points(transform_box(boxes, delta), a)
        else:
            anchors = shared
        if mode.use_point_shift:
            group_shift = ad.reshape(
                ad.narrow(shifts, 1, g * a * 3, a * 3), (n, a, 3))
            anchors = ad.add(anchors, group_shift)
        pois.append(anchors)
    return pois

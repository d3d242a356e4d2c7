"""Object query state and initialization.

A query is a learnable 3D box plus a learnable feature vector. Queries
are held batched: boxes [n, 8] and features [n, C], both leaf tensors
that receive gradients through the first decoder iteration.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor
from .geometry import BevGrid

INIT_DIMS = (6.0, 3.0, 2.0)  # (w, l, h) at initialization
FEAT_INIT_STD = 0.02


@dataclass
class QuerySet:
    """Batched object queries: boxes [n, 8] and features [n, channels]."""

    boxes: Tensor
    feats: Tensor

    @property
    def count(self) -> int:
        return self.boxes.shape[0]


def init_queries(n: int, grid: BevGrid, seed: int, channels: int = 256) -> QuerySet:
    """Near-square lattice of query centers over the BEV range.

    The lattice is ceil(sqrt(n)) x ceil(sqrt(n)), truncated to n in
    row-major order; centers sit strictly inside the range. z = 0,
    dims = (6, 3, 2), heading = 0; features are seeded Gaussian.
    """
    if n < 1:
        raise ValueError(f"need at least one query, got n={n}")
    side = math.ceil(math.sqrt(n))
    boxes = np.zeros((n, 8))
    span_x = grid.x_max - grid.x_min
    span_y = grid.y_max - grid.y_min
    for i in range(n):
        row, col = divmod(i, side)
        boxes[i, 0] = grid.x_min + (col + 0.5) / side * span_x
        boxes[i, 1] = grid.y_min + (row + 0.5) / side * span_y
    boxes[:, 3:6] = INIT_DIMS
    boxes[:, 6] = 0.0  # sin(0)
    boxes[:, 7] = 1.0  # cos(0)
    rng = np.random.default_rng(seed)
    feats = rng.normal(0.0, FEAT_INIT_STD, size=(n, channels))
    return QuerySet(boxes=Tensor(boxes, requires_grad=True),
                    feats=Tensor(feats, requires_grad=True))

"""Dynamic multi-modal fusion and PoI aggregation.

Per channel group, two linear layers fuse the concatenated (BEV, image)
feature of every PoI. In dynamic mode the layer parameters are generated
on the fly from the query feature by conventional linear heads; in the
static ablation they are ordinary learned matrices. Channel bookkeeping
per group: 2*C_g -> C_g -> C_g, so group-concatenated totals run
512 -> 256 -> 256 at the reference width. Each fusion layer and the
aggregation layer are followed by LayerNorm and ReLU; the aggregated
feature is residually added to the query feature.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

HEAD_INIT_STD = 0.02


@dataclass
class GroupFusionParams:
    """Parameter tensors for one channel group's fusion layers."""

    # dynamic mode: heads emitting L1 [2cg*cg], b1 [cg], L2 [cg*cg], b2 [cg]
    l1_w: Tensor
    l1_b: Tensor
    b1_w: Tensor
    b1_b: Tensor
    l2_w: Tensor
    l2_b: Tensor
    b2_w: Tensor
    b2_b: Tensor
    ln1_gamma: Tensor
    ln1_beta: Tensor
    ln2_gamma: Tensor
    ln2_beta: Tensor
    dynamic: bool


def make_group_fusion(channels: int, cg: int, dynamic: bool,
                      rng: np.random.Generator) -> GroupFusionParams:
    def head(out):
        return (ad.param(rng.normal(0.0, HEAD_INIT_STD, size=(channels, out))),
                ad.param(np.zeros(out)))

    if dynamic:
        l1_w, l1_b = head(2 * cg * cg)
        b1_w, b1_b = head(cg)
        l2_w, l2_b = head(cg * cg)
        b2_w, b2_b = head(cg)
    else:
        # static ablation: fixed matrices in place of generated ones
        l1_w = ad.param(rng.normal(0.0, HEAD_INIT_STD, size=(2 * cg, cg)))
        l1_b = ad.param(np.zeros(cg))
        l2_w = ad.param(rng.normal(0.0, HEAD_INIT_STD, size=(cg, cg)))
        l2_b = ad.param(np.zeros(cg))
        b1_w = b1_b = b2_w = b2_b = None
    return GroupFusionParams(
        l1_w=l1_w, l1_b=l1_b, b1_w=b1_w, b1_b=b1_b,
        l2_w=l2_w, l2_b=l2_b, b2_w=b2_w, b2_b=b2_b,
        ln1_gamma=ad.param(np.ones(cg)), ln1_beta=ad.param(np.zeros(cg)),
        ln2_gamma=ad.param(np.ones(cg)), ln2_beta=ad.param(np.zeros(cg)),
        dynamic=dynamic)


def fuse_poi(pair: Tensor, feats: Tensor, gp: GroupFusionParams) -> Tensor:
    """Fuse [n, A, 2*C_g] PoI feature pairs into [n, A, C_g].

    Dynamic mode runs each query's PoIs through that query's generated
    layers: y = ReLU(LN(L2 . ReLU(LN(L1 . pair + b1)) + b2)).
    """
    n, a, two_cg = pair.shape
    cg = two_cg // 2
    if gp.dynamic:
        l1 = ad.reshape(ad.linear(feats, gp.l1_w, gp.l1_b), (n, 2 * cg, cg))
        b1 = ad.linear(feats, gp.b1_w, gp.b1_b)
        h = ad.add(ad.bmm(pair, l1), ad.repeat_mid(b1, a))
        h = ad.relu(ad.layer_norm(h, gp.ln1_gamma, gp.ln1_beta))
        l2 = ad.reshape(ad.linear(feats, gp.l2_w, gp.l2_b), (n, cg, cg))
        b2 = ad.linear(feats, gp.b2_w, gp.b2_b)
        y = ad.add(ad.bmm(h, l2), ad.repeat_mid(b2, a))
        return ad.relu(ad.layer_norm(y, gp.ln2_gamma, gp.ln2_beta))
    flat = ad.reshape(pair, (n * a, 2 * cg))
    h = ad.relu(ad.layer_norm(ad.linear(flat, gp.l1_w, gp.l1_b),
                              gp.ln1_gamma, gp.ln1_beta))
    y = ad.relu(ad.layer_norm(ad.linear(h, gp.l2_w, gp.l2_b),
                              gp.ln2_gamma, gp.ln2_beta))
    return ad.reshape(y, (n, a, cg))


@dataclass
class AggregationParams:
    weight: Tensor  # [G * A * C_g, C]
    bias: Tensor
    ln_gamma: Tensor
    ln_beta: Tensor


def make_aggregation(channels: int, groups: int, n_anchors: int, cg: int,
                     rng: np.random.Generator) -> AggregationParams:
    fan_in = groups * n_anchors * cg
    return AggregationParams(
        weight=ad.param(rng.normal(0.0, HEAD_INIT_STD, size=(fan_in, channels))),
        bias=ad.param(np.zeros(channels)),
        ln_gamma=ad.param(np.ones(channels)),
        ln_beta=ad.param(np.zeros(channels)))


def aggregate_pois(fused: list[Tensor], feats: Tensor,
                   agg: AggregationParams) -> Tensor:
    """Concatenate fused PoIs in canonical order and residually update feats.

    Canonical order is group-major, then anchor index (center first,
    corners in the geometry corner order), then channel.
    """
    n = feats.shape[0]
    flat_groups = [ad.reshape(f, (n, f.shape[1] * f.shape[2])) for f in fused]
    stacked = (flat_groups[0] if len(flat_groups) == 1
               else ad.concat(flat_groups, axis=1))
    if stacked.shape[1] != agg.weight.shape[0]:
        raise ad.ShapeError(
            f"aggregation expects {agg.weight.shape[0]} PoI channels, "
            f"got {stacked.shape[1]}")
    y = ad.relu(ad.layer_norm(ad.linear(stacked, agg.weight, agg.bias),
                              agg.ln_gamma, agg.ln_beta))
    return ad.add(feats, y)

"""The PoI multi-modal decoder: one shared parameter set applied iteratively.

Each iteration runs distance-biased self-attention over query features,
generates PoIs per channel group, samples both modalities, fuses and
aggregates them back into the query feature, applies an FFN, and emits
classification logits plus a refined box. The box center is cumulative
across iterations; dimensions and heading are re-emitted each iteration
relative to the current (default) or initial box. Detections are
available from every iteration for deep supervision.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import NonFiniteError, Tensor
from .fusion import (AggregationParams, GroupFusionParams, aggregate_pois,
                     fuse_poi, make_aggregation, make_group_fusion)
from .geometry import BevGrid, Box3D, CameraModel
from .oracle import FeatureAtlas
from .poi import PoiHeads, PoiMode, generate_pois, make_poi_heads
from .query import QuerySet, init_queries
from .sampling import STRIDES, sample_pair, scale_weight_rows
from .seeding import derive_seed

HEAD_INIT_STD = 0.02
# sigmoid^-1(0.01): start classification scores near the focal-loss prior
CLS_BIAS_INIT = -4.59511985013459
# softplus^-1(1): distance-bias scales start at 1.0
TAU_RAW_INIT = 0.5413248546129181


class DecodeError(Exception):
    pass


@dataclass
class DecoderConfig:
    channels: int = 256
    groups: int = 4
    heads: int = 8
    ffn_hidden: int = 512
    iterations: int = 6
    num_classes: int = 3
    poi_mode: PoiMode = PoiMode.BOX_TRANSFORM_SHIFT
    fusion: str = "dynamic"            # dynamic | static
    scale_logits: str = "per_query"    # per_query | per_poi
    view_selection: str = "random"     # random | deterministic
    box_update: str = "compound"       # compound | reset
    supervision: str = "deep"          # deep | final
    per_group_box_transform: bool = False

    def __post_init__(self) -> None:
        if self.channels % self.groups:
            raise ValueError("channels must divide evenly into groups")
        if self.channels % self.heads:
            raise ValueError("channels must divide evenly into heads")
        for name, value, options in (
                ("fusion", self.fusion, ("dynamic", "static")),
                ("scale_logits", self.scale_logits, ("per_query", "per_poi")),
                ("view_selection", self.view_selection, ("random", "deterministic")),
                ("box_update", self.box_update, ("compound", "reset")),
                ("supervision", self.supervision, ("deep", "final"))):
            if value not in options:
                raise ValueError(f"{name} must be one of {options}, got {value!r}")
        if isinstance(self.poi_mode, str):
            self.poi_mode = PoiMode(self.poi_mode)

    @property
    def cg(self) -> int:
        return self.channels // self.groups


@dataclass
class AttentionParams:
    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor
    tau_raw: Tensor  # [heads]; tau = softplus(tau_raw) >= 0
    ln_gamma: Tensor
    ln_beta: Tensor


@dataclass
class FfnParams:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    ln_gamma: Tensor
    ln_beta: Tensor


@dataclass
class DecoderParams:
    cfg: DecoderConfig
    attn: AttentionParams
    poi_heads: PoiHeads
    scale_w: Tensor
    scale_b: Tensor
    fusion: list[GroupFusionParams]
    agg: AggregationParams
    ffn: FfnParams
    cls_w: Tensor
    cls_b: Tensor
    reg_w: Tensor
    reg_b: Tensor

    def named(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        a = self.attn
        for key, t in (("attn.wq", a.wq), ("attn.bq", a.bq), ("attn.wk", a.wk),
                       ("attn.bk", a.bk), ("attn.wv", a.wv), ("attn.bv", a.bv),
                       ("attn.wo", a.wo), ("attn.bo", a.bo),
                       ("attn.tau_raw", a.tau_raw),
                       ("attn.ln_gamma", a.ln_gamma), ("attn.ln_beta", a.ln_beta)):
            out[key] = t
        out["poi.box_w"] = self.poi_heads.box_w
        out["poi.box_b"] = self.poi_heads.box_b
        out["poi.shift_w"] = self.poi_heads.shift_w
        out["poi.shift_b"] = self.poi_heads.shift_b
        out["scale.w"] = self.scale_w
        out["scale.b"] = self.scale_b
        for g, gp in enumerate(self.fusion):
            items = [("l1_w", gp.l1_w), ("l1_b", gp.l1_b),
                     ("l2_w", gp.l2_w), ("l2_b", gp.l2_b),
                     ("ln1_gamma", gp.ln1_gamma), ("ln1_beta", gp.ln1_beta),
                     ("ln2_gamma", gp.ln2_gamma), ("ln2_beta", gp.ln2_beta)]
            if gp.dynamic:
                items += [("b1_w", gp.b1_w), ("b1_b", gp.b1_b),
                          ("b2_w", gp.b2_w), ("b2_b", gp.b2_b)]
            for key, t in items:
                out[f"fusion.g{g}.{key}"] = t
        out["agg.w"] = self.agg.weight
        out["agg.b"] = self.agg.bias
        out["agg.ln_gamma"] = self.agg.ln_gamma
        out["agg.ln_beta"] = self.agg.ln_beta
        f = self.ffn
        for key, t in (("ffn.w1", f.w1), ("ffn.b1", f.b1), ("ffn.w2", f.w2),
                       ("ffn.b2", f.b2), ("ffn.ln_gamma", f.ln_gamma),
                       ("ffn.ln_beta", f.ln_beta)):
            out[key] = t
        out["head.cls_w"] = self.cls_w
        out["head.cls_b"] = self.cls_b
        out["head.reg_w"] = self.reg_w
        out["head.reg_b"] = self.reg_b
        return out


def make_decoder_params(cfg: DecoderConfig, seed: int) -> DecoderParams:
    """Fresh parameters; delta heads start at zero so PoIs equal anchors."""
    rng = np.random.default_rng(seed)
    c = cfg.channels

    def w(shape):
        return ad.param(rng.normal(0.0, HEAD_INIT_STD, size=shape))

    def zeros(shape):
        return ad.param(np.zeros(shape))

    attn = AttentionParams(
        wq=w((c, c)), bq=zeros(c), wk=w((c, c)), bk=zeros(c),
        wv=w((c, c)), bv=zeros(c), wo=w((c, c)), bo=zeros(c),
        tau_raw=ad.param(np.full(cfg.heads, TAU_RAW_INIT)),
        ln_gamma=ad.param(np.ones(c)), ln_beta=zeros(c))
    poi_heads = make_poi_heads(c, cfg.groups, cfg.poi_mode,
                               cfg.per_group_box_transform)
    n_levels = len(STRIDES)
    scale_out = (cfg.poi_mode.n_anchors * n_levels
                 if cfg.scale_logits == "per_poi" else n_levels)
    fusion = [make_group_fusion(c, cfg.cg, cfg.fusion == "dynamic", rng)
              for _ in range(cfg.groups)]
    agg = make_aggregation(c, cfg.groups, cfg.poi_mode.n_anchors, cfg.cg, rng)
    ffn = FfnParams(w1=w((c, cfg.ffn_hidden)), b1=zeros(cfg.ffn_hidden),
                    w2=w((cfg.ffn_hidden, c)), b2=zeros(c),
                    ln_gamma=ad.param(np.ones(c)), ln_beta=zeros(c))
    return DecoderParams(
        cfg=cfg, attn=attn, poi_heads=poi_heads,
        scale_w=w((c, scale_out)), scale_b=zeros(scale_out),
        fusion=fusion, agg=agg, ffn=ffn,
        cls_w=w((c, cfg.num_classes)),
        cls_b=ad.param(np.full(cfg.num_classes, CLS_BIAS_INIT)),
        reg_w=zeros((c, 8)), reg_b=zeros(8))


@dataclass
class Model:
    """Decoder parameters plus the learnable query initialization."""

    cfg: DecoderConfig
    params: DecoderParams
    queries: QuerySet

    def named_parameters(self) -> dict[str, Tensor]:
        out = {"query.boxes": self.queries.boxes, "query.feats": self.queries.feats}
        out.update(self.params.named())
        return out


def build_model(cfg: DecoderConfig, grid: BevGrid, n_queries: int,
                seed: int) -> Model:
    queries = init_queries(n_queries, grid, derive_seed(seed, 1), cfg.channels)
    params = make_decoder_params(cfg, derive_seed(seed, 2))
    return Model(cfg=cfg, params=params, queries=queries)


def pairwise_bev_distance(centers: np.ndarray) -> np.ndarray:
    d = centers[:, None, :] - centers[None, :, :]
    return np.hypot(d[..., 0], d[..., 1])


def self_attention(feats: Tensor, centers: np.ndarray, p: AttentionParams,
                   n_heads: int) -> Tensor:
    """Multi-head attention with additive logit bias -tau_h * BEV distance."""
    n, c = feats.shape
    dh = c // n_heads
    q = ad.linear(feats, p.wq, p.bq)
    k = ad.linear(feats, p.wk, p.bk)
    v = ad.linear(feats, p.wv, p.bv)
    dist = Tensor(pairwise_bev_distance(centers))
    outs = []
    for h in range(n_heads):
        qh = ad.narrow(q, 1, h * dh, dh)
        kh = ad.narrow(k, 1, h * dh, dh)
        vh = ad.narrow(v, 1, h * dh, dh)
        scores = ad.mul(ad.matmul(qh, ad.transpose(kh)), 1.0 / np.sqrt(dh))
        tau = ad.softplus(ad.narrow(p.tau_raw, 0, h, 1))
        scores = ad.sub(scores, ad.mul(dist, tau))
        outs.append(ad.matmul(ad.softmax(scores, axis=-1), vh))
    mixed = ad.linear(ad.concat(outs, axis=1), p.wo, p.bo)
    return ad.layer_norm(ad.add(feats, mixed), p.ln_gamma, p.ln_beta)


def ffn_block(feats: Tensor, p: FfnParams) -> Tensor:
    hidden = ad.relu(ad.linear(feats, p.w1, p.b1))
    return ad.layer_norm(ad.add(feats, ad.linear(hidden, p.w2, p.b2)),
                         p.ln_gamma, p.ln_beta)


def update_boxes(boxes: Tensor, reg: Tensor, base_boxes: Tensor,
                 mode: str) -> Tensor:
    """Center is cumulative; dims/heading re-emitted against `mode`'s reference."""
    ref = boxes if mode == "compound" else base_boxes
    center = ad.add(ad.narrow(boxes, 1, 0, 3), ad.narrow(reg, 1, 0, 3))
    dims = ad.mul(ad.narrow(ref, 1, 3, 3), ad.exp(ad.narrow(reg, 1, 3, 3)))
    sincos = ad.add(ad.narrow(ref, 1, 6, 2), ad.narrow(reg, 1, 6, 2))
    return ad.concat([center, dims, sincos], axis=1)


@dataclass
class IterationOutput:
    logits: Tensor  # [n, num_classes]
    boxes: Tensor   # [n, 8], after this iteration's update


def decode_iteration(feats: Tensor, boxes: Tensor, base_boxes: Tensor,
                     atlas: FeatureAtlas, rig: list[CameraModel], grid: BevGrid,
                     params: DecoderParams, seed: int, iteration: int
                     ) -> tuple[Tensor, Tensor, Tensor]:
    """One decoder pass; returns (feats', boxes', cls_logits)."""
    cfg = params.cfg
    n = feats.shape[0]
    a = cfg.poi_mode.n_anchors
    feats = self_attention(feats, boxes.data[:, :2].copy(), params.attn,
                           cfg.heads)
    pois = generate_pois(boxes, feats, params.poi_heads)
    logits = ad.linear(feats, params.scale_w, params.scale_b)
    weights = scale_weight_rows(logits, n, a, cfg.scale_logits == "per_poi")
    deterministic = cfg.view_selection == "deterministic"
    fused = []
    for g, poi_g in enumerate(pois):
        flat = ad.reshape(poi_g, (n * a, 3))
        keys = None
        if not deterministic:
            base = derive_seed(seed, iteration, g)
            keys = np.uint64(base) + np.arange(n * a, dtype=np.uint64)
        pair = sample_pair(flat, atlas, rig, grid, weights, g, cfg.groups,
                           deterministic=deterministic, seed_keys=keys)
        pair3 = ad.concat([ad.reshape(pair.f_bev, (n, a, cfg.cg)),
                           ad.reshape(pair.f_img, (n, a, cfg.cg))], axis=2)
        fused.append(fuse_poi(pair3, feats, params.fusion[g]))
    feats = aggregate_pois(fused, feats, params.agg)
    feats = ffn_block(feats, params.ffn)
    cls_logits = ad.linear(feats, params.cls_w, params.cls_b)
    reg = ad.linear(feats, params.reg_w, params.reg_b)
    boxes = update_boxes(boxes, reg, base_boxes, cfg.box_update)
    return feats, boxes, cls_logits


def decode(model: Model, atlas: FeatureAtlas, rig: list[CameraModel],
           grid: BevGrid, seed: int = 0,
           iterations: int | None = None) -> list[IterationOutput]:
    """Run the decoder `iterations` times and emit per-iteration detections."""
    cfg = model.cfg
    iters = cfg.iterations if iterations is None else iterations
    if iters < 1:
        raise DecodeError(f"iterations must be >= 1, got {iters}")
    feats = model.queries.feats
    boxes = model.queries.boxes
    base = model.queries.boxes
    outputs = []
    for t in range(iters):
        try:
            feats, boxes, logits = decode_iteration(
                feats, boxes, base, atlas, rig, grid, model.params, seed, t)
        except NonFiniteError as err:
            raise DecodeError(f"non-finite activations at iteration {t}: {err}")
        outputs.append(IterationOutput(logits=logits, boxes=boxes))
    return outputs


@dataclass
class Detection:
    box: Box3D
    class_id: int
    score: float
    query_index: int


def extract_detections(output: IterationOutput) -> list[Detection]:
    """One candidate per (query, class); score = sigmoid(logit)."""
    logits = output.logits.data
    boxes = output.boxes.data
    scores = 1.0 / (1.0 + np.exp(-logits))
    dets = []
    for q in range(boxes.shape[0]):
        box = Box3D.from_array(boxes[q])
        for c in range(logits.shape[1]):
            dets.append(Detection(box=box, class_id=c,
                                  score=float(scores[q, c]), query_index=q))
    return dets


def top_k(detections: list[Detection], k: int = 300) -> list[Detection]:
    """Top-k by score, no NMS; ties broken by lower query index first."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    ranked = sorted(detections,
                    key=lambda d: (-d.score, d.query_index, d.class_id))
    return ranked[:k]


CHECKPOINT_MAGIC = b"PDCK"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, named: dict[str, Tensor]) -> None:
    """Binary checkpoint: magic, version, then a named f64 parameter table."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(named)))
        for name, tensor in named.items():
            raw = name.encode("utf-8")
            arr = np.ascontiguousarray(tensor.data, dtype="<f8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", arr.ndim))
            for d in arr.shape:
                fh.write(struct.pack("<I", d))
            fh.write(arr.tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        if fh.read(4) != CHECKPOINT_MAGIC:
            raise DecodeError(f"{path}: not a checkpoint file")
        version, count = struct.unpack("<II", fh.read(8))
        if version != CHECKPOINT_VERSION:
            raise DecodeError(f"{path}: unsupported checkpoint version {version}")
        out = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<H", fh.read(2))
            name = fh.read(nlen).decode("utf-8")
            (ndim,) = struct.unpack("<B", fh.read(1))
            shape = tuple(struct.unpack("<I", fh.read(4))[0] for _ in range(ndim))
            n_items = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(fh.read(8 * n_items), dtype="<f8")
            out[name] = data.reshape(shape).astype(np.float64)
        return out


def load_into_model(model: Model, path) -> None:
    """Load a checkpoint, requiring an exact name/shape match."""
    loaded = load_checkpoint(path)
    named = model.named_parameters()
    missing = set(named) - set(loaded)
    extra = set(loaded) - set(named)
    if missing or extra:
        raise DecodeError(f"checkpoint mismatch: missing={sorted(missing)}, "
                          f"unexpected={sorted(extra)}")
    for name, tensor in named.items():
        if loaded[name].shape != tensor.data.shape:
            raise DecodeError(f"checkpoint shape mismatch for {name}: "
                              f"{loaded[name].shape} vs {tensor.data.shape}")
        tensor.data[...] = loaded[name]

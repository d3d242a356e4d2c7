"""Dataset generation, training, and evaluation orchestration.

Everything here is a deterministic function of (config, seed): scene
seeds, epoch shuffles, and per-scene view-selection streams are all
derived by counter hashing, so reruns reproduce results bit-exactly and
results do not depend on worker count (workers only parallelize the
embarrassingly parallel per-scene evaluation, collected in scene order).
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .assignment import detection_loss, hungarian
from .autodiff import NonFiniteError, Tape
from .config import config_hash, decoder_config, scene_config, source_revision
from .decoder import (DecodeError, Model, build_model, decode,
                      extract_detections, load_into_model, save_checkpoint,
                      top_k)
from .evalmetrics import (EvalReport, SceneDetections, SceneTruth,
                          evaluate_detections)
from .optim import AdamW, OptimError, one_cycle_lr
from .oracle import (Corruption, FeatureAtlas, apply_corruption, bev_fields,
                     encode_oracle_features, image_fields, image_field_count,
                     bev_field_count, lift_matrix)
from .scenes import Scene, SceneGenerationError, dump_scene, generate_scene, load_scene
from .seeding import derive_seed

MANIFEST_SCHEMA = "poidet-manifest/1"

# seed-derivation tags
TAG_SCENE = 11
TAG_MODEL = 12
TAG_SHUFFLE = 13
TAG_VIEW = 14
TAG_EVAL_VIEW = 15


class NumericError(Exception):
    """Training or evaluation hit non-finite values."""


class DatasetError(Exception):
    pass


def generate_dataset(cfg: dict, out_dir, count: int, seed: int) -> Path:
    """Write `count` scene files plus a manifest with content hashes."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    scfg = scene_config(cfg)
    entries = []
    for i in range(count):
        scene = generate_scene(scfg, derive_seed(seed, TAG_SCENE, i))
        name = f"scene_{i:05d}.json"
        blob = dump_scene(scene).encode("utf-8")
        (out / name).write_bytes(blob)
        entries.append({"file": name,
                        "sha256": hashlib.sha256(blob).hexdigest()})
    manifest = {
        "schema": MANIFEST_SCHEMA,
        "count": count,
        "seed": seed,
        "config_hash": config_hash(cfg),
        "entries": entries,
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, sort_keys=True, indent=1),
                    encoding="utf-8")
    return path


def load_dataset(data_dir) -> list[Scene]:
    data = Path(data_dir)
    manifest_path = data / "manifest.json"
    if not manifest_path.exists():
        raise DatasetError(f"no manifest.json in {data}")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    if manifest.get("schema") != MANIFEST_SCHEMA:
        raise DatasetError(f"unsupported manifest schema in {manifest_path}")
    scenes = []
    for entry in manifest["entries"]:
        scenes.append(load_scene(data / entry["file"]))
    return scenes


class AtlasCache:
    """Per-scene analytic fields cached once; the channel lift is cheap."""

    def __init__(self, channels: int, lift_seed: int) -> None:
        self.channels = channels
        self.lift_seed = lift_seed
        self._fields: dict[int, tuple] = {}

    def atlas(self, scene: Scene, key: int) -> FeatureAtlas:
        cached = self._fields.get(key)
        if cached is None:
            bf = bev_fields(scene)
            imf = [image_fields(scene, cam) for cam in scene.rig]
            cached = (bf, imf)
            self._fields[key] = cached
        bf, imf = cached
        bev_lift = lift_matrix(bev_field_count(scene.num_classes),
                               self.channels, self.lift_seed)
        img_lift = lift_matrix(image_field_count(scene.num_classes),
                               self.channels, self.lift_seed + 1)
        bev = np.tensordot(bev_lift, bf, axes=([1], [0]))
        images = [[np.tensordot(img_lift, f, axes=([1], [0])) for f in levels]
                  for levels in imf]
        return FeatureAtlas(bev=bev, images=images, channels=self.channels)


@dataclass
class TrainResult:
    checkpoint: Path
    best_checkpoint: Path
    log_path: Path
    steps: int
    final_loss: float
    best_epoch_loss: float


def build_model_from_config(cfg: dict) -> Model:
    dcfg = decoder_config(cfg)
    grid = scene_config(cfg).grid
    return build_model(dcfg, grid, cfg["model"]["queries"],
                       derive_seed(cfg["seed"], TAG_MODEL))


def train(cfg: dict, scenes: list[Scene], out_dir, progress=None) -> TrainResult:
    """AdamW loop over scenes with per-step CSV logging.

    A non-finite loss or gradient aborts the run after writing the
    last-good checkpoint (parameters are validated before any update).
    """
    if not scenes:
        raise DatasetError("no scenes to train on")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    model = build_model_from_config(cfg)
    opt_cfg = cfg["optim"]
    opt = AdamW(model.named_parameters(), lr=opt_cfg["lr"],
                beta1=opt_cfg["beta1"], beta2=opt_cfg["beta2"],
                eps=opt_cfg["eps"], weight_decay=opt_cfg["weight_decay"])
    cache = AtlasCache(cfg["model"]["channels"], cfg["encoder"]["lift_seed"])
    batch = opt_cfg["batch"]
    epochs = opt_cfg["epochs"]
    steps_per_epoch = math.ceil(len(scenes) / batch)
    total_steps = epochs * steps_per_epoch
    num_classes = len(cfg["scene"]["class_sizes"])
    supervision = cfg["model"]["supervision"]

    log_path = out / "train_log.csv"
    ckpt_path = out / "checkpoint.ckpt"
    best_path = out / "best.ckpt"
    step = 0
    best_epoch_loss = float("inf")
    final_loss = float("nan")
    with open(log_path, "w", newline="", encoding="utf-8") as log_file:
        writer = csv.writer(log_file)
        writer.writerow(["step", "total", "l_cls", "l_reg"])
        for epoch in range(epochs):
            order = np.random.default_rng(
                derive_seed(cfg["seed"], TAG_SHUFFLE, epoch)).permutation(len(scenes))
            epoch_losses = []
            for start in range(0, len(order), batch):
                indices = order[start:start + batch]
                opt.zero_grad()
                totals = np.zeros(3)
                try:
                    for scene_idx in indices:
                        scene = scenes[scene_idx]
                        atlas = cache.atlas(scene, int(scene_idx))
                        view_seed = derive_seed(cfg["seed"], TAG_VIEW, epoch,
                                                int(scene_idx))
                        with Tape() as tape:
                            outputs = decode(model, atlas, scene.rig,
                                             scene.grid, seed=view_seed)
                            gt_boxes, gt_classes = scene.gt_arrays()
                            loss = detection_loss(outputs, gt_boxes, gt_classes,
                                                  num_classes,
                                                  supervision=supervision)
                            tape.backward(loss.total)
                        totals += loss.scalars()
                    if not np.all(np.isfinite(totals)):
                        raise NumericError(f"non-finite loss at step {step}")
                    lr = (one_cycle_lr(opt_cfg["lr"], step, total_steps)
                          if opt_cfg["schedule"] == "one_cycle" else None)
                    opt.step(lr=lr)
                except (NonFiniteError, DecodeError, OptimError,
                        NumericError) as err:
                    save_checkpoint(ckpt_path, model.named_parameters())
                    raise NumericError(
                        f"aborted at step {step}: {err} "
                        f"(last-good checkpoint at {ckpt_path})") from err
                totals /= len(indices)
                writer.writerow([step, repr(float(totals[0])),
                                 repr(float(totals[1])), repr(float(totals[2]))])
                epoch_losses.append(float(totals[0]))
                final_loss = float(totals[0])
                step += 1
                if progress and step % 50 == 0:
                    progress(f"step {step}/{total_steps} loss {totals[0]:.4f}")
            if epoch_losses:
                mean_loss = float(np.mean(epoch_losses))
                if mean_loss < best_epoch_loss:
                    best_epoch_loss = mean_loss
                    save_checkpoint(best_path, model.named_parameters())
                if progress:
                    progress(f"epoch {epoch}: mean loss {mean_loss:.4f}")
    save_checkpoint(ckpt_path, model.named_parameters())
    if not best_path.exists():
        save_checkpoint(best_path, model.named_parameters())
    meta = {
        "schema": "poidet-train-meta/1",
        "config_hash": config_hash(cfg),
        "seed": cfg["seed"],
        "revision": source_revision(),
        "steps": step,
        "final_loss": final_loss,
        "best_epoch_loss": (None if math.isinf(best_epoch_loss)
                            else best_epoch_loss),
    }
    (out / "train_meta.json").write_text(
        json.dumps(meta, sort_keys=True, indent=1), encoding="utf-8")
    return TrainResult(checkpoint=ckpt_path, best_checkpoint=best_path,
                       log_path=log_path, steps=step, final_loss=final_loss,
                       best_epoch_loss=best_epoch_loss)


def parse_corruption_spec(spec: str, seed: int = 0) -> list[Corruption]:
    """Parse 'kind:key=value,...'; calib_offset accepts a swept value list.

    Examples: 'calib_offset:max_offset=1.0', 'camera_drop:cameras=0+1',
    'lidar_sector:center=45,width=24',
    'calib_offset:sweep=0+0.2+0.4+0.6+0.8+1.0'.
    """
    if ":" in spec:
        kind, _, rest = spec.partition(":")
        pairs = dict(item.split("=", 1) for item in rest.split(",") if item)
    else:
        kind, pairs = spec, {}
    kind = kind.strip()
    try:
        if kind == "calib_offset":
            if "sweep" in pairs:
                offsets = [float(v) for v in pairs["sweep"].split("+")]
            else:
                offsets = [float(pairs.get("max_offset", 0.0))]
            c_seed = int(pairs.get("seed", seed))
            return [Corruption("calib_offset", max_offset=off, seed=c_seed)
                    for off in offsets]
        if kind == "camera_drop":
            cams = tuple(int(v) for v in pairs.get("cameras", "").split("+")
                         if v != "")
            return [Corruption("camera_drop", cameras=cams)]
        if kind == "lidar_sector":
            return [Corruption("lidar_sector",
                               center_deg=float(pairs.get("center", 0.0)),
                               width_deg=float(pairs.get("width", 0.0)))]
    except (ValueError, KeyError) as err:
        raise DatasetError(f"bad corruption spec {spec!r}: {err}") from err
    raise DatasetError(f"unknown corruption kind {kind!r}")


def _eval_one_scene(model: Model, cfg: dict, cache: AtlasCache, scene: Scene,
                    scene_idx: int, corruption: Corruption | None
                    ) -> tuple[SceneDetections, SceneTruth, list[float]]:
    atlas = cache.atlas(scene, scene_idx)
    if corruption is not None:
        scene, atlas = apply_corruption(scene, atlas, corruption)
    view_seed = derive_seed(cfg["seed"], TAG_EVAL_VIEW, scene_idx)
    outputs = decode(model, atlas, scene.rig, scene.grid, seed=view_seed)
    dets = top_k(extract_detections(outputs[-1]), k=cfg["eval"]["top_k"])
    det_centers = np.array([[d.box.x_c, d.box.y_c] for d in dets]).reshape(-1, 2)
    det_classes = np.array([d.class_id for d in dets], dtype=np.intp)
    det_scores = np.array([d.score for d in dets])
    gt_boxes, gt_classes = scene.gt_arrays()
    truth = SceneTruth(centers=gt_boxes[:, :2].copy(), classes=gt_classes)

    center_errors = []
    for out in outputs:
        if gt_boxes.shape[0] == 0:
            center_errors.append(float("nan"))
            continue
        centers = out.boxes.data[:, :2]
        dist = np.hypot(centers[:, None, 0] - gt_boxes[None, :, 0],
                        centers[:, None, 1] - gt_boxes[None, :, 1])
        match = hungarian(dist)
        center_errors.append(float(np.mean([dist[q, g] for q, g in match.pairs])))
    return (SceneDetections(centers=det_centers, classes=det_classes,
                            scores=det_scores), truth, center_errors)


def run_eval(cfg: dict, model: Model, scenes: list[Scene],
             corruption: Corruption | None = None, workers: int | None = None
             ) -> tuple[dict, list[float]]:
    """(metrics dict from evaluate_detections, per-iteration center error)."""
    if not scenes:
        raise DatasetError("no scenes to evaluate")
    cache = AtlasCache(cfg["model"]["channels"], cfg["encoder"]["lift_seed"])
    n_workers = cfg["workers"] if workers is None else workers
    results = []
    if n_workers > 1:
        with ProcessPoolExecutor(max_workers=n_workers) as pool:
            futures = [pool.submit(_eval_one_scene, model, cfg, cache, scene,
                                   i, corruption)
                       for i, scene in enumerate(scenes)]
            results = [f.result() for f in futures]  # scene order preserved
    else:
        results = [_eval_one_scene(model, cfg, cache, scene, i, corruption)
                   for i, scene in enumerate(scenes)]
    per_dets = [r[0] for r in results]
    per_truth = [r[1] for r in results]
    errors = np.array([r[2] for r in results])  # [n_scenes, iterations]
    with np.errstate(invalid="ignore"):
        center_errors = [float(v) for v in np.nanmean(errors, axis=0)]
    metrics = evaluate_detections(per_dets, per_truth,
                                  len(cfg["scene"]["class_sizes"]),
                                  thresholds=tuple(cfg["eval"]["thresholds"]))
    return metrics, center_errors


def evaluate_checkpoint(cfg: dict, checkpoint_path, scenes: list[Scene],
                        corruption_spec: str | None = None) -> EvalReport:
    """Full evaluation: clean metrics plus optional corruption entries."""
    model = build_model_from_config(cfg)
    load_into_model(model, checkpoint_path)
    metrics, center_errors = run_eval(cfg, model, scenes)
    corruptions = []
    if corruption_spec:
        for corr in parse_corruption_spec(corruption_spec, seed=cfg["seed"]):
            c_metrics, _ = run_eval(cfg, model, scenes, corruption=corr)
            corruptions.append({
                "spec": describe_corruption(corr),
                "map": c_metrics["map"],
                "delta": c_metrics["map"] - metrics["map"],
            })
    return EvalReport(
        map=metrics["map"], ap=metrics["ap"],
        thresholds=tuple(cfg["eval"]["thresholds"]),
        num_classes=len(cfg["scene"]["class_sizes"]),
        n_scenes=len(scenes), config_hash=config_hash(cfg), seed=cfg["seed"],
        revision=source_revision(), mean_center_error=center_errors,
        corruptions=corruptions)


def describe_corruption(c: Corruption) -> str:
    if c.kind == "calib_offset":
        return f"calib_offset:max_offset={c.max_offset:g},seed={c.seed}"
    if c.kind == "camera_drop":
        cams = "+".join(str(i) for i in c.cameras)
        return f"camera_drop:cameras={cams}"
    return f"lidar_sector:center={c.center_deg:g},width={c.width_deg:g}"

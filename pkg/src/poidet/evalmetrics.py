"""Distance-threshold detection metrics and the evaluation report.

Matching is greedy in descending score, per class and per threshold:
each detection claims the nearest unconsumed ground-truth box of its
class within the BEV center-distance threshold. AP is the 101-point
interpolated area under the precision envelope; mAP averages classes
(those with ground truth present) and thresholds.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

DEFAULT_THRESHOLDS = (0.5, 1.0, 2.0, 4.0)

REPORT_SCHEMA = "poidet-eval-report/1"


class EvalError(Exception):
    pass


@dataclass
class SceneDetections:
    """Flat per-scene detection arrays, score-sortable."""

    centers: np.ndarray   # [n, 2] BEV
    classes: np.ndarray   # [n]
    scores: np.ndarray    # [n]


@dataclass
class SceneTruth:
    centers: np.ndarray   # [m, 2]
    classes: np.ndarray   # [m]


def greedy_match_class(det_centers: np.ndarray, det_scores: np.ndarray,
                       gt_centers: np.ndarray, threshold: float
                       ) -> tuple[np.ndarray, int]:
    """(tp flags aligned to score-sorted detections, n_gt).

    Each gt is consumed at most once; a detection matches the nearest
    free gt within `threshold` meters.
    """
    order = np.argsort(-det_scores, kind="stable")
    taken = np.zeros(gt_centers.shape[0], dtype=bool)
    tp = np.zeros(order.size, dtype=bool)
    for rank, idx in enumerate(order):
        if gt_centers.shape[0] == 0:
            break
        d = np.hypot(gt_centers[:, 0] - det_centers[idx, 0],
                     gt_centers[:, 1] - det_centers[idx, 1])
        d[taken] = np.inf
        j = int(np.argmin(d))
        if d[j] <= threshold:
            taken[j] = True
            tp[rank] = True
    return tp, gt_centers.shape[0]


def interpolated_ap(tp: np.ndarray, n_gt: int) -> float:
    """101-point interpolated AP from score-ordered TP flags."""
    if n_gt == 0:
        return float("nan")
    if tp.size == 0:
        return 0.0
    cum_tp = np.cumsum(tp)
    precision = cum_tp / np.arange(1, tp.size + 1)
    recall = cum_tp / n_gt
    ap = 0.0
    for r in np.linspace(0.0, 1.0, 101):
        mask = recall >= r - 1e-12
        ap += precision[mask].max() if mask.any() else 0.0
    return ap / 101.0


def evaluate_detections(per_scene_dets: list[SceneDetections],
                        per_scene_truth: list[SceneTruth],
                        num_classes: int,
                        thresholds=DEFAULT_THRESHOLDS) -> dict:
    """AP per class per threshold plus the overall mAP.

    Detections are pooled across scenes per class (gt identity stays
    scene-local). Classes without any ground truth are excluded from
    the mean.
    """
    if len(per_scene_dets) != len(per_scene_truth):
        raise EvalError("detections and truth must cover the same scenes")
    ap_table: dict[int, dict[float, float]] = {}
    for cls in range(num_classes):
        ap_table[cls] = {}
        for thr in thresholds:
            scores_all = []
            tp_all = []
            n_gt = 0
            for dets, truth in zip(per_scene_dets, per_scene_truth):
                sel = dets.classes == cls
                gt_sel = truth.classes == cls
                tp, m = greedy_match_class(dets.centers[sel], dets.scores[sel],
                                           truth.centers[gt_sel], thr)
                scores_all.append(np.sort(dets.scores[sel])[::-1])
                tp_all.append(tp)
                n_gt += m
            if n_gt == 0:
                ap_table[cls][thr] = float("nan")
                continue
            scores = np.concatenate(scores_all) if scores_all else np.zeros(0)
            tps = np.concatenate(tp_all) if tp_all else np.zeros(0, dtype=bool)
            order = np.argsort(-scores, kind="stable")
            ap_table[cls][thr] = interpolated_ap(tps[order], n_gt)
    values = [ap for per_thr in ap_table.values() for ap in per_thr.values()
              if not np.isnan(ap)]
    map_value = float(np.mean(values)) if values else 0.0
    return {"ap": ap_table, "map": map_value}


@dataclass
class EvalReport:
    """Evaluation results plus enough metadata to reproduce them."""

    map: float
    ap: dict                      # class -> {threshold -> ap}
    thresholds: tuple
    num_classes: int
    n_scenes: int
    config_hash: str
    seed: int
    revision: str
    mean_center_error: list = field(default_factory=list)  # per iteration
    corruptions: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "schema": REPORT_SCHEMA,
            "map": self.map,
            "ap": {str(c): {format_threshold(t): none_if_nan(v)
                            for t, v in per.items()}
                   for c, per in self.ap.items()},
            "thresholds": list(self.thresholds),
            "num_classes": self.num_classes,
            "n_scenes": self.n_scenes,
            "config_hash": self.config_hash,
            "seed": self.seed,
            "revision": self.revision,
            "mean_center_error": self.mean_center_error,
            "corruptions": self.corruptions,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)


def format_threshold(t: float) -> str:
    return f"{t:g}"


def none_if_nan(v: float):
    return None if isinstance(v, float) and np.isnan(v) else v

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from ..datamodel.types import Annotation, Segment
from .postprocess import Detection, tiou

RECALL_POINTS = np.linspace(0.0, 1.0, 101)


@dataclass
class EvalConfig:
    tiou_thresholds: list[float] = field(default_factory=lambda: [0.3, 0.4, 0.5, 0.6, 0.7])
    recall_ks: list[int] = field(default_factory=lambda: [1, 5])
    score_threshold: float = 0.001
    soft_nms_sigma: float = 0.5
    max_dets_per_query: int = 100
    pre_nms_topk: int = 300
    nms_score_floor: float = 0.001

    def __post_init__(self):
        thr = [float(t) for t in self.tiou_thresholds]
        if not thr or any(not 0 < t <= 1 for t in thr) or any(b <= a for a, b in zip(thr, thr[1:])):
            raise ValueError(f"tiou_thresholds must be strictly increasing within (0, 1]: {thr}")
        self.tiou_thresholds = thr
        if not self.recall_ks or any(int(k) < 1 for k in self.recall_ks):
            raise ValueError("recall_ks must be >= 1")
        self.recall_ks = [int(k) for k in self.recall_ks]
        if self.soft_nms_sigma <= 0:
            raise ValueError("soft_nms_sigma must be positive")
        if self.max_dets_per_query < 1 or self.pre_nms_topk < 1:
            raise ValueError("detection caps must be >= 1")


def _rank(dets: list[Detection]) -> list[Detection]:
    # stable: ties keep input order
    return sorted(dets, key=lambda d: -d.conf)


def match_greedy(dets: list[Detection], gts: list[Annotation], thr: float) -> np.ndarray:
    """True-positive flags for ``dets`` in descending-confidence order."""
    by_video: dict[str, list[int]] = defaultdict(list)
    for j, g in enumerate(gts):
        by_video[g.video_id].append(j)
    used = np.zeros(len(gts), dtype=bool)
    tp = np.zeros(len(dets), dtype=bool)
    for i, d in enumerate(dets):
        best, best_j = -1.0, -1
        for j in by_video.get(d.video_id, ()):
            if used[j]:
                continue
            ov = tiou(d.segment, gts[j].segment)
            if ov >= thr and ov > best:
                best, best_j = ov, j
        if best_j >= 0:
            used[best_j] = True
            tp[i] = True
    return tp


def interpolated_ap(tp: np.ndarray, num_gt: int) -> float:
    """101-point interpolated area under the precision/recall curve."""
    if num_gt == 0:
        raise ValueError("AP undefined without ground truth")
    if tp.size == 0:
        return 0.0
    ctp = np.cumsum(tp)
    recall = ctp / num_gt
    precision = ctp / np.arange(1, tp.size + 1)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    vals = np.where(idx < tp.size, envelope[np.minimum(idx, tp.size - 1)], 0.0)
    return math.fsum(vals.tolist()) / RECALL_POINTS.size


def average_precision(dets: list[Detection], gts: list[Annotation], tiou_thr: float) -> float | None:
    """AP of one query pooled over videos; ``None`` when there is no ground truth."""
    if not gts:
        return None
    ranked = _rank(dets)
    return interpolated_ap(match_greedy(ranked, gts, tiou_thr), len(gts))


@dataclass
class MapReport:
    map_per_threshold: dict[float, float]
    ap_per_query: dict[float, dict[str, float]]
    mean_map: float
    map_at_50: float

    def as_dict(self) -> dict:
        out = {f"mAP@{t:g}": v for t, v in self.map_per_threshold.items()}
        out["mAP"] = self.mean_map
        out["mAP@0.5"] = self.map_at_50
        return out


def evaluate_map(dets: list[Detection], gts: list[Annotation], cfg: EvalConfig) -> MapReport:
    if not gts:
        raise ValueError("evaluate_map needs at least one ground-truth segment")
    gt_by_q: dict[str, list[Annotation]] = defaultdict(list)
    for g in gts:
        gt_by_q[g.query_id].append(g)
    det_by_q: dict[str, list[Detection]] = defaultdict(list)
    for d in dets:
        det_by_q[d.query_id].append(d)
    thresholds = list(cfg.tiou_thresholds)
    extra = [] if any(abs(t - 0.5) < 1e-12 for t in thresholds) else [0.5]
    per_thr: dict[float, float] = {}
    per_q: dict[float, dict[str, float]] = {}
    for thr in thresholds + extra:
        aps = {q: average_precision(det_by_q.get(q, []), g, thr) for q, g in sorted(gt_by_q.items())}
        per_q[thr] = aps
        per_thr[thr] = float(np.mean(list(aps.values())))
    at50 = next(v for t, v in per_thr.items() if abs(t - 0.5) < 1e-12)
    grid = {t: per_thr[t] for t in thresholds}
    return MapReport(grid, per_q, float(np.mean(list(grid.values()))), at50)


def evaluate_recall(dets: list[Detection], gts: list[Annotation], ks, tiou_thrs) -> dict[str, float]:
    """``R{k}@{thr}``: share of ground-truth instances hit by any of the top-k detections of their (video, query)."""
    if not gts:
        return {f"R{k}@{t:g}": float("nan") for k in ks for t in tiou_thrs}
    grouped: dict[tuple[str, str], list[Detection]] = defaultdict(list)
    for d in dets:
        grouped[(d.video_id, d.query_id)].append(d)
    for key in grouped:
        grouped[key].sort(key=lambda d: (-d.conf, d.start, d.end))
    out = {}
    for k in ks:
        for thr in tiou_thrs:
            hit = 0
            for g in gts:
                top = grouped.get((g.video_id, g.query_id), [])[:k]
                if any(tiou(d.segment, g.segment) >= thr for d in top):
                    hit += 1
            out[f"R{k}@{thr:g}"] = hit / len(gts)
    return out


__all__ = [
    "EvalConfig", "MapReport", "Segment", "average_precision", "evaluate_map", "evaluate_recall",
    "interpolated_ap", "match_greedy",
]

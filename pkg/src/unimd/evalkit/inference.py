from __future__ import annotations

import numpy as np

from ..datamodel.types import QueryCatalog, QueryEmbedding, Segment, Task, VideoRecord
from ..model.decode import decode_dense
from ..model.network import UniMD
from ..numcore import no_grad
from .metrics import EvalConfig, evaluate_map, evaluate_recall
from .postprocess import Detection, soft_nms_arrays


def detect(model: UniMD, feats: np.ndarray, feats_per_sec: float, queries: list[QueryEmbedding],
           cfg: EvalConfig, video_id: str, duration: float | None = None,
           index_base: int = 0) -> list[Detection]:
    """Run the model on one video and post-process every query (threshold, top-k, Soft-NMS)."""
    if not queries:
        return []
    duration = feats.shape[0] / feats_per_sec if duration is None else duration
    g = np.stack([q.vec for q in queries]).astype(model.cls_bias.data.dtype)
    with no_grad():
        dense = model(feats.astype(model.cls_bias.data.dtype), g)
    starts, ends, confs, qidx = decode_dense(dense, feats_per_sec, duration)
    out: list[Detection] = []
    for qi, q in enumerate(queries):
        sel = np.nonzero((qidx == qi) & (confs >= cfg.score_threshold))[0]
        if sel.size > cfg.pre_nms_topk:
            top = np.lexsort((starts[sel], -confs[sel]))[: cfg.pre_nms_topk]
            sel = sel[top]
        order, final = soft_nms_arrays(starts[sel], ends[sel], confs[sel], cfg.soft_nms_sigma, cfg.nms_score_floor)
        for i, s in zip(order[: cfg.max_dets_per_query], final[: cfg.max_dets_per_query]):
            j = sel[i]
            out.append(Detection(video_id, q.query_id, Segment(float(starts[j]), float(ends[j])),
                                 float(min(1.0, max(0.0, s))), index_base + qi))
    return out


def predict_dataset(model: UniMD, videos: list[VideoRecord], catalog: QueryCatalog, cfg: EvalConfig,
                    tasks=(Task.TAD, Task.MR)) -> dict[Task, list[Detection]]:
    """Detections per task. Each video is encoded once for all of its queries."""
    preds: dict[Task, list[Detection]] = {t: [] for t in tasks}
    n_tad = catalog.num_classes
    for v in videos:
        queries: list[QueryEmbedding] = []
        use_tad = Task.TAD in tasks and v.has_tad
        use_mr = Task.MR in tasks and v.has_mr
        if use_tad:
            queries += catalog.tad_queries
        if use_mr:
            queries += catalog.mr_queries_by_video.get(v.video_id, [])
        if not queries:
            continue
        seq = v.features
        dets = detect(model, seq.feats, seq.feats_per_sec, queries, cfg, v.video_id, v.duration_sec)
        for d in dets:
            task = Task.TAD if use_tad and d.query_index < n_tad else Task.MR
            preds[task].append(d)
    return preds


def evaluate_model(model: UniMD, videos: list[VideoRecord], catalog: QueryCatalog, cfg: EvalConfig,
                   tasks=(Task.TAD, Task.MR)) -> dict:
    """Metric report ``{"tad": {...} | None, "mr": {...} | None}``; a task without ground truth is None."""
    preds = predict_dataset(model, videos, catalog, cfg, tasks)
    report: dict = {"tad": None, "mr": None}
    thrs = cfg.tiou_thresholds
    if Task.TAD in tasks:
        gts = [a for v in videos for a in v.tad]
        if gts:
            r = evaluate_map(preds[Task.TAD], gts, cfg).as_dict()
            r.update(evaluate_recall(preds[Task.TAD], gts, cfg.recall_ks, sorted(set(thrs) | {0.5})))
            report["tad"] = r
    if Task.MR in tasks:
        gts = [a for v in videos for a in v.mr]
        if gts:
            report["mr"] = evaluate_recall(preds[Task.MR], gts, cfg.recall_ks, sorted(set(thrs) | {0.5}))
    return report

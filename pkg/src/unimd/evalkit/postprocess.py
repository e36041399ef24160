from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..datamodel.types import Segment


@dataclass(frozen=True)
class Detection:
    video_id: str
    query_id: str
    segment: Segment
    conf: float
    query_index: int = 0

    def __post_init__(self):
        if not 0.0 <= self.conf <= 1.0:
            raise ValueError(f"confidence {self.conf} outside [0, 1]")

    @property
    def start(self) -> float:
        return self.segment.start_sec

    @property
    def end(self) -> float:
        return self.segment.end_sec

    def to_json(self) -> dict:
        return {"video_id": self.video_id, "query_id": self.query_id,
                "start_sec": self.start, "end_sec": self.end, "conf": self.conf}


def tiou(a: Segment, b: Segment) -> float:
    inter = max(0.0, min(a.end_sec, b.end_sec) - max(a.start_sec, b.start_sec))
    union = max(a.end_sec, b.end_sec) - min(a.start_sec, b.start_sec)
    return inter / union if union > 0 else 0.0


def tiou_many(start: float, end: float, starts: np.ndarray, ends: np.ndarray) -> np.ndarray:
    inter = np.clip(np.minimum(end, ends) - np.maximum(start, starts), 0.0, None)
    union = np.maximum(end, ends) - np.minimum(start, starts)
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def soft_nms_arrays(starts, ends, scores, sigma: float = 0.5, score_floor: float = 0.0):
    """Gaussian Soft-NMS over one (video, query) group.

    Returns ``(order, final_scores)``: indices into the inputs in selection order and
    the score each had when selected. Ties pick the earlier start, then the earlier end.
    """
    starts = np.asarray(starts, dtype=np.float64)
    ends = np.asarray(ends, dtype=np.float64)
    cur = np.array(scores, dtype=np.float64)
    alive = np.nonzero(cur >= score_floor)[0]
    order, final = [], []
    while alive.size:
        s = cur[alive]
        pick = np.lexsort((ends[alive], starts[alive], -s))[0]
        i = alive[pick]
        order.append(int(i))
        final.append(float(cur[i]))
        alive = np.delete(alive, pick)
        if not alive.size:
            break
        ov = tiou_many(starts[i], ends[i], starts[alive], ends[alive])
        cur[alive] *= np.exp(-(ov * ov) / sigma)
        alive = alive[cur[alive] >= score_floor]
    return np.asarray(order, dtype=int), np.asarray(final)


def soft_nms(dets: list[Detection], sigma: float = 0.5, score_floor: float = 0.0) -> list[Detection]:
    if not dets:
        return []
    keys = {(d.video_id, d.query_id) for d in dets}
    if len(keys) > 1:
        raise ValueError(f"soft_nms expects one (video, query) group, got {len(keys)}")
    order, final = soft_nms_arrays([d.start for d in dets], [d.end for d in dets], [d.conf for d in dets],
                                   sigma, score_floor)
    return [Detection(dets[i].video_id, dets[i].query_id, dets[i].segment, float(s), dets[i].query_index)
            for i, s in zip(order, final)]


def filter_topk(dets: list[Detection], score_threshold: float, k: int) -> list[Detection]:
    """Drop detections under the threshold and keep the k most confident.

    Equal confidences go to the earlier start, then the smaller query index.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    kept = [d for d in dets if d.conf >= score_threshold]
    kept.sort(key=lambda d: (-d.conf, d.start, d.query_index))
    return kept[:k]


def write_detections(path, dets: list[Detection]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for d in dets:
            f.write(json.dumps(d.to_json()) + "\n")


def read_detections(path) -> list[Detection]:
    out = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            r = json.loads(line)
            out.append(Detection(r["video_id"], r["query_id"], Segment(r["start_sec"], r["end_sec"]), r["conf"]))
    return out

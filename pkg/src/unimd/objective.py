"""Label assignment and training losses.

Classification uses a sigmoid focal loss and regression ``1 - IoU`` over offset
pairs; the per-task loss gates the regression term by the positive mask, and
the joint objective is ``lambda_tad * L_tad + lambda_mr * L_mr``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .model.network import DenseOutput
from .numcore import Tensor, ops

log = logging.getLogger(__name__)

CONF_EPS = 1e-6


@dataclass
class LossWeights:
    lambda_tad: float = 3.0
    lambda_mr: float = 1.0

    def __post_init__(self):
        if self.lambda_tad < 0 or self.lambda_mr < 0:
            raise ValueError("loss weights must be non-negative")
        if self.lambda_tad == 0 and self.lambda_mr == 0:
            raise ValueError("loss weights cannot both be zero")


@dataclass
class TargetSegment:
    query: int  # column in the dense output
    start: float  # feature-step units
    end: float
    ann_id: int = -1


@dataclass
class AssignmentMask:
    positive: np.ndarray  # (N, Q) bool, N = sum of level lengths
    targets: np.ndarray  # (N, Q, 2) start/end offsets in stride units (zero where negative)
    ann_id: np.ndarray  # (N, Q) int, -1 where negative
    level_offsets: list[int]
    strides: list[int]

    @property
    def num_positives(self) -> int:
        return int(self.positive.sum())

    def level_slice(self, l: int) -> slice:
        return slice(self.level_offsets[l], self.level_offsets[l + 1])


def assign_targets(
    segments: list[TargetSegment],
    lengths: list[int],
    strides: list[int],
    reg_ranges,
    num_queries: int,
    center_radius: float = 1.5,
) -> AssignmentMask:
    """Mark (level, step, query) cells whose step center can regress a segment.

    A cell is positive for a segment of its query when its center lies inside
    the segment and within ``center_radius * stride`` of the segment midpoint,
    and the larger of its two distances falls in the level's ``(lo, hi]`` range.
    When several segments of one query qualify, the shortest wins.
    """
    offsets = np.concatenate([[0], np.cumsum(lengths)]).astype(int).tolist()
    n = offsets[-1]
    positive = np.zeros((n, num_queries), dtype=bool)
    targets = np.zeros((n, num_queries, 2))
    ann_id = np.full((n, num_queries), -1, dtype=int)
    best_len = np.full((n, num_queries), np.inf)
    best_key = np.full((n, num_queries, 2), np.inf)

    for k, seg in enumerate(segments):
        if not seg.end > seg.start:
            continue
        mid = 0.5 * (seg.start + seg.end)
        seg_len = seg.end - seg.start
        hits = 0
        for l, (t_l, stride) in enumerate(zip(lengths, strides)):
            lo, hi = reg_ranges[l]
            c = (np.arange(t_l) + 0.5) * stride
            left = c - seg.start
            right = seg.end - c
            reach = np.maximum(left, right)
            ok = (left >= 0) & (right >= 0)
            ok &= np.abs(c - mid) <= center_radius * stride
            ok &= (reach > lo) & (reach <= hi)
            rows = np.nonzero(ok)[0] + offsets[l]
            if rows.size == 0:
                continue
            q = seg.query
            cur_len = best_len[rows, q]
            cur_key = best_key[rows, q]
            better = (seg_len < cur_len) | (
                (seg_len == cur_len)
                & ((seg.start < cur_key[:, 0]) | ((seg.start == cur_key[:, 0]) & (seg.end < cur_key[:, 1])))
            )
            rows = rows[better]
            t_idx = rows - offsets[l]
            cl = c[t_idx]
            positive[rows, q] = True
            targets[rows, q, 0] = (cl - seg.start) / stride
            targets[rows, q, 1] = (seg.end - cl) / stride
            ann_id[rows, q] = seg.ann_id if seg.ann_id >= 0 else k
            best_len[rows, q] = seg_len
            best_key[rows, q] = (seg.start, seg.end)
            hits += rows.size
        if hits == 0:
            log.debug("segment (%.2f, %.2f) of query %d matched no pyramid level", seg.start, seg.end, seg.query)
    return AssignmentMask(positive, targets, ann_id, offsets, list(strides))


def flatten_levels(dense: DenseOutput) -> tuple[Tensor, Tensor]:
    """Stack levels: conf (N, Q) and offsets (N, Q, 2)."""
    conf = ops.concat(dense.conf, axis=0) if len(dense.conf) > 1 else dense.conf[0]
    off = ops.concat(dense.offsets, axis=0) if len(dense.offsets) > 1 else dense.offsets[0]
    return conf, off


def focal_loss(conf: Tensor, positive: np.ndarray, alpha: float = 0.25, gamma: float = 2.0) -> Tensor:
    """Sigmoid focal loss summed over steps, normalized per query by max(1, #positives), averaged over queries."""
    if conf.shape != positive.shape:
        raise ValueError(f"conf {conf.shape} vs mask {positive.shape}")
    y = positive.astype(conf.data.dtype)
    p = ops.clip(conf, CONF_EPS, 1.0 - CONF_EPS)
    q = ops.sub(1.0, p)
    pos_term = ops.mul(ops.mul(ops.power(q, gamma), ops.log(p)), -alpha * y)
    neg_term = ops.mul(ops.mul(ops.power(p, gamma), ops.log(q)), -(1.0 - alpha) * (1.0 - y))
    per_query = ops.sum(ops.add(pos_term, neg_term), axis=0)
    norm = 1.0 / np.maximum(1.0, positive.sum(axis=0))
    return ops.mean(ops.mul(per_query, norm.astype(conf.data.dtype)))


def iou_loss(pred: Tensor, target: np.ndarray) -> Tensor:
    """Per-positive ``1 - IoU`` of two segments sharing an anchor point, given (start, end) distances."""
    target = np.asarray(target, dtype=pred.data.dtype)
    inter = ops.sum(ops.minimum(pred, target), axis=-1)
    union = ops.sum(ops.maximum(pred, target), axis=-1)
    return ops.sub(1.0, ops.div(inter, union))


@dataclass
class TaskLoss:
    total: Tensor
    cls: Tensor
    reg: Tensor | None
    num_positives: int


def task_loss(dense: DenseOutput, mask: AssignmentMask, alpha: float = 0.25, gamma: float = 2.0) -> TaskLoss:
    conf, off = flatten_levels(dense)
    if conf.shape != mask.positive.shape:
        raise ValueError(f"dense output {conf.shape} and assignment {mask.positive.shape} disagree")
    cls = focal_loss(conf, mask.positive, alpha, gamma)
    rows, cols = np.nonzero(mask.positive)
    if rows.size == 0:
        return TaskLoss(cls, cls, None, 0)
    pred = ops.index(off, (rows, cols))  # (P, 2)
    reg = ops.mean(iou_loss(pred, mask.targets[rows, cols]))
    return TaskLoss(ops.add(cls, reg), cls, reg, int(rows.size))


def total_loss(l_tad, l_mr, weights: LossWeights):
    """``lambda_tad * l_tad + lambda_mr * l_mr``; a missing task (None) contributes nothing."""
    terms = []
    if l_tad is not None:
        terms.append(ops.mul(l_tad, weights.lambda_tad) if isinstance(l_tad, Tensor) else weights.lambda_tad * l_tad)
    if l_mr is not None:
        terms.append(ops.mul(l_mr, weights.lambda_mr) if isinstance(l_mr, Tensor) else weights.lambda_mr * l_mr)
    if not terms:
        return 0.0
    out = terms[0]
    for t in terms[1:]:
        out = ops.add(out, t) if isinstance(out, Tensor) or isinstance(t, Tensor) else out + t
    return out

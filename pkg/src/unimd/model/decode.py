from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .network import DenseOutput


@dataclass(frozen=True)
class RawDetection:
    start_sec: float
    end_sec: float
    conf: float
    query_index: int


def decode_step(stride: int, t: int, d_s: float, d_e: float, feats_per_sec: float, duration: float):
    """Segment in seconds for one (level, step) prediction, or None when it clamps to nothing."""
    c = (t + 0.5) * stride
    s = max(0.0, (c - d_s * stride) / feats_per_sec)
    e = min(duration, (c + d_e * stride) / feats_per_sec)
    if not s < e:
        return None
    return s, e


def decode_dense(dense: DenseOutput, feats_per_sec: float, duration: float):
    """Vectorized decode of every (level, step, query) prediction.

    Returns ``(starts, ends, confs, query_index)`` flat arrays, degenerate segments removed.
    """
    starts, ends, confs, qidx = [], [], [], []
    for conf, off, stride in zip(dense.conf, dense.offsets, dense.strides):
        c = conf.data
        o = off.data
        t_l, q = c.shape
        centers = (np.arange(t_l, dtype=np.float64) + 0.5)[:, None] * stride
        s = np.maximum(0.0, (centers - o[..., 0] * stride) / feats_per_sec)
        e = np.minimum(duration, (centers + o[..., 1] * stride) / feats_per_sec)
        starts.append(s.reshape(-1))
        ends.append(e.reshape(-1))
        confs.append(c.reshape(-1))
        qidx.append(np.broadcast_to(np.arange(q), (t_l, q)).reshape(-1))
    if not starts:
        empty = np.zeros(0)
        return empty, empty, empty, np.zeros(0, dtype=int)
    s, e, c, qi = (np.concatenate(a) for a in (starts, ends, confs, qidx))
    keep = s < e
    return s[keep], e[keep], c[keep].astype(np.float64), qi[keep]

"""Slow, obviously-correct reference implementations used as test oracles.

Nothing here imports the package's numerical code; inputs and outputs are plain
numpy arrays, floats and tuples.
"""
from __future__ import annotations

import math

import numpy as np


def conv1d_ref(x, w, bias=None, stride=1, pad=0, groups=1):
    T, cin = x.shape
    K, cin_g, cout = w.shape
    cout_g = cout // groups
    t_out = (T + 2 * pad - K) // stride + 1
    out = np.zeros((t_out, cout))
    for t in range(t_out):
        for o in range(cout):
            g = o // cout_g
            acc = 0.0
            for k in range(K):
                src = t * stride + k - pad
                if src < 0 or src >= T:
                    continue
                for c in range(cin_g):
                    acc += x[src, g * cin_g + c] * w[k, c, o]
            out[t, o] = acc + (bias[o] if bias is not None else 0.0)
    return out


def linear_ref(x, w, b=None):
    rows = x.reshape(-1, x.shape[-1])
    out = np.zeros((rows.shape[0], w.shape[1]))
    for i in range(rows.shape[0]):
        for j in range(w.shape[1]):
            acc = 0.0
            for k in range(w.shape[0]):
                acc += rows[i, k] * w[k, j]
            out[i, j] = acc + (b[j] if b is not None else 0.0)
    return out.reshape(x.shape[:-1] + (w.shape[1],))


def layernorm_ref(x, gamma, beta, eps=1e-5):
    out = np.zeros_like(x)
    for t in range(x.shape[0]):
        row = [float(v) for v in x[t]]
        mu = sum(row) / len(row)
        var = sum((v - mu) ** 2 for v in row) / len(row)
        for c, v in enumerate(row):
            out[t, c] = (v - mu) / math.sqrt(var + eps) * gamma[c] + beta[c]
    return out


def pyramid_ref(T, levels):
    out = []
    for _ in range(levels):
        T = -(-T // 2)
        out.append(T)
    return out


def tiou_ref(a, b):
    inter = max(0.0, min(a[1], b[1]) - max(a[0], b[0]))
    union = max(a[1], b[1]) - min(a[0], b[0])
    return inter / union if union > 0 else 0.0


def soft_nms_ref(dets, sigma, floor=0.0):
    """dets: list of (start, end, score). Returns [(original index, final score)] in selection order."""
    pool = [[i, s, e, c] for i, (s, e, c) in enumerate(dets) if c >= floor]
    out = []
    while pool:
        best = 0
        for j in range(1, len(pool)):
            a, b = pool[j], pool[best]
            if (a[3], -a[1], -a[2]) > (b[3], -b[1], -b[2]):
                best = j
        sel = pool.pop(best)
        out.append((sel[0], sel[3]))
        keep = []
        for item in pool:
            ov = tiou_ref((sel[1], sel[2]), (item[1], item[2]))
            item[3] = item[3] * math.exp(-(ov * ov) / sigma)
            if item[3] >= floor:
                keep.append(item)
        pool = keep
    return out


def greedy_match_ref(dets, gts, thr):
    """dets: [(video, start, end, conf)] already ranked; gts: [(video, start, end)]. Returns TP flags."""
    used = [False] * len(gts)
    flags = []
    for v, s, e, _ in dets:
        best, best_j = -1.0, -1
        for j, (gv, gs, ge) in enumerate(gts):
            if used[j] or gv != v:
                continue
            ov = tiou_ref((s, e), (gs, ge))
            if ov >= thr and ov > best:
                best, best_j = ov, j
        if best_j >= 0:
            used[best_j] = True
        flags.append(best_j >= 0)
    return flags


def ap_ref(dets, gts, thr):
    """101-point interpolated AP by explicit enumeration of the precision/recall curve."""
    if not gts:
        return None
    ranked = sorted(dets, key=lambda d: -d[3])  # sorted() is stable
    flags = greedy_match_ref(ranked, gts, thr)
    prec, rec = [], []
    tp = 0
    for i, f in enumerate(flags):
        tp += f
        prec.append(tp / (i + 1))
        rec.append(tp / len(gts))
    vals = []
    for k in range(101):
        r = np.linspace(0.0, 1.0, 101)[k]
        cands = [p for p, rr in zip(prec, rec) if rr >= r]
        vals.append(max(cands) if cands else 0.0)
    return math.fsum(vals) / 101


def recall_ref(dets, gts, k, thr):
    """dets: [(video, query, start, end, conf)], gts: [(video, query, start, end)]."""
    if not gts:
        return float("nan")
    hits = 0
    for gv, gq, gs, ge in gts:
        mine = [d for d in dets if d[0] == gv and d[1] == gq]
        mine.sort(key=lambda d: (-d[4], d[2], d[3]))
        if any(tiou_ref((d[2], d[3]), (gs, ge)) >= thr for d in mine[:k]):
            hits += 1
    return hits / len(gts)


def adamw_ref(p, g, m, v, step, lr, b1, b2, eps, wd):
    """One decoupled-weight-decay Adam update on plain floats."""
    m = b1 * m + (1 - b1) * g
    v = b2 * v + (1 - b2) * g * g
    mh = m / (1 - b1**step)
    vh = v / (1 - b2**step)
    p = p * (1 - lr * wd) - lr * mh / (math.sqrt(vh) + eps)
    return p, m, v

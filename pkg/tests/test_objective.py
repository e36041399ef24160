import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import tiou_ref
from unimd.diagnostics import model_loss_fn
from unimd.model import ModelConfig, default_reg_ranges
from unimd.model.network import DenseOutput
from unimd.numcore import Tensor, grad_check
from unimd.objective import (
    CONF_EPS,
    LossWeights,
    TargetSegment,
    assign_targets,
    focal_loss,
    iou_loss,
    task_loss,
    total_loss,
)

STRIDES = [2, 4, 8]
RANGES = default_reg_ranges(3)  # (0,4], (4,8], (8,inf)


def brute_assign(segments, lengths, strides, ranges, nq, radius=1.5):
    out = {}
    for l, (t_l, stride) in enumerate(zip(lengths, strides)):
        lo, hi = ranges[l]
        for t in range(t_l):
            c = (t + 0.5) * stride
            for q in range(nq):
                best = None
                for seg in segments:
                    if seg.query != q:
                        continue
                    a, b = c - seg.start, seg.end - c
                    mid = (seg.start + seg.end) / 2
                    if a < 0 or b < 0 or abs(c - mid) > radius * stride or not lo < max(a, b) <= hi:
                        continue
                    key = (seg.end - seg.start, seg.start, seg.end)
                    if best is None or key < best[0]:
                        best = (key, (a / stride, b / stride), seg.ann_id)
                if best is not None:
                    out[(l, t, q)] = best[1:]
    return out


def _as_dict(mask, lengths):
    out = {}
    for l in range(len(lengths)):
        sl = mask.level_slice(l)
        for t, q in zip(*np.nonzero(mask.positive[sl])):
            out[(l, int(t), int(q))] = (tuple(mask.targets[sl][t, q]), int(mask.ann_id[sl][t, q]))
    return out


def test_assign_span_4_12_level1():
    seg = TargetSegment(0, 4.0, 12.0, ann_id=0)
    lengths = [16, 8, 4]
    mask = _as_dict(assign_targets([seg], lengths, STRIDES, RANGES, 1), lengths)
    expect = brute_assign([seg], lengths, STRIDES, RANGES, 1)
    assert mask == expect
    # reach of (4, 12) is at most 8: only level 1 (stride 4) steps 1 and 2, centers 6 and 10
    assert mask == {(1, 1, 0): ((0.5, 1.5), 0), (1, 2, 0): ((1.5, 0.5), 0)}


def test_assign_empty():
    mask = assign_targets([], [16, 8, 4], STRIDES, RANGES, 2)
    assert mask.num_positives == 0 and mask.positive.shape == (28, 2)


def test_assign_nested_prefers_shorter():
    outer = TargetSegment(0, 0.0, 32.0, ann_id=0)
    inner = TargetSegment(0, 12.0, 20.0, ann_id=1)
    lengths = [16, 8, 4]
    mask = assign_targets([outer, inner], lengths, STRIDES, RANGES, 1, center_radius=100.0)
    got = _as_dict(mask, lengths)
    # level-1 steps inside the inner span are claimed by the shorter segment
    assert got[(1, 3, 0)][1] == 1 and got[(1, 4, 0)][1] == 1
    assert got == brute_assign([outer, inner], lengths, STRIDES, RANGES, 1, radius=100.0)


segment_lists = st.lists(
    st.tuples(st.integers(0, 2), st.floats(0, 60), st.floats(0.5, 40)).map(
        lambda v: (v[0], v[1], min(64.0, v[1] + v[2]))),
    max_size=6)


@given(segment_lists, st.sampled_from([0.5, 1.5, 3.0]), st.randoms(use_true_random=False))
def test_assign_matches_brute_force_and_order_invariant(raw, radius, rnd):
    segs = [TargetSegment(q, s, e, ann_id=i) for i, (q, s, e) in enumerate(raw) if e > s]
    lengths = [32, 16, 8]
    got = _as_dict(assign_targets(segs, lengths, STRIDES, RANGES, 3, radius), lengths)
    expect = brute_assign(segs, lengths, STRIDES, RANGES, 3, radius)
    assert got.keys() == expect.keys()
    for k, (tgt, ann) in expect.items():
        assert got[k][1] == ann
        np.testing.assert_allclose(got[k][0], tgt, atol=1e-12)
    shuffled = list(segs)
    rnd.shuffle(shuffled)
    again = _as_dict(assign_targets(shuffled, lengths, STRIDES, RANGES, 3, radius), lengths)
    # identical duplicate segments may trade annotation ids; positives and targets may not change
    assert {k: v[0] for k, v in again.items()} == {k: v[0] for k, v in got.items()}


@given(segment_lists)
def test_assign_invariants(raw):
    segs = [TargetSegment(q, s, e, ann_id=i) for i, (q, s, e) in enumerate(raw) if e > s]
    lengths = [32, 16, 8]
    mask = assign_targets(segs, lengths, STRIDES, RANGES, 3)
    for l in range(3):
        sl = mask.level_slice(l)
        lo, hi = RANGES[l]
        for t, q in zip(*np.nonzero(mask.positive[sl])):
            seg = segs[mask.ann_id[sl][t, q]]
            c = (t + 0.5) * STRIDES[l]
            assert seg.start <= c <= seg.end
            assert lo < mask.targets[sl][t, q].max() * STRIDES[l] <= hi


# ---- focal loss -----------------------------------------------------------

def test_focal_single_positive_closed_form():
    loss = focal_loss(Tensor(np.array([[0.5]])), np.array([[True]]), 0.25, 2.0).item()
    assert abs(loss - 0.25 * 0.25 * math.log(2)) < 1e-15
    assert abs(loss - 0.0433) < 1e-4


def test_focal_perfect_prediction():
    pos = np.array([[True, False], [False, False], [False, True]])
    assert focal_loss(Tensor(pos.astype(float)), pos).item() <= 1e-5


def test_focal_reduces_to_bce(rng):
    conf = rng.uniform(0.01, 0.99, size=(7, 3))
    pos = rng.random((7, 3)) < 0.3
    got = focal_loss(Tensor(conf), pos, alpha=0.5, gamma=0.0).item()
    per_query = []
    for q in range(3):
        bce = 0.0
        for t in range(7):
            p = conf[t, q]
            bce += -math.log(p) if pos[t, q] else -math.log(1 - p)
        per_query.append(0.5 * bce / max(1, pos[:, q].sum()))
    assert abs(got - sum(per_query) / 3) < 1e-10


def test_focal_clamps_extremes():
    # a positive at conf 0 and a negative at conf 1 both land on the clamp
    v = focal_loss(Tensor(np.array([[0.0, 1.0]])), np.array([[True, False]])).item()
    expect = (0.25 + 0.75) / 2 * (1 - CONF_EPS) ** 2 * -math.log(CONF_EPS)
    assert math.isfinite(v) and abs(v - expect) < 1e-9


# ---- IoU loss -------------------------------------------------------------

def test_iou_loss_examples():
    assert iou_loss(Tensor(np.array([[1.0, 2.0]])), np.array([[1.0, 2.0]])).item() == 0.0
    assert abs(iou_loss(Tensor(np.array([[1.0, 1.0]])), np.array([[3.0, 3.0]])).item() - 2 / 3) < 1e-15


@given(st.floats(0, 10), st.floats(0, 10), st.floats(0.01, 10), st.floats(0.01, 10), st.floats(0, 100))
def test_iou_loss_matches_decoded_segments(ds, de, ts, te, center):
    pred = np.array([[ds, de]])
    tgt = np.array([[ts, te]])
    got = iou_loss(Tensor(pred), tgt).item()
    expect = 1.0 - tiou_ref((center - ds, center + de), (center - ts, center + te))
    assert abs(got - expect) < 1e-12
    assert 0.0 <= got <= 1.0
    if ds + de > 1e-9:
        assert got < 1.0
    assert abs(iou_loss(Tensor(tgt), pred).item() - got) < 1e-12
    assert (got == 0.0) == (ds == ts and de == te)


# ---- task / total loss ----------------------------------------------------

def _dense(conf, off, strides):
    return DenseOutput([Tensor(c) for c in conf], [Tensor(o) for o in off], strides)


def test_task_loss_no_positives_is_focal(rng):
    conf = [rng.uniform(0.1, 0.9, size=(8, 2)), rng.uniform(0.1, 0.9, size=(4, 2))]
    off = [rng.uniform(0, 3, size=(8, 2, 2)), rng.uniform(0, 3, size=(4, 2, 2))]
    mask = assign_targets([], [8, 4], [2, 4], default_reg_ranges(2), 2)
    tl = task_loss(_dense(conf, off, [2, 4]), mask)
    assert tl.reg is None and tl.num_positives == 0
    assert tl.total.item() == focal_loss(Tensor(np.concatenate(conf)), mask.positive).item()


def test_task_loss_perfect():
    segs = [TargetSegment(0, 3.0, 9.0), TargetSegment(1, 10.0, 14.0)]
    mask = assign_targets(segs, [8, 4], [2, 4], default_reg_ranges(2), 2)
    assert mask.num_positives > 0
    conf = mask.positive.astype(float)
    dense = _dense([conf[:8], conf[8:]], [mask.targets[:8], mask.targets[8:]], [2, 4])
    assert task_loss(dense, mask).total.item() <= 1e-5


def test_task_loss_composition_oracle(rng):
    segs = [TargetSegment(0, 3.0, 9.0), TargetSegment(1, 2.0, 15.0), TargetSegment(1, 8.0, 11.0)]
    mask = assign_targets(segs, [8, 4], [2, 4], default_reg_ranges(2), 2, center_radius=3.0)
    conf = rng.uniform(0.05, 0.95, size=(12, 2))
    off = rng.uniform(0.1, 4, size=(12, 2, 2))
    got = task_loss(_dense([conf[:8], conf[8:]], [off[:8], off[8:]], [2, 4]), mask).total.item()

    cls = 0.0
    for q in range(2):
        acc = 0.0
        for n in range(12):
            p = conf[n, q]
            if mask.positive[n, q]:
                acc += -0.25 * (1 - p) ** 2 * math.log(p)
            else:
                acc += -0.75 * p**2 * math.log(1 - p)
        cls += acc / max(1, mask.positive[:, q].sum())
    cls /= 2
    ious = []
    for n, q in zip(*np.nonzero(mask.positive)):
        (a, b), (ta, tb) = off[n, q], mask.targets[n, q]
        ious.append(1 - (min(a, ta) + min(b, tb)) / (max(a, ta) + max(b, tb)))
    assert abs(got - (cls + sum(ious) / len(ious))) < 1e-10


def test_total_loss_examples():
    assert abs(total_loss(0.2, 0.5, LossWeights()) - 1.1) < 1e-15
    assert total_loss(0.2, 0.5, LossWeights(1, 1)) == 0.2 + 0.5
    assert total_loss(0.2, None, LossWeights()) == pytest.approx(0.6, abs=1e-15)
    t = total_loss(Tensor(np.array(0.2)), Tensor(np.array(0.5)), LossWeights(3, 1))
    assert abs(t.item() - 1.1) < 1e-15


@given(st.floats(0, 10), st.floats(0, 10), st.floats(0.1, 5), st.floats(0.1, 5), st.floats(0.01, 100))
def test_total_loss_scales_with_weights(lt, lm, wt, wm, k):
    a = total_loss(lt, lm, LossWeights(wt, wm))
    b = total_loss(lt, lm, LossWeights(k * wt, k * wm))
    assert b == pytest.approx(k * a, rel=1e-12, abs=1e-300)


def test_loss_weight_validation():
    with pytest.raises(ValueError):
        LossWeights(0, 0)
    with pytest.raises(ValueError):
        LossWeights(-1, 1)


def test_total_loss_gradient():
    cfg = ModelConfig(d_in=5, d_txt=4, d_model=4, CH=3, n_down=2, bifpn_layers=1, seed=5)
    model, fn = model_loss_fn(cfg, T=12, num_queries=2, seed=5)
    weighted = lambda: total_loss(fn(), fn(), LossWeights(3, 1))
    assert grad_check(weighted, model.parameters(), probe_count=2, h=(1e-2, 1e-3, 1e-4, 1e-5, 1e-6), seed=5) < 1e-4

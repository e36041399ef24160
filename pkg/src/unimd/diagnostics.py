"""Finite-difference checks for every primitive, every layer and the composed model."""
from __future__ import annotations

from contextlib import contextmanager
from dataclasses import replace
from typing import Callable

import numpy as np

from .model import ModelConfig, build_model
from .model.layers import Conv1d, LayerNorm, Linear
from .model.network import BiFPNLayer, ConvNeXtBlock, Downsample, FusionNode, HeadTrunk, QueryTransform
from .numcore import Tensor, grad_check_report, ops, parameter
from .objective import TargetSegment, assign_targets, flatten_levels, task_loss

STEPS = (1e-2, 1e-3, 1e-4, 1e-5, 1e-6, 1e-7)


@contextmanager
def corrupt_backward(op_name: str | None, factor: float = 1.5):
    """Scale the gradient an op hands to its inputs; a negative control for the checker."""
    if op_name is None:
        yield
        return
    orig = getattr(ops, op_name)

    def wrapped(*args, **kwargs):
        out = orig(*args, **kwargs)
        if out._backward is not None:
            bw = out._backward
            out._backward = lambda g: tuple(None if v is None else v * factor for v in bw(g))
        return out

    setattr(ops, op_name, wrapped)
    try:
        yield
    finally:
        setattr(ops, op_name, orig)


def _readout(out: Tensor, rng) -> Callable[[Tensor], Tensor]:
    w = rng.normal(size=out.shape)
    return lambda y: ops.sum(ops.mul(y, w))


def _case(build: Callable[[], Tensor], params: list[Tensor], rng, probes: int, seed: int) -> float:
    read = _readout(build(), rng)
    return grad_check_report(lambda: read(build()), params, probe_count=probes, h=STEPS, seed=seed).max_rel_err


def primitive_cases(rng) -> dict[str, tuple[Callable[[], Tensor], list[Tensor]]]:
    def p(*shape, lo=None):
        a = rng.normal(size=shape)
        if lo is not None:
            a = lo + np.abs(a)
        return parameter(a)

    a, b = p(5, 4), p(5, 4)
    pos = p(5, 4, lo=0.5)
    s = p(1)
    x = p(11, 6)
    w1, w2, wd, wb = p(6, 5), p(3, 6, 4), p(3, 1, 6), p(3, 3, 4)
    bias4, bias5, bias6 = p(4), p(5), p(6)
    gam, bet = p(6), p(6)
    short = p(6, 4)
    cases = {
        "add": (lambda: ops.add(a, b), [a, b]),
        "sub": (lambda: ops.sub(a, b), [a, b]),
        "mul": (lambda: ops.mul(a, b), [a, b]),
        "div": (lambda: ops.div(a, pos), [a, pos]),
        "scale": (lambda: ops.scale(a, s), [a, s]),
        "neg": (lambda: ops.neg(a), [a]),
        "relu": (lambda: ops.relu(a), [a]),
        "sigmoid": (lambda: ops.sigmoid(a), [a]),
        "gelu": (lambda: ops.gelu(a), [a]),
        "log": (lambda: ops.log(pos), [pos]),
        "exp": (lambda: ops.exp(a), [a]),
        "power": (lambda: ops.power(pos, 2.5), [pos]),
        "clip": (lambda: ops.clip(a, -0.5, 0.5), [a]),
        "minimum": (lambda: ops.minimum(a, b), [a, b]),
        "maximum": (lambda: ops.maximum(a, b), [a, b]),
        "sum": (lambda: ops.sum(ops.mul(a, a), axis=0), [a]),
        "mean": (lambda: ops.mean(ops.mul(a, b), axis=1), [a, b]),
        "reshape": (lambda: ops.mul(ops.reshape(a, (4, 5)), ops.reshape(b, (4, 5))), [a, b]),
        "transpose": (lambda: ops.mul(ops.transpose(a), ops.transpose(b)), [a, b]),
        "concat": (lambda: ops.mul(ops.concat([a, b], axis=0), ops.concat([b, a], axis=0)), [a, b]),
        "index": (lambda: ops.mul(ops.index(a, (np.array([0, 2, 2]), np.array([1, 3, 1]))), 2.0), [a]),
        "l2_normalize": (lambda: ops.l2_normalize(a, axis=-1), [a]),
        "linear": (lambda: ops.linear(x, w1, bias5), [x, w1, bias5]),
        "matmul": (lambda: ops.matmul(x, w1), [x, w1]),
        "layernorm": (lambda: ops.layernorm(x, gam, bet), [x, gam, bet]),
        "conv1d": (lambda: ops.conv1d(x, w2, bias4, stride=1, pad=1), [x, w2, bias4]),
        "conv1d_stride2": (lambda: ops.conv1d(x, w2, None, stride=2, pad=1), [x, w2]),
        "conv1d_depthwise": (lambda: ops.conv1d(x, wd, bias6, stride=1, pad=1, groups=6), [x, wd, bias6]),
        "conv1d_groups2": (lambda: ops.conv1d(x, wb, None, stride=1, pad=1, groups=2), [x, wb]),
        "max_pool1d": (lambda: ops.max_pool1d(x, 3, 2, 1), [x]),
        "upsample_nearest": (lambda: ops.upsample_nearest(short, 11), [short]),
    }
    return cases


def layer_cases(rng) -> dict[str, tuple[Callable[[], Tensor], list[Tensor]]]:
    c = 8
    x = Tensor(rng.normal(size=(16, c)))
    levels = [Tensor(rng.normal(size=(n, c))) for n in (16, 8, 4)]
    g = Tensor(rng.normal(size=(3, 12)))
    small = ModelConfig(d_in=c, d_txt=12, d_model=c, CH=6, K=3, n_fc_reg=3)
    mods = {
        "Linear": (Linear(c, 5, rng), lambda m: m(x)),
        "Conv1d": (Conv1d(c, 5, 3, rng), lambda m: m(x)),
        "LayerNorm": (LayerNorm(c), lambda m: m(x)),
        "ConvNeXtBlock": (ConvNeXtBlock(c, rng, kernel=7, expansion=4), lambda m: m(x)),
        "Downsample": (Downsample(c, rng), lambda m: m(x)),
        "FusionNode": (FusionNode(2, c, rng), lambda m: m([x, x])),
        "BiFPNLayer": (BiFPNLayer(3, c, rng), lambda m: ops.concat(m(levels), axis=0)),
        "HeadTrunk": (HeadTrunk(c, [c, c], rng), lambda m: m(x)),
        "QueryTransform": (QueryTransform(small, rng), lambda m: m(ops.l2_normalize(g))),
    }
    # random affine / fusion weights so the check does not sit at the all-ones init
    for mod, _ in mods.values():
        for prm in mod.parameters():
            if prm.ndim < 2:
                prm.data[...] = rng.normal(size=prm.shape)
                if prm.shape == (2,) or prm.shape == (3,):
                    prm.data[...] = 0.5 + np.abs(prm.data)
    return {k: ((lambda m=m, f=f: f(m)), m.parameters()) for k, (m, f) in mods.items()}


def _generic_point(model, rng) -> None:
    """Redraw vector parameters at unit scale.

    At init the regression kernel is ~1e-3, so most offsets sit within 1e-6 of
    the output ReLU kink and central differences straddle it.
    """
    for name, prm in model.named_parameters():
        if prm.ndim < 2:
            prm.data[...] = rng.normal(size=prm.shape)
            if ".weights" in name:  # fusion weights stay clear of their ReLU
                prm.data[...] = 0.5 + np.abs(prm.data)


def model_loss_fn(cfg: ModelConfig, T: int, num_queries: int, seed: int = 0):
    """Training objective plus a random readout of every output, at a generic parameter point."""
    rng = np.random.default_rng(seed)
    model = build_model(cfg)
    _generic_point(model, rng)
    x = rng.normal(size=(T, cfg.d_in))
    g = rng.normal(size=(num_queries, cfg.d_txt))
    dense = model(x, g)
    segs = []
    for q in range(num_queries):
        lo = int(rng.integers(0, T // 2))
        segs.append(TargetSegment(q, float(lo), float(lo + rng.integers(4, T // 2))))
    mask = assign_targets(segs, dense.lengths, dense.strides, cfg.reg_ranges, num_queries)
    conf, off = flatten_levels(dense)
    wc = rng.normal(size=conf.shape) / conf.shape[0]
    wo = rng.normal(size=off.shape) / off.shape[0]

    def fn():
        d = model(x, g)
        c, o = flatten_levels(d)
        readout = ops.add(ops.sum(ops.mul(c, wc)), ops.sum(ops.mul(o, wo)))
        return ops.add(task_loss(d, mask).total, readout)

    return model, fn


def gradcheck_model(cfg: ModelConfig, T: int = 64, num_queries: int = 3, probe_count: int = 3, seed: int = 0):
    model, fn = model_loss_fn(cfg, T, num_queries, seed)
    return grad_check_report(fn, model.parameters(), probe_count=probe_count, h=STEPS, seed=seed)


def gradcheck_all(cfg: ModelConfig, T: int = 64, num_queries: int = 3, probe_count: int = 3, seed: int = 0,
                  corrupt: str | None = None) -> dict[str, float]:
    """Worst relative error per primitive, per layer and for the composed model."""
    results: dict[str, float] = {}
    with corrupt_backward(corrupt):
        rng = np.random.default_rng(seed)
        for name, (build, params) in primitive_cases(rng).items():
            results[f"op:{name}"] = _case(build, params, rng, 4, seed)
        for name, (build, params) in layer_cases(rng).items():
            results[f"layer:{name}"] = _case(build, params, rng, probe_count, seed)
        results["model"] = gradcheck_model(replace(cfg), T, num_queries, probe_count, seed).max_rel_err
    return results

"""Differentiable primitives.

Broadcasting is deliberately limited: two operands must have equal shapes, or
one of them must hold a single element. Anything else needs an explicit
reshape/concat.
"""
from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, as_tensor, make_result


class ShapeError(ValueError):
    pass


def _const(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype))


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.asarray(g.sum(), dtype=g.dtype).reshape(shape)


def _check_binary(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape} (only scalar broadcasting)")


def _pad_rows(x: np.ndarray, pad: int, value: float = 0.0) -> np.ndarray:
    out = np.empty((x.shape[0] + 2 * pad,) + x.shape[1:], dtype=x.dtype)
    out[:pad] = value
    out[pad : pad + x.shape[0]] = x
    out[pad + x.shape[0] :] = value
    return out


def _binary_operands(a, b):
    if not isinstance(a, Tensor) and not isinstance(b, Tensor):
        raise TypeError("at least one operand must be a Tensor")
    if isinstance(a, Tensor):
        b = _const(b, a)
    else:
        a = _const(a, b)
    return a, b


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    _check_binary(a, b, "add")
    out = a.data + b.data

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_result(out, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    _check_binary(a, b, "sub")
    out = a.data - b.data

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return make_result(out, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    _check_binary(a, b, "mul")
    out = a.data * b.data

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_result(out, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    _check_binary(a, b, "div")
    out = a.data / b.data

    def bw(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape) if b.requires_grad else None
        return ga, gb

    return make_result(out, (a, b), bw, "div")


def scale(x: Tensor, s: Tensor) -> Tensor:
    """Multiply ``x`` by the single learnable scalar ``s``."""
    s = _const(s, x)
    if s.size != 1:
        raise ShapeError(f"scale expects a single-element factor, got shape {s.shape}")
    return mul(x, s)


def neg(x: Tensor) -> Tensor:
    return make_result(-x.data, (x,), lambda g: (-g,), "neg")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_result(np.where(mask, x.data, 0.0).astype(x.data.dtype), (x,), lambda g: (g * mask,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    out = np.exp(-np.logaddexp(0.0, -x.data)).astype(x.data.dtype)

    def bw(g):
        return (g * out * (1.0 - out),)

    return make_result(out, (x,), bw, "sigmoid")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    v = x.data
    v2 = v * v
    th = np.tanh(_GELU_C * v * (1.0 + 0.044715 * v2))
    half = 0.5 * (1.0 + th)
    out = v * half

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * v2)
        return (g * (half + 0.5 * v * (1.0 - th * th) * dinner),)

    return make_result(out, (x,), bw, "gelu")


def log(x: Tensor) -> Tensor:
    return make_result(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return make_result(out, (x,), lambda g: (g * out,), "exp")


def power(x: Tensor, p: float) -> Tensor:
    out = x.data**p

    def bw(g):
        if p == 0:
            return (np.zeros_like(g),)
        return (g * p * x.data ** (p - 1),)

    return make_result(out, (x,), bw, "power")


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    out = np.clip(x.data, lo, hi)
    inside = (x.data >= lo) & (x.data <= hi)
    return make_result(out, (x,), lambda g: (g * inside,), "clip")


def minimum(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    _check_binary(a, b, "minimum")
    pick_a = a.data <= b.data
    out = np.where(pick_a, a.data, b.data)

    def bw(g):
        return _unbroadcast(g * pick_a, a.shape), _unbroadcast(g * ~pick_a, b.shape)

    return make_result(out, (a, b), bw, "minimum")


def maximum(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    _check_binary(a, b, "maximum")
    pick_a = a.data >= b.data
    out = np.where(pick_a, a.data, b.data)

    def bw(g):
        return _unbroadcast(g * pick_a, a.shape), _unbroadcast(g * ~pick_a, b.shape)

    return make_result(out, (a, b), bw, "maximum")


_ELEMENTWISE = {
    "relu": relu,
    "sigmoid": sigmoid,
    "gelu": gelu,
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "scale": scale,
    "log": log,
    "exp": exp,
}


def elementwise(op_id: str, *args) -> Tensor:
    try:
        fn = _ELEMENTWISE[op_id]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op_id!r}") from None
    return fn(*args)


# ---------------------------------------------------------------------------
# reductions and shape plumbing
# ---------------------------------------------------------------------------


def sum(x: Tensor, axis=None) -> Tensor:  # noqa: A001
    out = np.asarray(x.data.sum(axis=axis), dtype=x.data.dtype)

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return make_result(out, (x,), bw, "sum")


def mean(x: Tensor, axis=None) -> Tensor:
    n = x.size if axis is None else x.shape[axis]
    return mul(sum(x, axis), 1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    out = x.data.reshape(shape)
    return make_result(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    out = np.ascontiguousarray(np.transpose(x.data, axes))
    inv = None if axes is None else np.argsort(axes)
    return make_result(out, (x,), lambda g: (np.transpose(g, inv),), "transpose")


def concat(xs, axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    out = np.concatenate([x.data for x in xs], axis=axis)
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return make_result(out, tuple(xs), bw, "concat")


def index(x: Tensor, idx) -> Tensor:
    """Basic or integer-array indexing; gradients scatter-add back."""
    out = np.array(x.data[idx], copy=True)

    basic = all(isinstance(i, (slice, int, type(None), type(Ellipsis)))
                for i in (idx if isinstance(idx, tuple) else (idx,)))

    def bw(g):
        full = np.zeros_like(x.data)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return make_result(out, (x,), bw, "index")


def l2_normalize(x: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    norm = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    norm = np.maximum(norm, eps)
    out = x.data / norm

    def bw(g):
        return ((g - out * (out * g).sum(axis=axis, keepdims=True)) / norm,)

    return make_result(out, (x,), bw, "l2_normalize")


# ---------------------------------------------------------------------------
# dense layers
# ---------------------------------------------------------------------------


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` with ``x`` of shape (..., C_in) and ``weight`` (C_in, C_out)."""
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"linear: input {x.shape} vs weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise ShapeError(f"linear: bias {bias.shape} vs weight {weight.shape}")
    x2 = x.data.reshape(-1, weight.shape[0])
    out2 = x2 @ weight.data
    if bias is not None:
        out2 = out2 + bias.data
    out = out2.reshape(x.shape[:-1] + (weight.shape[1],))
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        g2 = g.reshape(-1, weight.shape[1])
        gx = (g2 @ weight.data.T).reshape(x.shape) if x.requires_grad else None
        gw = x2.T @ g2 if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return make_result(out, parents, bw, "linear")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    return linear(a, b)


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize every row (last axis) to zero mean / unit variance, then apply the affine."""
    c = x.shape[-1]
    if c == 0:
        raise ShapeError("layernorm over zero channels")
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"layernorm: affine shapes {gamma.shape}/{beta.shape} vs C={c}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * gamma.data + beta.data

    def bw(g):
        gx = None
        if x.requires_grad:
            dxhat = g * gamma.data
            gx = rstd * (
                dxhat
                - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
            )
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return make_result(out, (x, gamma, beta), bw, "layernorm")


def conv1d(
    x: Tensor,
    kernel: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    pad: int = 0,
    groups: int = 1,
) -> Tensor:
    """Cross-correlation of a (T, C_in) sequence with a (K, C_in/groups, C_out) kernel."""
    if x.ndim != 2 or kernel.ndim != 3:
        raise ShapeError(f"conv1d: input {x.shape}, kernel {kernel.shape}")
    if stride < 1 or pad < 0 or groups < 1:
        raise ValueError("conv1d: stride >= 1, pad >= 0, groups >= 1 required")
    t_in, c_in = x.shape
    k, cin_g, c_out = kernel.shape
    if c_in % groups or c_out % groups or cin_g != c_in // groups:
        raise ShapeError(f"conv1d: input {x.shape} / kernel {kernel.shape} / groups={groups}")
    if bias is not None and bias.shape != (c_out,):
        raise ShapeError(f"conv1d: bias {bias.shape} vs C_out={c_out}")
    t_out = (t_in + 2 * pad - k) // stride + 1
    if t_out < 1:
        raise ShapeError(f"conv1d: output length {t_out} < 1")

    xp = _pad_rows(x.data, pad) if pad else x.data
    span = stride * (t_out - 1) + 1
    w = kernel.data
    depthwise = cin_g == 1 and c_out == c_in
    if groups == 1:
        cols = sliding_window_view(xp, k, axis=0)[::stride][:t_out]  # (T', C_in, K)
        out = np.tensordot(cols, w, axes=([1, 2], [1, 0]))
    elif depthwise:
        out = np.zeros((t_out, c_out), dtype=xp.dtype)
        for j in range(k):
            out += xp[j : j + span : stride] * w[j, 0]
    else:
        m = c_out // groups
        cols = sliding_window_view(xp, k, axis=0)[::stride][:t_out].reshape(t_out, groups, cin_g, k)
        out = np.einsum("tgck,kcgm->tgm", cols, w.reshape(k, cin_g, groups, m)).reshape(t_out, c_out)
    if bias is not None:
        out = out + bias.data
    parents = (x, kernel) if bias is None else (x, kernel, bias)

    def bw(g):
        gxp = np.zeros_like(xp) if x.requires_grad else None
        if groups == 1:
            gw = np.tensordot(g, cols, axes=([0], [0])).transpose(2, 1, 0) if kernel.requires_grad else None
            if gxp is not None:
                gcols = np.tensordot(g, w, axes=([1], [2]))  # (T', K, C_in)
                for j in range(k):
                    gxp[j : j + span : stride] += gcols[:, j]
        elif depthwise:
            gw = np.empty_like(w) if kernel.requires_grad else None
            for j in range(k):
                if gw is not None:
                    gw[j, 0] = (xp[j : j + span : stride] * g).sum(axis=0)
                if gxp is not None:
                    gxp[j : j + span : stride] += g * w[j, 0]
        else:
            m = c_out // groups
            g3 = g.reshape(t_out, groups, m)
            w4 = w.reshape(k, cin_g, groups, m)
            gw = np.einsum("tgm,tgck->kcgm", g3, cols).reshape(w.shape) if kernel.requires_grad else None
            if gxp is not None:
                gcols = np.einsum("tgm,kcgm->tkgc", g3, w4).reshape(t_out, k, c_in)
                for j in range(k):
                    gxp[j : j + span : stride] += gcols[:, j]
        gx = None
        if gxp is not None:
            gx = gxp[pad : pad + t_in] if pad else gxp
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=0)

    return make_result(out, parents, bw, "conv1d")


def max_pool1d(x: Tensor, kernel: int = 3, stride: int = 2, pad: int = 1) -> Tensor:
    t_in, c = x.shape
    t_out = (t_in + 2 * pad - kernel) // stride + 1
    if t_out < 1:
        raise ShapeError(f"max_pool1d: output length {t_out} < 1")
    xp = _pad_rows(x.data, pad, -np.inf) if pad else x.data
    win = sliding_window_view(xp, kernel, axis=0)[::stride][:t_out]  # (T', C, K)
    arg = win.argmax(axis=2)
    out = np.take_along_axis(win, arg[..., None], axis=2)[..., 0]
    src = np.arange(t_out)[:, None] * stride + arg - pad  # source row per output
    cols = np.broadcast_to(np.arange(c), src.shape)

    def bw(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, (src, cols), g)
        return (gx,)

    return make_result(np.ascontiguousarray(out), (x,), bw, "max_pool1d")


def upsample_nearest(x: Tensor, length: int, factor: int = 2) -> Tensor:
    t_in, c = x.shape
    if length > t_in * factor or length < 1:
        raise ShapeError(f"upsample_nearest: cannot reach length {length} from {t_in}x{factor}")
    out = np.repeat(x.data, factor, axis=0)[:length]

    def bw(g):
        full = np.zeros((t_in * factor, c), dtype=g.dtype)
        full[:length] = g
        return (full.reshape(t_in, factor, c).sum(axis=1),)

    return make_result(out, (x,), bw, "upsample_nearest")

"""The unified moment detector.

ConvNeXt-style 1-D encoder -> temporal feature pyramid -> stacked BiFPN ->
two query-dependent heads that share weights across pyramid levels:

* classification: per-step features projected to the text-embedding width and
  scored against the unit-normalized query by inner product;
* regression: an MLP turns each query into a K x CH x 2 convolution kernel that
  is slid over the per-step features to produce start/end offsets.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from ..numcore import ShapeError, Tensor, ops
from .layers import Conv1d, LayerNorm, Linear, Module, Scale, activation, trunc_normal


@dataclass
class ModelConfig:
    d_in: int = 1024
    d_txt: int = 512
    d_model: int = 256
    n_stem: int = 2
    n_down: int = 5
    bifpn_layers: int = 3
    head_convs: int = 2
    K: int = 3
    CH: int = 256
    n_fc_reg: int = 3
    scale_init: float = 1.0
    block_kernel: int = 7
    expansion: int = 4
    act: str = "gelu"
    cls_prior: float = 0.01
    reg_ranges: list | None = None  # [(lo, hi], ...] in input feature steps; None -> doubling from 4
    seed: int = 0

    def __post_init__(self):
        for key in ("d_in", "d_txt", "d_model", "n_stem", "n_down", "head_convs", "K", "CH", "block_kernel", "expansion"):
            if getattr(self, key) < 1:
                raise ValueError(f"model.{key} must be >= 1")
        if self.bifpn_layers < 0:
            raise ValueError("model.bifpn_layers must be >= 0")
        if self.n_fc_reg not in (1, 2, 3):
            raise ValueError("model.n_fc_reg must be 1, 2 or 3")
        if self.reg_ranges is None:
            self.reg_ranges = default_reg_ranges(self.n_down)
        self.reg_ranges = [[float(lo), float(hi)] for lo, hi in self.reg_ranges]
        check_reg_ranges(self.reg_ranges, self.n_down)

    @property
    def levels(self) -> int:
        return self.n_down

    @property
    def strides(self) -> list[int]:
        return [2 ** (l + 1) for l in range(self.n_down)]

    def to_dict(self) -> dict:
        return asdict(self)


def default_reg_ranges(levels: int) -> list[list[float]]:
    edges = [0.0] + [4.0 * 2**i for i in range(levels - 1)] + [math.inf]
    return [[edges[i], edges[i + 1]] for i in range(levels)]


def check_reg_ranges(ranges, levels: int) -> None:
    if len(ranges) != levels:
        raise ValueError(f"need {levels} regression ranges, got {len(ranges)}")
    if ranges[0][0] != 0 or not math.isinf(ranges[-1][1]):
        raise ValueError("regression ranges must cover (0, inf)")
    for (lo, hi), (lo2, _) in zip(ranges, ranges[1:] + [[math.inf, math.inf]]):
        if not lo < hi or (lo2 != math.inf and lo2 != hi):
            raise ValueError(f"regression ranges must be ordered and contiguous: {ranges}")


def pyramid_lengths(T: int, levels: int) -> list[int]:
    if T < 2**levels:
        raise ShapeError(f"sequence of {T} steps is too short for {levels} pyramid levels (needs >= {2**levels})")
    out, t = [], T
    for _ in range(levels):
        t = (t + 1) // 2
        out.append(t)
    return out


@dataclass
class DenseOutput:
    conf: list[Tensor]  # per level (T_l, Q), in [0, 1]
    offsets: list[Tensor]  # per level (T_l, Q, 2), start/end distance in stride units
    strides: list[int]
    logits: list[Tensor] = field(default_factory=list)

    @property
    def lengths(self) -> list[int]:
        return [c.shape[0] for c in self.conf]


class ConvNeXtBlock(Module):
    """depthwise conv -> LN -> pointwise expand -> act -> pointwise project, plus residual."""

    def __init__(self, c: int, rng, kernel: int = 7, expansion: int = 4, act: str = "gelu"):
        self.dwconv = Conv1d(c, c, kernel, rng, groups=c)
        self.norm = LayerNorm(c)
        self.pw1 = Linear(c, expansion * c, rng)
        self.pw2 = Linear(expansion * c, c, rng)
        self.act = act

    def __call__(self, x: Tensor) -> Tensor:
        y = self.norm(self.dwconv(x))
        y = self.pw2(activation(self.act)(self.pw1(y)))
        return ops.add(x, y)


class Downsample(Module):
    def __init__(self, c: int, rng):
        self.norm = LayerNorm(c)
        self.conv = Conv1d(c, c, 3, rng, stride=2, pad=1)

    def __call__(self, x: Tensor) -> Tensor:
        return self.conv(self.norm(x))


class VisionEncoder(Module):
    def __init__(self, cfg: ModelConfig, rng):
        self.levels = cfg.n_down
        self.proj = Linear(cfg.d_in, cfg.d_model, rng)
        blk = dict(kernel=cfg.block_kernel, expansion=cfg.expansion, act=cfg.act)
        self.stem = [ConvNeXtBlock(cfg.d_model, rng, **blk) for _ in range(cfg.n_stem)]
        self.down = [Downsample(cfg.d_model, rng) for _ in range(cfg.n_down)]
        self.blocks = [ConvNeXtBlock(cfg.d_model, rng, **blk) for _ in range(cfg.n_down)]

    def __call__(self, x: Tensor) -> list[Tensor]:
        pyramid_lengths(x.shape[0], self.levels)
        h = self.proj(x)
        for blk in self.stem:
            h = blk(h)
        levels = []
        for down, blk in zip(self.down, self.blocks):
            h = blk(down(h))
            levels.append(h)
        return levels


class FusionNode(Module):
    """Fast normalized fusion ``sum_i relu(a_i) x_i / (sum_j relu(a_j) + eps)`` then a depthwise conv."""

    eps = 1e-4

    def __init__(self, n_inputs: int, c: int, rng):
        self.weights = Tensor(np.ones(n_inputs), requires_grad=True)
        # fan-in scaled: a 3-tap depthwise kernel at std 0.02 would shrink the signal ~30x per node
        self.conv = Conv1d(c, c, 3, rng, groups=c, std=1.0 / math.sqrt(3))

    def fusion_weights(self) -> Tensor:
        r = ops.relu(self.weights)
        return ops.div(r, ops.add(ops.sum(r), self.eps))

    def __call__(self, inputs: list[Tensor]) -> Tensor:
        w = self.fusion_weights()
        acc = None
        for i, x in enumerate(inputs):
            term = ops.mul(x, ops.index(w, slice(i, i + 1)))
            acc = term if acc is None else ops.add(acc, term)
        return self.conv(acc)


class BiFPNLayer(Module):
    def __init__(self, levels: int, c: int, rng):
        if levels < 2:
            raise ValueError("BiFPN needs at least two pyramid levels")
        self.top_down = [FusionNode(2, c, rng) for _ in range(levels - 1)]
        self.bottom_up = [FusionNode(3, c, rng) for _ in range(levels - 2)] + [FusionNode(2, c, rng)]

    def __call__(self, feats: list[Tensor]) -> list[Tensor]:
        L = len(feats)
        td = [None] * L
        td[L - 1] = feats[L - 1]
        for l in range(L - 2, -1, -1):
            up = ops.upsample_nearest(td[l + 1], feats[l].shape[0])
            td[l] = self.top_down[l]([feats[l], up])
        out = [None] * L
        out[0] = td[0]
        for l in range(1, L):
            down = ops.max_pool1d(out[l - 1], 3, 2, 1)
            inputs = [feats[l], td[l], down] if l < L - 1 else [feats[l], down]
            out[l] = self.bottom_up[l - 1](inputs)
        return out


class HeadTrunk(Module):
    """Stacked (conv K=3 -> LN -> ReLU) layers shared by every pyramid level."""

    def __init__(self, c_in: int, widths: list[int], rng):
        self.convs = []
        self.norms = []
        for w in widths:
            self.convs.append(Conv1d(c_in, w, 3, rng, bias=False))
            self.norms.append(LayerNorm(w))
            c_in = w

    def __call__(self, x: Tensor) -> Tensor:
        for conv, norm in zip(self.convs, self.norms):
            x = ops.relu(norm(conv(x)))
        return x


class QueryTransform(Module):
    """MLP mapping a text embedding to a K x CH x 2 regression kernel."""

    def __init__(self, cfg: ModelConfig, rng):
        dims = [cfg.d_txt] + [cfg.CH] * (cfg.n_fc_reg - 1) + [cfg.K * cfg.CH * 2]
        self.fcs = [Linear(a, b, rng) for a, b in zip(dims[:-1], dims[1:])]
        self.K = cfg.K
        self.CH = cfg.CH

    def __call__(self, g_hat: Tensor) -> Tensor:
        """(Q, d_txt) -> (K, CH, 2Q) kernel; output channels 2q, 2q+1 belong to query q."""
        h = g_hat
        for i, fc in enumerate(self.fcs):
            h = fc(h)
            if i < len(self.fcs) - 1:
                h = ops.relu(h)
        if h.shape[-1] != self.K * self.CH * 2:
            raise ShapeError(f"query transform produced {h.shape[-1]} values, need {self.K * self.CH * 2}")
        q = g_hat.shape[0]
        w = ops.reshape(h, (q, self.K, self.CH, 2))
        w = ops.transpose(w, (1, 2, 0, 3))
        return ops.reshape(w, (self.K, self.CH, 2 * q))


class UniMD(Module):
    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        L = cfg.levels
        self.encoder = VisionEncoder(cfg, rng)
        self.bifpn = [BiFPNLayer(L, cfg.d_model, rng) for _ in range(cfg.bifpn_layers)] if L >= 2 else []
        widths = [cfg.CH] * (cfg.head_convs - 1)
        self.cls_trunk = HeadTrunk(cfg.d_model, widths + [cfg.d_txt], rng)
        self.cls_scales = [Scale(cfg.scale_init) for _ in range(L)]
        prior = -math.log((1.0 - cfg.cls_prior) / cfg.cls_prior)
        self.cls_bias = Tensor(np.array([prior]), requires_grad=True)
        self.reg_trunk = HeadTrunk(cfg.d_model, widths + [cfg.CH], rng)
        self.query_transform = QueryTransform(cfg, rng)
        self.reg_scales = [Scale(cfg.scale_init) for _ in range(L)]
        for name, p in self.named_parameters():
            p.name = name

    # -- stages ---------------------------------------------------------------

    def encode_pyramid(self, x: Tensor) -> list[Tensor]:
        if x.ndim != 2 or x.shape[1] != self.cfg.d_in:
            raise ShapeError(f"features of shape {x.shape}, model expects (T, {self.cfg.d_in})")
        return self.encoder(x)

    def bifpn_fuse(self, levels: list[Tensor]) -> list[Tensor]:
        for layer in self.bifpn:
            levels = layer(levels)
        return levels

    def normalize_queries(self, g) -> Tensor:
        g = g if isinstance(g, Tensor) else Tensor(np.asarray(g, dtype=self.cls_bias.data.dtype))
        if g.ndim != 2 or g.shape[1] != self.cfg.d_txt:
            raise ShapeError(f"queries of shape {g.shape}, model expects (Q, {self.cfg.d_txt})")
        return ops.l2_normalize(g, axis=-1)

    def classify(self, levels: list[Tensor], g_hat: Tensor) -> tuple[list[Tensor], list[Tensor]]:
        gt = ops.transpose(g_hat)  # (d_txt, Q)
        confs, logits = [], []
        for l, z in enumerate(levels):
            h = self.cls_trunk(z)
            if h.shape[1] != gt.shape[0]:
                raise ShapeError(f"head width {h.shape[1]} != query width {gt.shape[0]}")
            s = ops.add(self.cls_scales[l](ops.linear(h, gt)), self.cls_bias)
            logits.append(s)
            confs.append(ops.sigmoid(s))
        return confs, logits

    def transform_query(self, g_hat: Tensor) -> Tensor:
        return self.query_transform(g_hat)

    def regress(self, levels: list[Tensor], kernel: Tensor) -> list[Tensor]:
        K, CH, two_q = kernel.shape
        if K != self.cfg.K or CH != self.cfg.CH or two_q % 2:
            raise ShapeError(f"regression kernel {kernel.shape} does not match K={self.cfg.K}, CH={self.cfg.CH}")
        out = []
        for l, z in enumerate(levels):
            h = self.reg_trunk(z)
            d = ops.conv1d(h, kernel, None, stride=1, pad=K // 2)
            d = ops.relu(self.reg_scales[l](d))
            out.append(ops.reshape(d, (d.shape[0], two_q // 2, 2)))
        return out

    def __call__(self, x, g) -> DenseOutput:
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=self.cls_bias.data.dtype))
        levels = self.bifpn_fuse(self.encode_pyramid(x))
        return self.heads(levels, g)

    def heads(self, levels: list[Tensor], g) -> DenseOutput:
        g_hat = self.normalize_queries(g)
        conf, logits = self.classify(levels, g_hat)
        offsets = self.regress(levels, self.transform_query(g_hat))
        return DenseOutput(conf, offsets, self.cfg.strides[: len(levels)], logits)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


def build_model(cfg: ModelConfig) -> UniMD:
    return UniMD(cfg)


__all__ = [
    "ConvNeXtBlock", "DenseOutput", "FusionNode", "BiFPNLayer", "ModelConfig", "QueryTransform", "UniMD",
    "build_model", "default_reg_ranges", "pyramid_lengths", "trunc_normal",
]

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import NonFiniteError, Tensor


@dataclass
class OptimState:
    lr: float = 1e-3
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adamw_step(params: list[np.ndarray], grads: list[np.ndarray | None], state: OptimState,
               decay_mask: list[bool] | None = None) -> None:
    """One AdamW update, in place on ``params``.

    Weight decay is decoupled: ``p <- p - lr*wd*p`` is applied next to, not through,
    the adaptive moments. ``decay_mask`` excludes parameters (biases, norms, scales).
    """
    if state.lr <= 0:
        raise ValueError("lr must be positive")
    if len(params) != len(grads):
        raise ValueError("params / grads length mismatch")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    if len(state.m) != len(params):
        raise ValueError("optimizer state does not match the parameter list")
    for p, g, m in zip(params, grads, state.m):
        if m.shape != p.shape or (g is not None and g.shape != p.shape):
            raise ValueError(f"shape mismatch: param {p.shape}, grad {None if g is None else g.shape}, moment {m.shape}")
        if g is not None and not np.all(np.isfinite(g)):
            raise NonFiniteError("non-finite gradient passed to adamw_step")

    state.step += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**state.step
    bc2 = 1.0 - b2**state.step
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            g = np.zeros_like(p)
        m, v = state.m[i], state.v[i]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        if decay_mask is None or decay_mask[i]:
            p *= 1.0 - state.lr * state.weight_decay
        p -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


class AdamW:
    """Thin stateful wrapper around :func:`adamw_step` for a list of parameter tensors."""

    def __init__(self, params: list[Tensor], lr: float = 1e-3, weight_decay: float = 0.05,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 no_decay: set[int] | None = None):
        self.params = list(params)
        self.state = OptimState(lr=lr, weight_decay=weight_decay, beta1=betas[0], beta2=betas[1], eps=eps)
        no_decay = no_decay or set()
        self.decay_mask = [id(p) not in no_decay for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        adamw_step([p.data for p in self.params], [p.grad for p in self.params], self.state, self.decay_mask)


def cosine_lr(step: int, total: int, base_lr: float, warmup: int = 0, min_ratio: float = 0.0) -> float:
    """Linear warmup then cosine decay to ``base_lr * min_ratio``."""
    if warmup and step < warmup:
        return base_lr * (step + 1) / warmup
    span = max(1, total - warmup)
    progress = min(1.0, (step - warmup) / span)
    return base_lr * (min_ratio + (1.0 - min_ratio) * 0.5 * (1.0 + math.cos(math.pi * progress)))

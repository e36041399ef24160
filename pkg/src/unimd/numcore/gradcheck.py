from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward, no_grad


class NonDeterministicError(RuntimeError):
    pass


@dataclass
class GradCheckReport:
    max_rel_err: float
    worst_param: str | None = None
    probes: int = 0
    per_param: dict[str, float] = field(default_factory=dict)


def rel_err(analytic: float, numeric: float, floor: float = 0.0) -> float:
    denom = max(abs(analytic), abs(numeric), floor)
    if denom == 0.0:
        return 0.0
    return abs(analytic - numeric) / denom


def grad_check_report(
    fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    probe_count: int = 3,
    h: float | Sequence[float] = 1e-6,
    seed: int = 0,
    floor: float = 1e-8,
) -> GradCheckReport:
    """Compare analytic gradients with central differences on sampled coordinates.

    ``fn`` must rebuild the scalar loss from the current parameter values on each
    call. ``floor * max(1, |f|)`` bounds the denominator so that coordinates whose
    true gradient is below double-precision finite-difference resolution are not
    judged by noise; that resolution degrades in proportion to the loss value.

    ``h`` may be a sequence of step sizes; each probe then keeps the best agreement
    over them. A ReLU or max-pool kink lying within one step of the probe point
    spoils that difference, while a wrong analytic gradient disagrees at every step.
    """
    if probe_count < 1:
        raise ValueError("probe_count must be >= 1")
    steps = [float(h)] if np.isscalar(h) else [float(v) for v in h]
    if not steps or any(v <= 0 for v in steps):
        raise ValueError("step sizes must be positive")
    params = list(params)
    for p in params:
        p.grad = None
    loss = fn()
    if loss.size != 1:
        raise ValueError("grad_check needs a scalar function")
    with no_grad():
        again = fn().data
    if not np.array_equal(loss.data, again):
        raise NonDeterministicError("two forward passes of fn differ")
    floor = floor * max(1.0, abs(loss.item()))
    backward(loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    rng = np.random.default_rng(seed)
    report = GradCheckReport(max_rel_err=0.0)
    for n, (p, ga) in enumerate(zip(params, analytic)):
        name = p.name or f"param{n}"
        flat = p.data.reshape(-1)
        k = min(probe_count, flat.size)
        coords = rng.choice(flat.size, size=k, replace=False)
        worst = 0.0
        for c in coords:
            orig = flat[c]
            a = float(ga.reshape(-1)[c])
            best = np.inf
            for step in steps:
                with no_grad():
                    flat[c] = orig + step
                    fp = fn().item()
                    flat[c] = orig - step
                    fm = fn().item()
                flat[c] = orig
                best = min(best, rel_err(a, (fp - fm) / (2.0 * step), floor))
                if best < 1e-7:
                    break
            worst = max(worst, best)
            report.probes += 1
        report.per_param[name] = worst
        if worst >= report.max_rel_err:
            report.max_rel_err = worst
            report.worst_param = name
    for p in params:
        p.grad = None
    return report


def grad_check(fn: Callable[[], Tensor], params: Sequence[Tensor], probe_count: int = 3,
               h: float | Sequence[float] = 1e-6, seed: int = 0, floor: float = 1e-8) -> float:
    return grad_check_report(fn, params, probe_count, h, seed, floor).max_rel_err

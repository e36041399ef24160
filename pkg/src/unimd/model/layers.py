from __future__ import annotations

from typing import Iterator

import numpy as np

from ..numcore import Tensor, ops, parameter


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) resampled until every draw lies within two standard deviations."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out


class Module:
    """Parameters and sub-modules are discovered in attribute declaration order."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        seen: set[int] = set()
        yield from self._named(prefix, seen)

    def _named(self, prefix, seen):
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Tensor) and val.requires_grad:
                if id(val) not in seen:
                    seen.add(id(val))
                    yield name, val
            elif isinstance(val, Module):
                if id(val) not in seen:
                    seen.add(id(val))
                    yield from val._named(name + ".", seen)
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module) and id(item) not in seen:
                        seen.add(id(item))
                        yield from item._named(f"{name}.{i}.", seen)
                    elif isinstance(item, Tensor) and item.requires_grad and id(item) not in seen:
                        seen.add(id(item))
                        yield f"{name}.{i}", item

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def no_decay_parameters(self) -> list[Tensor]:
        """Biases, norm affines, scales and fusion weights: everything that is not a matrix/kernel."""
        return [p for _, p in self.named_parameters() if p.ndim < 2]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


class Linear(Module):
    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator, bias: bool = True, name: str = "fc"):
        self.weight = parameter(trunc_normal(rng, (c_in, c_out)), f"{name}.weight")
        self.bias = parameter(np.zeros(c_out), f"{name}.bias") if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return ops.linear(x, self.weight, self.bias)


class Conv1d(Module):
    def __init__(self, c_in: int, c_out: int, k: int, rng: np.random.Generator, stride: int = 1,
                 pad: int | None = None, groups: int = 1, bias: bool = True, name: str = "conv",
                 std: float = 0.02):
        self.stride = stride
        self.pad = k // 2 if pad is None else pad
        self.groups = groups
        self.weight = parameter(trunc_normal(rng, (k, c_in // groups, c_out), std), f"{name}.weight")
        self.bias = parameter(np.zeros(c_out), f"{name}.bias") if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv1d(x, self.weight, self.bias, stride=self.stride, pad=self.pad, groups=self.groups)


class LayerNorm(Module):
    def __init__(self, c: int, eps: float = 1e-5, name: str = "ln"):
        self.eps = eps
        self.gamma = parameter(np.ones(c), f"{name}.gamma")
        self.beta = parameter(np.zeros(c), f"{name}.beta")

    def __call__(self, x: Tensor) -> Tensor:
        return ops.layernorm(x, self.gamma, self.beta, self.eps)


class Scale(Module):
    def __init__(self, init: float = 1.0, name: str = "scale"):
        self.value = parameter(np.array([init]), name)

    def __call__(self, x: Tensor) -> Tensor:
        return ops.scale(x, self.value)


def activation(kind: str):
    if kind == "gelu":
        return ops.gelu
    if kind == "relu":
        return ops.relu
    raise ValueError(f"unknown activation {kind!r}")

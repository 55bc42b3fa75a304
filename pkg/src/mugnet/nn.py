"""Tiny module system: parameter discovery, initialization and dense layers."""

from __future__ import annotations

import math

import numpy as np

from .errors import ContractError
from .tensor import RunningStats, Tensor, batch_norm, matmul


class Module:
    """Base class; tensors with ``requires_grad`` and sub-modules are discovered
    from instance attributes (including lists of modules)."""

    def named_parameters(self, prefix: str = ""):
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def named_buffers(self, prefix: str = ""):
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, RunningStats):
                yield f"{name}.mean", value, "mean"
                yield f"{name}.var", value, "var"
            elif isinstance(value, Module):
                yield from value.named_buffers(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_buffers(f"{name}.{i}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict:
        state = {name: p.data.copy() for name, p in self.named_parameters()}
        for name, stats, attr in self.named_buffers():
            state[name] = np.array(getattr(stats, attr), dtype=np.float64)
        return state

    def load_state_dict(self, state: dict):
        params = dict(self.named_parameters())
        buffers = {name: (stats, attr) for name, stats, attr in self.named_buffers()}
        expected = set(params) | set(buffers)
        missing = expected - set(state)
        extra = set(state) - expected
        if missing or extra:
            raise ContractError(
                f"state mismatch: missing {sorted(missing)[:5]}, unexpected {sorted(extra)[:5]}"
            )
        for name, p in params.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise ContractError(f"{name}: shape {arr.shape} != {p.shape}")
            p.data = arr.copy()
        for name, (stats, attr) in buffers.items():
            setattr(stats, attr, np.asarray(state[name], dtype=np.float64).copy())


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> Tensor:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    shape = (fan_in, fan_out) if shape is None else shape
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


class Linear(Module):
    def __init__(self, rng, fan_in: int, fan_out: int, bias: bool = True):
        self.weight = xavier_uniform(rng, fan_in, fan_out)
        self.bias = Tensor(np.zeros(fan_out), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.weight.shape[0]:
            raise ContractError(
                f"Linear expects {self.weight.shape[0]} input features, got {x.shape[-1]}"
            )
        out = matmul(x, self.weight)
        return out + self.bias if self.bias is not None else out


class BatchNorm(Module):
    def __init__(self, width: int, momentum: float = 0.1, eps: float = 1e-5):
        self.gamma = Tensor(np.ones(width), requires_grad=True)
        self.beta = Tensor(np.zeros(width), requires_grad=True)
        self.stats = RunningStats.fresh(width, momentum, eps)

    def __call__(self, x: Tensor, mode: str) -> Tensor:
        return batch_norm(x, self.gamma, self.beta, self.stats, mode)

"""Parameter containers and the fully-connected building blocks."""

from __future__ import annotations

import math
from collections.abc import Iterator

import numpy as np

from .autodiff import Parameter, Tensor, add, matmul, relu


class Module:
    """Walks attributes to enumerate parameters in a stable order."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Parameter):
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def n_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]):
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        extra = set(state) - set(own)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for name, p in own.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise ValueError(f"{name}: expected shape {p.shape}, got {arr.shape}")
            p.data[...] = arr


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


class Dense(Module):
    """``x W + b`` with an optional ReLU."""

    def __init__(self, fan_in: int, fan_out: int, rng: np.random.Generator, activation: bool = True):
        self.W = Parameter(glorot(rng, fan_in, fan_out))
        self.b = Parameter(np.zeros(fan_out))
        self.activation = activation

    def __call__(self, x: Tensor) -> Tensor:
        y = add(matmul(x, self.W), self.b)
        return relu(y) if self.activation else y


class TwoLayer(Module):
    """ReLU hidden layer followed by a linear output layer."""

    def __init__(self, fan_in: int, hidden: int, fan_out: int, rng: np.random.Generator):
        self.first = Dense(fan_in, hidden, rng, activation=True)
        self.second = Dense(hidden, fan_out, rng, activation=False)

    def __call__(self, x: Tensor) -> Tensor:
        return self.second(self.first(x))


def name_parameters(module: Module) -> None:
    """Stamp registry names onto the Parameter objects."""
    seen = set()
    for name, p in module.named_parameters():
        if id(p) in seen:
            raise ValueError(f"parameter {name} registered twice")
        seen.add(id(p))
        p.name = name

"""Small layer building blocks on top of the tape."""

from __future__ import annotations

from collections.abc import Iterator

import numpy as np

from . import core as F
from .core import DArray


class Module:
    """Anything holding DArray parameters, possibly nested in sub-modules or lists."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, DArray]]:
        for key, val in vars(self).items():
            yield from _walk(val, prefix + key)

    def parameters(self) -> list[DArray]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        if set(own) != set(state):
            missing = sorted(set(own) ^ set(state))
            raise KeyError(f"state dict keys differ: {missing[:5]}")
        for k, p in own.items():
            if p.shape != state[k].shape:
                raise ValueError(f"shape mismatch for {k}: {p.shape} vs {state[k].shape}")
            p.data = np.array(state[k], dtype=np.float64)

    def zero_grads(self) -> None:
        F.zero_grads(self.parameters())

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


def _walk(val, name):
    if isinstance(val, DArray):
        if val.requires_grad:
            yield name, val
    elif isinstance(val, Module):
        yield from val.named_parameters(name + ".")
    elif isinstance(val, (list, tuple)):
        for i, item in enumerate(val):
            yield from _walk(item, f"{name}.{i}")


def param(data, name: str | None = None) -> DArray:
    return DArray(np.array(data, dtype=np.float64), requires_grad=True, name=name)


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator):
        bound = 1.0 / np.sqrt(n_in)
        self.w = param(rng.uniform(-bound, bound, size=(n_in, n_out)))
        self.b = param(rng.uniform(-bound, bound, size=(n_out,)))

    def __call__(self, x) -> DArray:
        return F.add(F.matmul(x, self.w), self.b)


class LayerNorm(Module):
    def __init__(self, dim: int):
        self.gain = param(np.ones(dim))
        self.bias = param(np.zeros(dim))

    def __call__(self, x) -> DArray:
        return F.layer_norm(x, self.gain, self.bias)


class MLP(Module):
    """ReLU perceptron: ``sizes = [in, h1, ..., out]``, no activation on the output."""

    def __init__(self, sizes: list[int], rng: np.random.Generator):
        self.layers = [Linear(a, b, rng) for a, b in zip(sizes[:-1], sizes[1:])]

    def __call__(self, x) -> DArray:
        for layer in self.layers[:-1]:
            x = F.relu(layer(x))
        return self.layers[-1](x)


def soft_update(target: Module, online: Module, tau: float) -> None:
    """``target <- (1 - tau) * target + tau * online``."""
    for (_, t), (_, o) in zip(target.named_parameters(), online.named_parameters()):
        t.data = (1.0 - tau) * t.data + tau * o.data

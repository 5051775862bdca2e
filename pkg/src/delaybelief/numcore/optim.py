"""Adam and AdamW with decoupled weight decay."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import DArray, NumericalError


@dataclass
class OptState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    t: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if self.lr < 0 or self.eps <= 0 or self.weight_decay < 0:
            raise ValueError("lr and weight_decay must be >= 0, eps > 0")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValueError("betas must lie in [0, 1)")


def _check_grads(params: list[DArray], state: OptState) -> None:
    for p in params:
        if p.grad is None:
            raise ValueError(f"missing grad for parameter {p.name or p.shape}")
        if not np.isfinite(p.grad).all():
            raise NumericalError(f"non-finite grad for parameter {p.name or p.shape}")
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    elif len(state.m) != len(params):
        raise ValueError("optimizer state was built for a different parameter list")


def _moments(p, m, v, s):
    g = p.grad
    m *= s.beta1
    m += (1.0 - s.beta1) * g
    v *= s.beta2
    v += (1.0 - s.beta2) * (g * g)
    mhat = m / (1.0 - s.beta1 ** s.t)
    vhat = v / (1.0 - s.beta2 ** s.t)
    return mhat / (np.sqrt(vhat) + s.eps)


def adamw_step(params: list[DArray], state: OptState) -> None:
    """One AdamW update in place: ``p -= lr*wd*p`` first, then the Adam step."""
    _check_grads(params, state)
    state.t += 1
    for p, m, v in zip(params, state.m, state.v):
        p.data = p.data - state.lr * state.weight_decay * p.data
        p.data = p.data - state.lr * _moments(p, m, v, state)


def adam_step(params: list[DArray], state: OptState) -> None:
    if state.weight_decay:
        raise ValueError("adam_step expects weight_decay == 0; use adamw_step")
    _check_grads(params, state)
    state.t += 1
    for p, m, v in zip(params, state.m, state.v):
        p.data = p.data - state.lr * _moments(p, m, v, state)

"""Actor, twin critics and the learned entropy temperature."""

from __future__ import annotations

import copy

import numpy as np

from ..numcore import MLP, DArray, Linear, Module, ops, param, soft_update

LOG_STD_MIN, LOG_STD_MAX = -20.0, 2.0
_HALF_LOG_2PI = 0.5 * np.log(2.0 * np.pi)


class Actor(Module):
    """Tanh-squashed diagonal Gaussian policy."""

    def __init__(self, state_dim: int, action_dim: int, low, high, hidden=(256, 256), rng=None):
        self.trunk = MLP([state_dim, *hidden], rng)
        self.mean_head = Linear(hidden[-1], action_dim, rng)
        self.log_std_head = Linear(hidden[-1], action_dim, rng)
        low, high = np.asarray(low, dtype=np.float64), np.asarray(high, dtype=np.float64)
        self.scale = (high - low) / 2.0
        self.bias = (high + low) / 2.0
        self.state_dim, self.action_dim = state_dim, action_dim

    def dist(self, states):
        h = ops.relu(self.trunk(states))
        return self.mean_head(h), ops.clip(self.log_std_head(h), LOG_STD_MIN, LOG_STD_MAX)

    def sample(self, states, noise: np.ndarray | None = None, rng=None,
               deterministic: bool = False):
        """Squashed action and its log-density (per row).

        ``noise`` fixes the standard-normal draw; otherwise it comes from ``rng``.
        """
        mean, log_std = self.dist(states)
        if deterministic:
            u = mean
            eps = np.zeros(mean.shape)
        else:
            if noise is None:
                noise = rng.standard_normal(mean.shape)
            eps = np.asarray(noise, dtype=np.float64)
            u = ops.add(mean, ops.mul(ops.exp(log_std), eps))
        y = ops.tanh(u)
        action = ops.add(ops.mul(y, self.scale), self.bias)
        # log N(u; mean, std) with u = mean + std * eps is -eps^2/2 - log_std - log(2 pi)/2
        log_n = ops.sub(ops.neg(log_std), 0.5 * eps * eps + _HALF_LOG_2PI)
        jac = ops.log(ops.add(ops.mul(ops.sub(1.0, ops.square(y)), self.scale), 1e-6))
        log_prob = ops.sum_(ops.sub(log_n, jac), axis=-1)
        return action, log_prob


class QNet(Module):
    def __init__(self, state_dim: int, action_dim: int, hidden=(256, 256), rng=None):
        self.net = MLP([state_dim + action_dim, *hidden, 1], rng)

    def __call__(self, states, actions) -> DArray:
        x = ops.concat([states, actions], axis=-1)
        return ops.reshape(self.net(x), (x.shape[0],))


class CriticPair(Module):
    """Two Q networks plus their target copies; ``twin=False`` uses only ``q1``."""

    def __init__(self, state_dim: int, action_dim: int, hidden=(256, 256), rng=None,
                 twin: bool = True):
        self.q1 = QNet(state_dim, action_dim, hidden, rng)
        self.q2 = QNet(state_dim, action_dim, hidden, rng)
        self.twin = twin
        self.t1 = copy.deepcopy(self.q1)
        self.t2 = copy.deepcopy(self.q2)

    def online_parameters(self):
        return self.q1.parameters() + (self.q2.parameters() if self.twin else [])

    def q_min(self, states, actions) -> DArray:
        q1 = self.q1(states, actions)
        return ops.minimum(q1, self.q2(states, actions)) if self.twin else q1

    def target_min(self, states, actions) -> np.ndarray:
        q1 = self.t1(states, actions).data
        return np.minimum(q1, self.t2(states, actions).data) if self.twin else q1

    def soft_update(self, tau: float) -> None:
        soft_update(self.t1, self.q1, tau)
        soft_update(self.t2, self.q2, tau)


class EntropyTemp(Module):
    def __init__(self, action_dim: int, init_alpha: float = 1.0):
        self.log_alpha = param(np.array(np.log(init_alpha)))
        self.target_entropy = -float(action_dim)

    @property
    def alpha(self) -> float:
        return float(np.exp(self.log_alpha.data))

"""Belief forecasters: a causal transformer (direct) and a one-step MLP (recursive).

Both work in normalised coordinates. Predictions are residuals from the anchor
state in units of the per-dimension state scale, so
``s_hat = anchor + scale * output``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from ..numcore import MLP, DArray, LayerNorm, Linear, Module, ops, param


@dataclass
class Normalizer:
    state_mean: np.ndarray
    state_std: np.ndarray
    action_mean: np.ndarray
    action_std: np.ndarray
    reward_mean: float = 0.0
    reward_std: float = 1.0

    @classmethod
    def identity(cls, state_dim: int, action_dim: int) -> "Normalizer":
        return cls(np.zeros(state_dim), np.ones(state_dim), np.zeros(action_dim),
                   np.ones(action_dim))

    @classmethod
    def fit(cls, dataset, floor: float = 1e-3) -> "Normalizer":
        states = np.concatenate([t.states for t in dataset.trajectories])
        actions = np.concatenate([t.actions for t in dataset.trajectories])
        rewards = np.concatenate([t.rewards for t in dataset.trajectories])
        return cls(states.mean(0), np.maximum(states.std(0), floor), actions.mean(0),
                   np.maximum(actions.std(0), floor), float(rewards.mean()),
                   float(max(rewards.std(), floor)))

    def token_shift_scale(self) -> tuple[np.ndarray, np.ndarray]:
        shift = np.concatenate([self.state_mean, self.action_mean, [self.reward_mean]])
        scale = np.concatenate([self.state_std, self.action_std, [self.reward_std]])
        return shift, scale

    def arrays(self) -> dict[str, np.ndarray]:
        return {f"norm.{k}": np.atleast_1d(np.asarray(v, dtype=np.float64))
                for k, v in asdict(self).items()}

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray]) -> "Normalizer":
        kw = {k[5:]: v for k, v in arrays.items() if k.startswith("norm.")}
        kw["reward_mean"] = float(kw["reward_mean"][0])
        kw["reward_std"] = float(kw["reward_std"][0])
        return cls(**kw)


@dataclass
class DFBTConfig:
    state_dim: int
    action_dim: int
    delta_max: int
    n_layers: int = 10
    hidden: int = 256
    n_heads: int = 4
    attn_dropout: float = 0.1
    resid_dropout: float = 0.1
    hidden_dropout: float = 0.1
    gaussian_head: bool = False

    def __post_init__(self):
        if self.hidden % self.n_heads:
            raise ValueError("hidden must be divisible by n_heads")
        if self.delta_max < 1:
            raise ValueError("delta_max must be >= 1")

    @property
    def token_width(self) -> int:
        return self.state_dim + self.action_dim + 1

    @classmethod
    def preset(cls, name: str, state_dim: int, action_dim: int, delta_max: int, **kw):
        sizes = {"paper": dict(n_layers=10, hidden=256, n_heads=4),
                 "desk": dict(n_layers=2, hidden=64, n_heads=4, attn_dropout=0.0,
                              resid_dropout=0.0, hidden_dropout=0.0)}
        if name not in sizes:
            raise ValueError(f"unknown preset {name!r}")
        return cls(state_dim, action_dim, delta_max, **{**sizes[name], **kw})


class CausalSelfAttention(Module):
    def __init__(self, cfg: DFBTConfig, rng):
        h = cfg.hidden
        self.q = Linear(h, h, rng)
        self.k = Linear(h, h, rng)
        self.v = Linear(h, h, rng)
        self.proj = Linear(h, h, rng)
        self.n_heads = cfg.n_heads
        self.p_attn = cfg.attn_dropout
        self.p_resid = cfg.resid_dropout

    def _split(self, x, b, t):
        hd = x.shape[-1] // self.n_heads
        return ops.transpose(ops.reshape(x, (b, t, self.n_heads, hd)), (0, 2, 1, 3))

    def __call__(self, x: DArray, train: bool, rng) -> DArray:
        b, t, h = x.shape
        q, k, v = (self._split(f(x), b, t) for f in (self.q, self.k, self.v))
        scores = ops.mul(ops.matmul(q, ops.transpose(k, (0, 1, 3, 2))),
                         1.0 / np.sqrt(h // self.n_heads))
        future = np.triu(np.ones((t, t), dtype=bool), 1)
        att = ops.softmax(ops.masked_fill(scores, future, -1e9), axis=-1)
        att = ops.dropout(att, self.p_attn, train, rng)
        y = ops.reshape(ops.transpose(ops.matmul(att, v), (0, 2, 1, 3)), (b, t, h))
        return ops.dropout(self.proj(y), self.p_resid, train, rng)


class Block(Module):
    """Pre-norm transformer block."""

    def __init__(self, cfg: DFBTConfig, rng):
        self.ln1 = LayerNorm(cfg.hidden)
        self.attn = CausalSelfAttention(cfg, rng)
        self.ln2 = LayerNorm(cfg.hidden)
        self.fc1 = Linear(cfg.hidden, 4 * cfg.hidden, rng)
        self.fc2 = Linear(4 * cfg.hidden, cfg.hidden, rng)
        self.p_hidden = cfg.hidden_dropout
        self.p_resid = cfg.resid_dropout

    def __call__(self, x, train, rng):
        x = ops.add(x, self.attn(self.ln1(x), train, rng))
        h = ops.dropout(ops.relu(self.fc1(self.ln2(x))), self.p_hidden, train, rng)
        return ops.add(x, ops.dropout(self.fc2(h), self.p_resid, train, rng))


class DFBT(Module):
    """Causal-attention forecaster: output position ``i`` predicts ``s_{t-D+i+1}``."""

    def __init__(self, cfg: DFBTConfig, norm: Normalizer, rng: np.random.Generator):
        self.cfg = cfg
        self.norm = norm
        self.embed = Linear(cfg.token_width, cfg.hidden, rng)
        self.pos = param(rng.normal(0.0, 0.02, size=(cfg.delta_max, cfg.hidden)))
        self.blocks = [Block(cfg, rng) for _ in range(cfg.n_layers)]
        self.ln_f = LayerNorm(cfg.hidden)
        self.head = Linear(cfg.hidden, cfg.state_dim, rng)
        self.log_std_head = Linear(cfg.hidden, cfg.state_dim, rng) if cfg.gaussian_head else None
        self._shift, self._scale = norm.token_shift_scale()

    def forward(self, tokens: np.ndarray, train: bool = False, rng=None):
        """Normalised residual means (and log-stds if Gaussian) for every position."""
        tokens = np.asarray(tokens, dtype=np.float64)
        if tokens.ndim == 2:
            tokens = tokens[None]
        b, t, w = tokens.shape
        if w != self.cfg.token_width or t > self.cfg.delta_max:
            raise ValueError(f"tokens of shape {tokens.shape} do not fit the model")
        x = DArray((tokens - self._shift) / self._scale)
        x = ops.add(self.embed(x), ops.slice_(self.pos, slice(0, t)))
        x = ops.dropout(x, self.cfg.hidden_dropout, train, rng)
        for block in self.blocks:
            x = block(x, train, rng)
        x = self.ln_f(x)
        mean = self.head(x)
        log_std = ops.clip(self.log_std_head(x), -10.0, 2.0) if self.log_std_head else None
        return mean, log_std

    def predict(self, tokens: np.ndarray) -> np.ndarray:
        """Eval-mode predicted states, shape ``(B, T, state_dim)``."""
        tokens = np.asarray(tokens, dtype=np.float64)
        if tokens.ndim == 2:
            tokens = tokens[None]
        mean, _ = self.forward(tokens, train=False)
        anchor = tokens[:, :1, :self.cfg.state_dim]
        return anchor + mean.data * self.norm.state_std

    def to_arrays(self) -> dict[str, np.ndarray]:
        return {**self.state_dict(), **self.norm.arrays()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        self.load_state_dict({k: v for k, v in arrays.items() if not k.startswith("norm.")})
        self.norm = Normalizer.from_arrays(arrays)
        self._shift, self._scale = self.norm.token_shift_scale()


@dataclass
class RecursiveConfig:
    state_dim: int
    action_dim: int
    hidden: tuple[int, ...] = (256, 256)
    gaussian_head: bool = False


class RecursiveModel(Module):
    """One-step dynamics ``P(s, a) -> s'`` as a ReLU MLP on normalised inputs."""

    def __init__(self, cfg: RecursiveConfig, norm: Normalizer, rng: np.random.Generator):
        self.cfg = cfg
        self.norm = norm
        n_out = cfg.state_dim * (2 if cfg.gaussian_head else 1)
        self.net = MLP([cfg.state_dim + cfg.action_dim, *cfg.hidden, n_out], rng)

    def forward(self, states: np.ndarray, actions: np.ndarray):
        n = self.norm
        x = np.concatenate([(states - n.state_mean) / n.state_std,
                            (actions - n.action_mean) / n.action_std], axis=-1)
        out = self.net(DArray(x))
        ds = self.cfg.state_dim
        if self.cfg.gaussian_head:
            return out[..., :ds], ops.clip(out[..., ds:], -10.0, 2.0)
        return out, None

    def predict(self, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
        states = np.asarray(states, dtype=np.float64)
        mean, _ = self.forward(states, np.asarray(actions, dtype=np.float64))
        return states + mean.data * self.norm.state_std

    def to_arrays(self) -> dict[str, np.ndarray]:
        return {**self.state_dict(), **self.norm.arrays()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        self.load_state_dict({k: v for k, v in arrays.items() if not k.startswith("norm.")})
        self.norm = Normalizer.from_arrays(arrays)

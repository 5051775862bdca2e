"""N-step soft actor-critic updates on belief-predicted states."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from ..delay import AugmentedState, tokenize
from ..numcore import OptState, Tape, adam_step, backward, make_generator, ops
from .buffer import WindowBatch
from .networks import Actor, CriticPair, EntropyTemp


@dataclass
class SACConfig:
    n_step: int = 8
    gamma: float = 0.99
    hidden: tuple[int, ...] = (256, 256)
    actor_lr: float = 3e-4
    critic_lr: float = 1e-3
    alpha_lr: float = 1e-3
    tau: float = 5e-3
    batch_size: int = 256
    actor_frequency: int = 2
    critic_frequency: int = 1
    learning_starts: int = 5000
    buffer_size: int = 1_000_000
    autotune: bool = True
    init_alpha: float = 1.0
    twin: bool = True
    entropy_sign: float = -1.0   # -1: soft value Q - alpha log pi; +1: literal "+ log pi"
    eval_every: int = 5000
    eval_episodes: int = 5

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def preset(cls, name: str, **kw) -> "SACConfig":
        if name not in ("paper", "desk"):
            raise ValueError(f"unknown preset {name!r}")
        if name == "desk":
            kw.setdefault("hidden", (64, 64))
        return cls(**kw)


@dataclass
class Agent:
    actor: Actor
    critics: CriticPair
    temp: EntropyTemp
    cfg: SACConfig
    actor_opt: OptState = field(default=None)
    critic_opt: OptState = field(default=None)
    alpha_opt: OptState = field(default=None)

    def __post_init__(self):
        self.actor_opt = self.actor_opt or OptState(lr=self.cfg.actor_lr)
        self.critic_opt = self.critic_opt or OptState(lr=self.cfg.critic_lr)
        self.alpha_opt = self.alpha_opt or OptState(lr=self.cfg.alpha_lr)

    @classmethod
    def create(cls, spec, cfg: SACConfig, seed: int) -> "Agent":
        rng = make_generator(seed, "agent/init")
        actor = Actor(spec.state_dim, spec.action_dim, spec.low, spec.high, cfg.hidden, rng)
        critics = CriticPair(spec.state_dim, spec.action_dim, cfg.hidden, rng, twin=cfg.twin)
        return cls(actor, critics, EntropyTemp(spec.action_dim, cfg.init_alpha), cfg)

    @property
    def alpha(self) -> float:
        return self.temp.alpha

    def arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for name, mod in (("actor", self.actor), ("critics", self.critics), ("temp", self.temp)):
            out.update({f"{name}.{k}": v for k, v in mod.state_dict().items()})
        return out

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for name, mod in (("actor", self.actor), ("critics", self.critics), ("temp", self.temp)):
            pre = name + "."
            mod.load_state_dict({k[len(pre):]: v for k, v in arrays.items() if k.startswith(pre)})


# ---------------------------------------------------------------------------


def belief_state(belief, aug: AugmentedState) -> np.ndarray:
    """The belief's estimate of the current state ``s_t`` (horizon = effective delay)."""
    n = aug.effective_delay
    if n == 0 or belief is None:
        return np.asarray(aug.anchor_state, dtype=np.float64)
    pred = belief.predict_tokens(tokenize(aug, n).tokens[None])[0, n - 1]
    if not np.all(np.isfinite(pred)):
        raise FloatingPointError("non-finite belief prediction")
    return pred


def act(actor: Actor, belief, aug: AugmentedState, deterministic: bool = False,
        rng: np.random.Generator | None = None) -> np.ndarray:
    """Sample (or take the mean of) the policy at the belief's current-state estimate."""
    s_hat = belief_state(belief, aug)
    action, _ = actor.sample(s_hat[None], rng=rng, deterministic=deterministic)
    return action.data[0]


def n_step_target(batch: WindowBatch, critics: CriticPair, actor: Actor, alpha: float,
                  gamma: float, noise: np.ndarray | None = None, rng=None,
                  entropy_sign: float = -1.0) -> np.ndarray:
    """``Y = sum_{i<m} g^i r_i + g^m [min Q_targ(s_{k+m}, a) - alpha log pi(a | s_hat_{k+m})]``.

    ``a ~ pi(. | s_hat_{k+m})``; the bootstrap term is dropped on true terminals.
    """
    m = batch.lengths
    N = batch.rewards.shape[1]
    if np.any(m < 1) or np.any(m > N):
        raise ValueError("window lengths must lie in 1..N")
    rsum = batch.rewards[:, 0].copy()
    for i in range(1, N):
        rsum = rsum + (gamma ** i) * batch.rewards[:, i]
    a_next, logp = actor.sample(batch.next_beliefs, noise=noise, rng=rng)
    minq = critics.target_min(batch.next_states, a_next.data)
    soft_v = minq + entropy_sign * alpha * logp.data
    disc = np.array([gamma ** int(k) for k in m])
    return rsum + disc * batch.bootstrap * soft_v


def critic_loss(critics: CriticPair, batch: WindowBatch, y: np.ndarray):
    """``1/2 mean (Q_i(s_k, a_k) - Y)^2`` summed over the critics."""
    q1 = critics.q1(batch.states, batch.actions)
    loss = ops.mul(ops.mean(ops.square(ops.sub(q1, y))), 0.5)
    if critics.twin:
        q2 = critics.q2(batch.states, batch.actions)
        loss = ops.add(loss, ops.mul(ops.mean(ops.square(ops.sub(q2, y))), 0.5))
    return loss


def critic_update(agent: Agent, batch: WindowBatch, y: np.ndarray) -> float:
    params = agent.critics.online_parameters()
    for p in params:
        p.grad = None
    with Tape() as tape:
        loss = critic_loss(agent.critics, batch, y)
    backward(tape, loss)
    adam_step(params, agent.critic_opt)
    return loss.item()


def actor_loss(actor: Actor, critics: CriticPair, batch: WindowBatch, alpha: float,
               noise: np.ndarray | None = None, rng=None):
    """``mean[alpha log pi(a | s_hat_{k+m}) - min Q(s_{k+m}, a)]`` with reparameterised ``a``."""
    action, logp = actor.sample(batch.next_beliefs, noise=noise, rng=rng)
    q = critics.q_min(batch.next_states, action)
    return ops.mean(ops.sub(ops.mul(logp, alpha), q)), logp


def actor_update(agent: Agent, batch: WindowBatch, rng) -> tuple[float, float]:
    """One actor step, then (if autotuned) one temperature step; returns (loss, alpha)."""
    params = agent.actor.parameters()
    for p in params:
        p.grad = None
    with Tape() as tape:
        loss, logp = actor_loss(agent.actor, agent.critics, batch, agent.alpha, rng=rng)
    backward(tape, loss)
    adam_step(params, agent.actor_opt)
    # critic parameters also received gradients here; they are not stepped
    for p in agent.critics.online_parameters():
        p.grad = None
    if agent.cfg.autotune:
        temp = agent.temp
        temp.log_alpha.grad = None
        with Tape() as tape:
            a_loss = ops.mean(ops.mul(ops.neg(ops.exp(temp.log_alpha)),
                                      logp.data + temp.target_entropy))
        backward(tape, a_loss)
        adam_step([temp.log_alpha], agent.alpha_opt)
    return loss.item(), agent.alpha

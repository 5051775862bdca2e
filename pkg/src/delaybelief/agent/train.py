"""Online DFBT-SAC loop (frozen belief), delay-free reference, evaluation and reports."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..delay import AugmentedState, DelayedEnv, DelaySpec
from ..envs import Env, RandomPolicy, Trajectory, resolve_env, rollout
from ..numcore import RngStreams, make_generator, save
from .buffer import IdentityBelief, ReplayBuffer
from .sac import Agent, SACConfig, act, actor_update, critic_update, n_step_target

log = logging.getLogger(__name__)

CURVE_COLUMNS = ["env_step", "mean_return", "std_return", "n_episodes", "alpha", "critic_loss",
                 "actor_loss"]


class UndelayedEnv:
    """Delay-free view with the :class:`DelayedEnv` interface (effective delay 0)."""

    def __init__(self, env):
        self.env: Env = resolve_env(env)

    @property
    def spec(self):
        return self.env.spec

    def _aug(self) -> AugmentedState:
        return AugmentedState(self.true_states[-1].copy(), np.zeros((0, self.spec.action_dim)),
                              np.zeros(0), 0, len(self.actions))

    def reset(self, seed: int) -> AugmentedState:
        self.seed = seed
        self._rng = make_generator(seed, "step/" + self.env.env_id)
        self.true_states = [self.env.reset(seed)]
        self.actions, self.rewards = [], []
        self.terminated = self.truncated = False
        return self._aug()

    def step(self, action):
        action = np.clip(np.asarray(action, dtype=np.float64).reshape(-1),
                         self.spec.low, self.spec.high)
        nxt, r, term = self.env.step(self.true_states[-1], action, self._rng)
        self.true_states.append(nxt)
        self.actions.append(action)
        self.rewards.append(r)
        self.terminated = term
        self.truncated = not term and len(self.actions) >= self.spec.horizon
        return self._aug(), r, term or self.truncated

    def trajectory(self) -> Trajectory:
        return Trajectory(np.array(self.true_states), np.array(self.actions),
                          np.array(self.rewards), self.terminated, self.truncated, self.seed)


class ActorPolicy:
    """Environment policy backed by a trained actor acting on the true state.

    With probability ``epsilon`` a uniform action replaces the actor's sample,
    which is how lower-quality demonstrations are produced from one checkpoint.
    """

    def __init__(self, actor, spec, epsilon: float = 0.0, deterministic: bool = False,
                 seed: int = 0):
        self.actor, self.spec = actor, spec
        self.epsilon, self.deterministic = float(epsilon), deterministic
        self.reseed(seed)

    def reseed(self, seed: int) -> None:
        self.rng = make_generator(seed, "policy/actor")

    def __call__(self, state):
        if self.rng.random() < self.epsilon:
            return self.rng.uniform(self.spec.low, self.spec.high)
        action, _ = self.actor.sample(np.asarray(state, dtype=np.float64)[None], rng=self.rng,
                                      deterministic=self.deterministic)
        return action.data[0]


def _handle(env, delay_spec: DelaySpec | None):
    return UndelayedEnv(env) if delay_spec is None else DelayedEnv(env, delay_spec)


def evaluate(agent: Agent, env, delay_spec: DelaySpec | None, belief, seeds) -> np.ndarray:
    """Undiscounted true returns of deterministic-policy episodes, one per seed."""
    handle = _handle(env, delay_spec)
    out = []
    for s in seeds:
        aug = handle.reset(int(s))
        done = False
        while not done:
            aug, _, done = handle.step(act(agent.actor, belief, aug, deterministic=True))
        out.append(float(np.sum(handle.rewards)))
    return np.array(out)


def random_returns(env, seeds) -> np.ndarray:
    env = resolve_env(env)
    return np.array([rollout(env, RandomPolicy(env.spec), env.spec.horizon, int(s)).rewards.sum()
                     for s in seeds])


def normalized_return(r_alg, r_sac, r_random):
    """``(R_alg - R_random) / (R_sac - R_random)``."""
    den = np.asarray(r_sac, dtype=np.float64) - np.asarray(r_random, dtype=np.float64)
    if np.any(np.abs(den) < 1e-12):
        raise ValueError("degenerate normalisation: R_sac equals R_random")
    return (np.asarray(r_alg, dtype=np.float64) - r_random) / den


@dataclass
class TrainResult:
    agent: Agent
    curve: list[dict] = field(default_factory=list)

    @property
    def final_return(self) -> float:
        return self.curve[-1]["mean_return"] if self.curve else float("nan")


def _check_dims(belief, spec) -> None:
    for attr, want in (("state_dim", spec.state_dim), ("action_dim", spec.action_dim)):
        got = getattr(belief, attr, want)
        if got != want:
            raise ValueError(f"belief {attr}={got} does not match the environment ({want})")


def train_dfbt_sac(env, delay_spec: DelaySpec | None, belief, steps: int, seed: int,
                   cfg: SACConfig | None = None, out_dir=None, agent: Agent | None = None,
                   eval_seeds=None) -> TrainResult:
    """Algorithm phase 2: online SAC with N-step targets on a frozen belief.

    ``delay_spec=None`` with ``belief=None`` is the delay-free SAC reference
    (policy and critic both see the true state).
    """
    cfg = cfg or SACConfig()
    env = resolve_env(env)
    spec = env.spec
    if delay_spec is None:
        belief = None
        horizon = cfg.n_step
        store_belief = IdentityBelief()
    else:
        if belief is None:
            raise ValueError("a delayed run needs a belief")
        _check_dims(belief, spec)
        horizon = delay_spec.delta_max
        store_belief = belief
    if cfg.n_step > horizon:
        raise ValueError(f"N={cfg.n_step} exceeds delta={horizon}")
    agent = agent or Agent.create(spec, cfg, seed)
    streams = RngStreams(seed)
    warm_rng, act_rng = streams.stream("warmup"), streams.stream("act")
    replay_rng, upd_rng = streams.stream("replay"), streams.stream("update")
    ep_rng = streams.stream("episodes")
    if eval_seeds is None:
        eval_seeds = streams.stream("eval").integers(0, 2 ** 31, size=cfg.eval_episodes)
    buffer = ReplayBuffer(cfg.buffer_size, cfg.n_step, horizon)
    handle = _handle(env, delay_spec)
    result = TrainResult(agent)
    c_losses: list[float] = []
    a_losses: list[float] = []
    aug = handle.reset(int(ep_rng.integers(0, 2 ** 31))) if steps > 0 else None
    for step in range(1, steps + 1):
        if step <= cfg.learning_starts:
            action = warm_rng.uniform(spec.low, spec.high)
        else:
            action = act(agent.actor, belief, aug, rng=act_rng)
        aug, _, done = handle.step(action)
        if done:
            buffer.add(handle.trajectory(), store_belief)
            aug = handle.reset(int(ep_rng.integers(0, 2 ** 31)))
        if step > cfg.learning_starts and len(buffer):
            if step % cfg.critic_frequency == 0:
                batch = buffer.sample(cfg.batch_size, replay_rng)
                y = n_step_target(batch, agent.critics, agent.actor, agent.alpha, cfg.gamma,
                                  rng=upd_rng, entropy_sign=cfg.entropy_sign)
                c_losses.append(critic_update(agent, batch, y))
            if step % cfg.actor_frequency == 0:
                # delayed policy updates, compensated by repeating them
                for _ in range(cfg.actor_frequency):
                    a_losses.append(actor_update(agent, buffer.sample(cfg.batch_size,
                                                                      replay_rng), upd_rng)[0])
            agent.critics.soft_update(cfg.tau)
        if step % cfg.eval_every == 0 or step == steps:
            rets = evaluate(agent, env, delay_spec, belief, eval_seeds)
            row = dict(env_step=step, mean_return=float(rets.mean()),
                       std_return=float(rets.std()), n_episodes=len(rets), alpha=agent.alpha,
                       critic_loss=float(np.mean(c_losses)) if c_losses else float("nan"),
                       actor_loss=float(np.mean(a_losses)) if a_losses else float("nan"))
            result.curve.append(row)
            log.info("step %d return %.2f alpha %.4f", step, row["mean_return"], row["alpha"])
            c_losses, a_losses = [], []
    if out_dir is not None:
        write_run(out_dir, result, cfg, dict(env_id=spec.env_id, seed=seed, steps=steps,
                                             delay=_delay_str(delay_spec),
                                             belief=getattr(belief, "name", "none")))
    return result


def _delay_str(d: DelaySpec | None) -> str:
    return "none" if d is None else f"{d.kind}:{d.delta_max}"


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return f"{float(v):.12g}"


def write_curve(path, rows: list[dict]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CURVE_COLUMNS)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in CURVE_COLUMNS])


def write_manifest(path, items: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for k in sorted(items):
            fh.write(f"{k}={items[k]}\n")


def write_run(out_dir, result: TrainResult, cfg: SACConfig, extra: dict) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_curve(out / "curve.csv", result.curve)
    save(out / "agent.dblf", result.agent.arrays())
    write_manifest(out / "manifest.txt", {**{f"sac.{k}": v for k, v in cfg.to_dict().items()},
                                          **extra})

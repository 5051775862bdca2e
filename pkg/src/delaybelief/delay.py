"""Observation-delay wrapper, augmented states and their token encoding.

Delay semantics: at each step a fresh delay ``d_t`` is drawn (always
``delta_max`` for the constant kind, ``U{1..delta_max}`` for the uniform kind)
and the index of the newest revealed state advances as
``p_t = max(p_{t-1}, t - d_t)``. Observations never un-arrive, and the
effective delay is ``t - p_t``.

Indices below zero refer to the padding history of the initial augmentation:
the state there is ``s0``, actions are zero vectors and rewards are zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .envs import Env, Trajectory, resolve_env
from .numcore.rng import make_generator

KINDS = ("constant", "uniform")


@dataclass(frozen=True)
class DelaySpec:
    kind: str = "constant"
    delta_max: int = 1

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"delay kind must be one of {KINDS}")
        if int(self.delta_max) < 1:
            raise ValueError("delta_max must be >= 1")

    def draw(self, rng: np.random.Generator) -> int:
        if self.kind == "constant":
            return self.delta_max
        return int(rng.integers(1, self.delta_max + 1))

    def probabilities(self) -> np.ndarray:
        """Distribution of the per-step delay over ``1..delta_max``."""
        p = np.zeros(self.delta_max)
        if self.kind == "constant":
            p[-1] = 1.0
        else:
            p[:] = 1.0 / self.delta_max
        return p


@dataclass
class AugmentedState:
    anchor_state: np.ndarray
    action_queue: np.ndarray     # (effective_delay, action_dim)
    reward_queue: np.ndarray     # (effective_delay,)
    effective_delay: int
    time_index: int = 0

    def __post_init__(self):
        if len(self.action_queue) != self.effective_delay or len(self.reward_queue) != self.effective_delay:
            raise ValueError("queue lengths must equal effective_delay")


@dataclass
class TokenSequence:
    tokens: np.ndarray           # (delta_max, state_dim + action_dim + 1)
    mask: np.ndarray             # (delta_max,) 1.0 valid, 0.0 padding
    positions: np.ndarray        # (delta_max,)

    @property
    def effective_delay(self) -> int:
        return int(self.mask.sum())


def initial_augmentation(s0, delay_spec: DelaySpec, action_dim: int) -> AugmentedState:
    d = delay_spec.delta_max
    return AugmentedState(np.array(s0, dtype=np.float64), np.zeros((d, action_dim)),
                          np.zeros(d), d, 0)


def tokenize(aug: AugmentedState, delta_max: int) -> TokenSequence:
    n = aug.effective_delay
    if n > delta_max:
        raise ValueError(f"queue length {n} exceeds delta_max {delta_max}")
    ds = aug.anchor_state.shape[0]
    da = aug.action_queue.shape[1] if aug.action_queue.ndim == 2 else 0
    tokens = np.zeros((delta_max, ds + da + 1))
    tokens[:n, :ds] = aug.anchor_state
    tokens[:n, ds:ds + da] = aug.action_queue
    tokens[:n, -1] = aug.reward_queue
    mask = np.zeros(delta_max)
    mask[:n] = 1.0
    return TokenSequence(tokens, mask, np.arange(delta_max))


def detokenize(ts: TokenSequence, state_dim: int, time_index: int = 0) -> AugmentedState:
    n = ts.effective_delay
    return AugmentedState(ts.tokens[0, :state_dim].copy(), ts.tokens[:n, state_dim:-1].copy(),
                          ts.tokens[:n, -1].copy(), n, time_index)


def tokenize_batch(anchors: np.ndarray, actions: np.ndarray, rewards: np.ndarray,
                   lengths: np.ndarray, delta_max: int) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised tokenisation.

    ``anchors`` (B, ds); ``actions`` (B, delta_max, da); ``rewards`` (B, delta_max);
    entries at or beyond ``lengths[b]`` are zeroed and masked.
    """
    b = anchors.shape[0]
    mask = (np.arange(delta_max)[None, :] < np.asarray(lengths)[:, None]).astype(np.float64)
    tokens = np.concatenate([
        np.broadcast_to(anchors[:, None, :], (b, delta_max, anchors.shape[1])),
        actions, rewards[..., None]], axis=-1) * mask[..., None]
    return tokens, mask


class DelayedEnv:
    """Delayed view of an environment.

    ``reset``/``step`` return :class:`AugmentedState`s. The true trajectory is
    kept in ``true_states`` / ``actions`` / ``rewards`` for training code and
    tests only.
    """

    def __init__(self, env, delay_spec: DelaySpec, seed: int = 0):
        self.env: Env = resolve_env(env)
        self.delay_spec = delay_spec
        self.seed = seed
        self.active = False

    @property
    def spec(self):
        return self.env.spec

    def reset(self, seed: int | None = None) -> AugmentedState:
        if seed is not None:
            self.seed = seed
        self._delay_rng = make_generator(self.seed, "delay")
        self._step_rng = make_generator(self.seed, "step/" + self.env.env_id)
        s0 = self.env.reset(self.seed)
        self.true_states = [s0]
        self.actions: list[np.ndarray] = []
        self.rewards: list[float] = []
        self.t = 0
        self.pointer = -self.delay_spec.delta_max
        self.terminated = self.truncated = False
        self.active = True
        self.pointer_history = [self.pointer]
        return initial_augmentation(s0, self.delay_spec, self.spec.action_dim)

    # privileged accessors -------------------------------------------------
    @property
    def true_state(self) -> np.ndarray:
        return self.true_states[-1]

    def state_at(self, i: int) -> np.ndarray:
        return self.true_states[max(i, 0)]

    def _action_at(self, i):
        return self.actions[i] if i >= 0 else np.zeros(self.spec.action_dim)

    def _reward_at(self, i):
        return self.rewards[i] if i >= 0 else 0.0

    def augmented(self) -> AugmentedState:
        p, t = self.pointer, self.t
        idx = range(p, t)
        acts = np.array([self._action_at(i) for i in idx]).reshape(t - p, self.spec.action_dim)
        rews = np.array([self._reward_at(i) for i in idx], dtype=np.float64)
        return AugmentedState(self.state_at(p).copy(), acts, rews, t - p, t)

    def trajectory(self) -> Trajectory:
        return Trajectory(np.array(self.true_states), np.array(self.actions),
                          np.array(self.rewards), self.terminated, self.truncated, self.seed)

    # -----------------------------------------------------------------------
    def step(self, action) -> tuple[AugmentedState, float, bool]:
        if not self.active:
            raise RuntimeError("step called on a finished (or never reset) episode")
        action = np.clip(np.asarray(action, dtype=np.float64).reshape(-1),
                         self.spec.low, self.spec.high)
        nxt, reward, terminated = self.env.step(self.true_state, action, self._step_rng)
        self.true_states.append(nxt)
        self.actions.append(action)
        self.rewards.append(reward)
        self.t += 1
        old = self.pointer
        self.pointer = max(old, self.t - self.delay_spec.draw(self._delay_rng))
        self.pointer_history.append(self.pointer)
        delayed_reward = float(sum(self._reward_at(i) for i in range(old, self.pointer)))
        self.terminated = terminated
        self.truncated = not terminated and self.t >= self.spec.horizon
        if terminated or self.truncated:
            self.active = False
        return self.augmented(), delayed_reward, not self.active


def wrap(env, delay_spec: DelaySpec, seed: int = 0) -> DelayedEnv:
    return DelayedEnv(env, delay_spec, seed)


def delayed_step(handle: DelayedEnv, action):
    return handle.step(action)


# ---------------------------------------------------------------------------
# replay windows over stored (privileged) trajectories

@dataclass
class ReplayWindow:
    states: np.ndarray      # s_{t-delta .. t-delta+n}
    actions: np.ndarray     # a_{t-delta .. t-delta+n-1}
    rewards: np.ndarray     # r_{t-delta .. t-delta+n-1}
    tokens: TokenSequence   # encoding of x_t
    terminal: bool          # the window ends on a true terminal state


def window_extract(traj: Trajectory, t: int, delta: int, n: int) -> ReplayWindow:
    """Slice the window anchored at ``k = t - delta`` covering ``n`` steps.

    ``t`` is a decision time (``delta <= t < len(traj)``). Tokens of ``x_t``
    hold the ``min(delta, len - k)`` actions that exist after the anchor.
    """
    length = len(traj)
    k = t - delta
    if delta < 1 or n < 1 or k < 0 or t >= length or k + n > length:
        raise IndexError(f"window (t={t}, delta={delta}, n={n}) out of range for length {length}")
    avail = min(delta, length - k)
    aug = AugmentedState(traj.states[k].copy(), traj.actions[k:k + avail].copy(),
                         traj.rewards[k:k + avail].copy(), avail, t)
    return ReplayWindow(traj.states[k:k + n + 1].copy(), traj.actions[k:k + n].copy(),
                        traj.rewards[k:k + n].copy(), tokenize(aug, delta),
                        bool(traj.terminated and k + n == length))


def trajectory_windows(traj: Trajectory, delta: int, lengths: np.ndarray | None = None):
    """Token batch and target states for every anchor ``k`` in ``0..len-1``.

    Returns ``tokens (T, delta, w)``, ``mask (T, delta)`` and
    ``targets (T, delta, ds)`` where ``targets[k, i] = s_{k+i+1}`` (zero where
    masked). ``lengths`` optionally caps the effective delay per anchor.
    """
    T = len(traj)
    ds, da = traj.states.shape[1], traj.actions.shape[1]
    idx = np.arange(T)[:, None] + np.arange(delta)[None, :]
    valid = idx < T
    idx_c = np.minimum(idx, T - 1)
    avail = valid.sum(axis=1)
    if lengths is not None:
        avail = np.minimum(avail, lengths)
    acts = traj.actions[idx_c]
    rews = traj.rewards[idx_c]
    tokens, mask = tokenize_batch(traj.states[:T], acts, rews, avail, delta)
    targets = traj.states[np.minimum(idx + 1, T)] * mask[..., None]
    return tokens, mask, targets

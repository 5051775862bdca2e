"""Toy continuous-control environments with known dynamics, plus datasets.

Three environments:

* ``pendulum``: classic torque-limited swing-up. State ``[cos th, sin th, thdot]``,
  reward ``-(th^2 + 0.1 thdot^2 + 0.001 u^2)`` in ``[-16.2736, 0]``.
* ``mass_spring_damper``: exact zero-order-hold discretisation of
  ``m x'' = -k x - c x' + u``, i.e. ``s' = A s + B u`` with
  ``A = expm(Ac dt)``. Reward ``-min(x^2 + 0.1 v^2 + 0.01 u^2, 10)`` in ``[-10, 0]``.
  The Lipschitz constant (sum metric on state and action) is
  ``max(||A||_2, ||B||_2)``.
* ``point_mass_reach``: 2-D point mass pushed towards a goal; reward is the
  negative distance to the goal (in ``[-3.5356, 0]``), and reaching the goal
  terminates the episode.

All dynamics are deterministic except for the optional unaware noise: with
probability ``noise_prob`` the next state receives additive Gaussian noise.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np
import scipy.linalg

from .numcore.rng import make_generator


@dataclass(frozen=True)
class EnvSpec:
    env_id: str
    state_dim: int
    action_dim: int
    action_low: tuple[float, ...]
    action_high: tuple[float, ...]
    gamma: float = 0.99
    horizon: int = 200
    noise_prob: float = 0.0
    noise_scale: float = 0.0
    reward_low: float = -np.inf
    reward_high: float = 0.0
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.action_low) != self.action_dim or len(self.action_high) != self.action_dim:
            raise ValueError("action bounds must match action_dim")
        if any(lo >= hi for lo, hi in zip(self.action_low, self.action_high)):
            raise ValueError("action_low must be < action_high")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must lie in (0, 1)")
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if not 0.0 <= self.noise_prob <= 1.0:
            raise ValueError("noise_prob must lie in [0, 1]")

    @property
    def low(self) -> np.ndarray:
        return np.asarray(self.action_low, dtype=np.float64)

    @property
    def high(self) -> np.ndarray:
        return np.asarray(self.action_high, dtype=np.float64)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["action_low"] = list(self.action_low)
        d["action_high"] = list(self.action_high)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EnvSpec":
        d = dict(d)
        d["action_low"] = tuple(d["action_low"])
        d["action_high"] = tuple(d["action_high"])
        return cls(**d)


class Env:
    """Base class: subclasses implement ``_init`` and ``batch_step``."""

    env_id = ""

    def __init__(self, spec: EnvSpec):
        self.spec = spec

    def reset(self, seed: int) -> np.ndarray:
        return self._init(make_generator(seed, "reset/" + self.env_id))

    def step(self, state, action, rng: np.random.Generator | None = None):
        """Advance one step; returns ``(next_state, reward, terminated)``."""
        state = np.asarray(state, dtype=np.float64)
        action = np.asarray(action, dtype=np.float64).reshape(-1)
        if state.shape != (self.spec.state_dim,):
            raise ValueError(f"state must have shape ({self.spec.state_dim},)")
        if action.shape != (self.spec.action_dim,):
            raise ValueError(f"action must have shape ({self.spec.action_dim},)")
        if not (np.isfinite(state).all() and np.isfinite(action).all()):
            raise ValueError("non-finite state or action")
        action = np.clip(action, self.spec.low, self.spec.high)
        nxt, reward, terminated = self.batch_step(state[None], action[None])
        nxt, reward, terminated = nxt[0], reward[0], terminated[0]
        if self.spec.noise_prob > 0.0:
            if rng is None:
                raise ValueError("a noisy environment needs an rng stream")
            if rng.random() < self.spec.noise_prob:
                nxt = nxt + rng.normal(0.0, self.spec.noise_scale, size=nxt.shape)
        return nxt, float(reward), bool(terminated)

    def predict(self, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
        """Noise-free next states for a batch; the same code path as ``step``."""
        actions = np.clip(actions, self.spec.low, self.spec.high)
        return self.batch_step(states, actions)[0]

    def _init(self, rng):
        raise NotImplementedError

    def batch_step(self, states, actions):
        """Deterministic dynamics on ``(B, ds)`` / ``(B, da)``: next states, rewards, terminals."""
        raise NotImplementedError


def _angle_normalize(x):
    return ((x + np.pi) % (2 * np.pi)) - np.pi


class Pendulum(Env):
    env_id = "pendulum"
    max_speed, max_torque, dt, g, m, l = 8.0, 2.0, 0.05, 10.0, 1.0, 1.0
    init_angle_range = (-np.pi, np.pi)
    init_speed_range = (-1.0, 1.0)

    def __init__(self, horizon: int = 200, gamma: float = 0.99, noise_prob: float = 0.0,
                 noise_scale: float = 0.0):
        super().__init__(EnvSpec("pendulum", 3, 1, (-2.0,), (2.0,), gamma, horizon,
                                 noise_prob, noise_scale,
                                 reward_low=-(np.pi ** 2 + 0.1 * 64.0 + 0.001 * 4.0)))

    def _init(self, rng):
        th = rng.uniform(*self.init_angle_range)
        thdot = rng.uniform(*self.init_speed_range)
        return np.array([np.cos(th), np.sin(th), thdot])

    def batch_step(self, states, actions):
        th = np.arctan2(states[:, 1], states[:, 0])
        thdot = states[:, 2]
        u = actions[:, 0]
        cost = _angle_normalize(th) ** 2 + 0.1 * thdot ** 2 + 0.001 * u ** 2
        newthdot = thdot + (3 * self.g / (2 * self.l) * np.sin(th)
                            + 3.0 / (self.m * self.l ** 2) * u) * self.dt
        newthdot = np.clip(newthdot, -self.max_speed, self.max_speed)
        newth = th + newthdot * self.dt
        nxt = np.stack([np.cos(newth), np.sin(newth), newthdot], axis=1)
        return nxt, -cost, np.zeros(len(states), dtype=bool)


class MassSpringDamper(Env):
    env_id = "mass_spring_damper"

    def __init__(self, stiffness: float = 1.0, damping: float = 0.5, mass: float = 1.0,
                 dt: float = 0.1, horizon: int = 200, gamma: float = 0.99,
                 noise_prob: float = 0.0, noise_scale: float = 0.0, dirac_init: bool = False):
        super().__init__(EnvSpec("mass_spring_damper", 2, 1, (-1.0,), (1.0,), gamma, horizon,
                                 noise_prob, noise_scale, reward_low=-10.0,
                                 params=dict(stiffness=stiffness, damping=damping, mass=mass,
                                             dt=dt, dirac_init=dirac_init)))
        ac = np.array([[0.0, 1.0], [-stiffness / mass, -damping / mass]])
        bc = np.array([[0.0], [1.0 / mass]])
        # zero-order hold: expm([[Ac, Bc], [0, 0]] dt) = [[A, B], [0, I]]
        block = np.zeros((3, 3))
        block[:2, :2], block[:2, 2:] = ac, bc
        disc = scipy.linalg.expm(block * dt)
        self.A = disc[:2, :2]
        self.B = disc[:2, 2:]
        self.dirac_init = dirac_init

    @property
    def lipschitz(self) -> float:
        return float(max(np.linalg.norm(self.A, 2), np.linalg.norm(self.B, 2)))

    def _init(self, rng):
        if self.dirac_init:
            return np.array([1.0, 0.0])
        return rng.uniform(-1.0, 1.0, size=2)

    def batch_step(self, states, actions):
        A, B = self.A, self.B
        x, v, u = states[:, 0], states[:, 1], actions[:, 0]
        cost = x ** 2 + 0.1 * v ** 2 + 0.01 * u ** 2
        # written out elementwise so single and batched calls round identically
        nxt = np.stack([A[0, 0] * x + A[0, 1] * v + B[0, 0] * u,
                        A[1, 0] * x + A[1, 1] * v + B[1, 0] * u], axis=1)
        return nxt, -np.minimum(cost, 10.0), np.zeros(len(states), dtype=bool)


class PointMassReach(Env):
    env_id = "point_mass_reach"
    dt, drag, box, vmax, tol = 0.1, 0.1, 2.0, 2.0, 0.05
    goal = np.array([0.5, 0.5])

    def __init__(self, horizon: int = 100, gamma: float = 0.99, noise_prob: float = 0.0,
                 noise_scale: float = 0.0):
        far = float(np.linalg.norm(np.array([-self.box, -self.box]) - self.goal))
        super().__init__(EnvSpec("point_mass_reach", 4, 2, (-1.0, -1.0), (1.0, 1.0), gamma,
                                 horizon, noise_prob, noise_scale, reward_low=-far))

    def _init(self, rng):
        return np.concatenate([rng.uniform(-1.0, 1.0, size=2), np.zeros(2)])

    def batch_step(self, states, actions):
        pos, vel = states[:, :2], states[:, 2:]
        dist = np.sqrt(((pos - self.goal) ** 2).sum(axis=1))
        vel = np.clip((1.0 - self.drag) * vel + self.dt * actions, -self.vmax, self.vmax)
        pos = np.clip(pos + self.dt * vel, -self.box, self.box)
        reached = np.sqrt(((pos - self.goal) ** 2).sum(axis=1)) < self.tol
        return np.concatenate([pos, vel], axis=1), -dist, reached


ENV_IDS = ("pendulum", "mass_spring_damper", "point_mass_reach")
_REGISTRY = {"pendulum": Pendulum, "mass_spring_damper": MassSpringDamper,
             "point_mass_reach": PointMassReach}


def make_env(env_id: str, **params) -> Env:
    try:
        cls = _REGISTRY[env_id]
    except KeyError:
        raise ValueError(f"unknown env_id {env_id!r}; expected one of {ENV_IDS}") from None
    return cls(**params)


def env_from_spec(spec: EnvSpec) -> Env:
    """Rebuild an environment from a spec snapshot (e.g. a dataset header)."""
    kwargs = dict(spec.params)
    kwargs.update(horizon=spec.horizon, gamma=spec.gamma, noise_prob=spec.noise_prob,
                  noise_scale=spec.noise_scale)
    return make_env(spec.env_id, **kwargs)


def resolve_env(env) -> Env:
    return env if isinstance(env, Env) else make_env(env)


def env_reset(env_id, seed: int) -> np.ndarray:
    return resolve_env(env_id).reset(seed)


def env_step(env_id, state, action, rng=None):
    return resolve_env(env_id).step(state, action, rng)


# ---------------------------------------------------------------------------
# trajectories

@dataclass
class Transition:
    state: np.ndarray
    action: np.ndarray
    reward: float
    next_state: np.ndarray
    done: bool
    truncated: bool
    step_index: int


@dataclass
class Trajectory:
    """One episode stored column-wise; ``states`` has one more row than ``actions``.

    ``terminated`` marks a true terminal on the last record; ``truncated`` marks a
    time-limit cut. Either one sets the done flag of the last Transition.
    """

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    terminated: bool = False
    truncated: bool = False
    seed: int = 0
    label: str = ""

    def __len__(self) -> int:
        return len(self.actions)

    def transitions(self) -> Iterator[Transition]:
        n = len(self)
        for i in range(n):
            last = i == n - 1
            yield Transition(self.states[i], self.actions[i], float(self.rewards[i]),
                             self.states[i + 1], last and (self.terminated or self.truncated),
                             last and self.truncated, i)

    def validate(self, spec: EnvSpec) -> None:
        n = len(self)
        if n < 1:
            raise ValueError("empty trajectory")
        if self.states.shape != (n + 1, spec.state_dim) or self.actions.shape != (n, spec.action_dim):
            raise ValueError("trajectory arrays do not match the env spec")
        if not (self.terminated or self.truncated):
            raise ValueError("final record must carry a done flag")


Policy = Callable[[np.ndarray], np.ndarray]


class RandomPolicy:
    """Uniform actions inside the bounds; reseeded per trajectory."""

    def __init__(self, spec: EnvSpec, seed: int = 0):
        self.spec = spec
        self.reseed(seed)

    def reseed(self, seed: int) -> None:
        self.rng = make_generator(seed, "policy/random")

    def __call__(self, state):
        return self.rng.uniform(self.spec.low, self.spec.high)


class ConstantPolicy:
    def __init__(self, action):
        self.action = np.atleast_1d(np.asarray(action, dtype=np.float64))

    def __call__(self, state):
        return self.action.copy()


class LinearFeedbackPolicy:
    """``u = -K s`` plus optional Gaussian noise and epsilon-random actions, clipped.

    A scripted stand-in for "medium"/"expert" behaviour on linear systems.
    """

    def __init__(self, spec: EnvSpec, gain, noise_std: float = 0.0, epsilon: float = 0.0,
                 seed: int = 0):
        self.spec = spec
        self.gain = np.atleast_2d(np.asarray(gain, dtype=np.float64))
        self.noise_std = noise_std
        self.epsilon = epsilon
        self.reseed(seed)

    def reseed(self, seed: int) -> None:
        self.rng = make_generator(seed, "policy/feedback")

    def __call__(self, state):
        if self.epsilon and self.rng.random() < self.epsilon:
            return self.rng.uniform(self.spec.low, self.spec.high)
        u = -self.gain @ np.asarray(state, dtype=np.float64)
        if self.noise_std:
            u = u + self.rng.normal(0.0, self.noise_std, size=u.shape)
        return np.clip(u, self.spec.low, self.spec.high)


def lqr_gain(A, B, Q, R) -> np.ndarray:
    """Infinite-horizon discrete LQR gain ``K`` for ``x' = Ax + Bu``."""
    P = scipy.linalg.solve_discrete_are(A, B, Q, R)
    return np.linalg.solve(R + B.T @ P @ B, B.T @ P @ A)


def msd_policy_mix(env: "MassSpringDamper", weights=(0.3, 0.3, 0.4), seed: int = 0):
    """Random / medium / expert mix for the mass-spring-damper using LQR feedback."""
    K = lqr_gain(env.A, env.B, np.diag([1.0, 0.1]), np.array([[0.01]]))
    return [("random", weights[0], RandomPolicy(env.spec, seed)),
            ("medium", weights[1], LinearFeedbackPolicy(env.spec, K, 0.3, 0.3, seed)),
            ("expert", weights[2], LinearFeedbackPolicy(env.spec, K, 0.05, 0.0, seed))]


def rollout(env, policy: Policy, horizon: int, seed: int) -> Trajectory:
    env = resolve_env(env)
    spec = env.spec
    if hasattr(policy, "reseed"):
        policy.reseed(seed)
    step_rng = make_generator(seed, "step/" + env.env_id)
    state = env.reset(seed)
    states, actions, rewards = [state], [], []
    terminated = False
    for _ in range(horizon):
        action = np.asarray(policy(state), dtype=np.float64).reshape(-1)
        if action.shape != (spec.action_dim,):
            raise ValueError(f"policy returned action of shape {action.shape}, "
                             f"expected ({spec.action_dim},)")
        action = np.clip(action, spec.low, spec.high)
        state, reward, terminated = env.step(state, action, step_rng)
        states.append(state)
        actions.append(action)
        rewards.append(reward)
        if terminated:
            break
    return Trajectory(np.array(states), np.array(actions), np.array(rewards),
                      terminated=terminated, truncated=not terminated, seed=seed)


# ---------------------------------------------------------------------------
# dataset file

DATASET_MAGIC = b"DBTJ"
DATASET_VERSION = 1


@dataclass
class Dataset:
    spec: EnvSpec
    trajectories: list[Trajectory]

    @property
    def n_transitions(self) -> int:
        return sum(len(t) for t in self.trajectories)

    def label_counts(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for t in self.trajectories:
            out[t.label] = out.get(t.label, 0) + len(t)
        return out


def _pack_str(s: str, fmt: str = "<H") -> bytes:
    raw = s.encode("utf-8")
    return struct.pack(fmt, len(raw)) + raw


def _unpack_str(blob, off, fmt="<H"):
    (n,) = struct.unpack_from(fmt, blob, off)
    off += struct.calcsize(fmt)
    return blob[off:off + n].decode("utf-8"), off + n


def dataset_bytes(ds: Dataset) -> bytes:
    spec = ds.spec
    out = [DATASET_MAGIC, struct.pack("<I", DATASET_VERSION), _pack_str(spec.env_id),
           _pack_str(json.dumps(spec.to_dict(), sort_keys=True), "<I"),
           struct.pack("<I", len(ds.trajectories))]
    for traj in ds.trajectories:
        traj.validate(spec)
        n = len(traj)
        out.append(struct.pack("<Q", traj.seed & ((1 << 64) - 1)))
        out.append(_pack_str(traj.label))
        out.append(struct.pack("<I", n))
        idx = np.arange(n, dtype=np.float64)
        done = np.zeros(n)
        trunc = np.zeros(n)
        done[-1] = 1.0
        trunc[-1] = float(traj.truncated)
        rec = np.column_stack([traj.states[:-1], traj.actions, traj.rewards, traj.states[1:],
                               done, trunc, idx])
        out.append(np.ascontiguousarray(rec, dtype="<f8").tobytes())
    return b"".join(out)


def write_dataset(path, ds: Dataset) -> None:
    Path(path).write_bytes(dataset_bytes(ds))


def read_dataset(path) -> Dataset:
    blob = Path(path).read_bytes()
    if blob[:4] != DATASET_MAGIC:
        raise ValueError(f"{path}: not a DBTJ dataset")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != DATASET_VERSION:
        raise ValueError(f"{path}: unsupported dataset version {version}")
    env_id, off = _unpack_str(blob, 8)
    spec_json, off = _unpack_str(blob, off, "<I")
    spec = EnvSpec.from_dict(json.loads(spec_json))
    if spec.env_id != env_id:
        raise ValueError("dataset header env id disagrees with its spec")
    (count,) = struct.unpack_from("<I", blob, off)
    off += 4
    ds_, da = spec.state_dim, spec.action_dim
    width = 2 * ds_ + da + 4
    trajs = []
    for _ in range(count):
        (seed,) = struct.unpack_from("<Q", blob, off)
        off += 8
        label, off = _unpack_str(blob, off)
        (n,) = struct.unpack_from("<I", blob, off)
        off += 4
        rec = np.frombuffer(blob, dtype="<f8", count=n * width, offset=off).reshape(n, width)
        off += 8 * n * width
        rec = rec.astype(np.float64)
        states = np.vstack([rec[:, :ds_], rec[-1:, ds_ + da + 1:2 * ds_ + da + 1]])
        truncated = bool(rec[-1, -2])
        trajs.append(Trajectory(states, rec[:, ds_:ds_ + da].copy(), rec[:, ds_ + da].copy(),
                                terminated=not truncated, truncated=truncated,
                                seed=int(seed), label=label))
    if off != len(blob):
        raise ValueError(f"{path}: trailing bytes")
    return Dataset(spec, trajs)


def export_jsonl(ds: Dataset, path) -> None:
    """Human-readable dump, one transition per line. Not the canonical format."""
    with open(path, "w") as fh:
        for k, traj in enumerate(ds.trajectories):
            for tr in traj.transitions():
                fh.write(json.dumps({
                    "trajectory": k, "seed": traj.seed, "label": traj.label,
                    "step": tr.step_index, "state": tr.state.tolist(),
                    "action": tr.action.tolist(), "reward": tr.reward,
                    "next_state": tr.next_state.tolist(), "done": tr.done,
                    "truncated": tr.truncated}) + "\n")


def collect_dataset(env, policy_mix: Sequence[tuple[str, float, Policy]], n_transitions: int,
                    seed: int, path=None, horizon: int | None = None) -> Dataset:
    """Roll out trajectories, drawing each one's policy label from ``policy_mix``.

    Exactly ``n_transitions`` transitions are kept; the final trajectory is cut
    short (and marked truncated) if needed.
    """
    env = resolve_env(env)
    if n_transitions <= 0:
        raise ValueError("n_transitions must be positive")
    if not policy_mix:
        raise ValueError("policy_mix is empty")
    labels = [m[0] for m in policy_mix]
    weights = np.array([m[1] for m in policy_mix], dtype=np.float64)
    if (weights < 0).any() or weights.sum() <= 0:
        raise ValueError("policy weights must be nonnegative and not all zero")
    weights = weights / weights.sum()
    horizon = horizon or env.spec.horizon
    pick_rng = make_generator(seed, "collect/labels")
    seed_rng = make_generator(seed, "collect/seeds")
    trajs, total = [], 0
    while total < n_transitions:
        k = int(pick_rng.choice(len(labels), p=weights))
        traj_seed = int(seed_rng.integers(0, 2**63))
        traj = rollout(env, policy_mix[k][2], min(horizon, n_transitions - total), traj_seed)
        traj.label = labels[k]
        trajs.append(traj)
        total += len(traj)
    ds = Dataset(env.spec, trajs)
    if path is not None:
        write_dataset(path, ds)
    return ds

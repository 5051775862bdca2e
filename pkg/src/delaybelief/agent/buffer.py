"""Trajectory replay with privileged true states and frozen belief predictions."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..delay import trajectory_windows
from ..envs import Trajectory


@dataclass
class WindowBatch:
    """``B`` windows anchored at ``k`` and cut at ``m = min(N, T - k)`` steps.

    ``rewards`` is zero-padded to ``N`` columns; ``bootstrap`` is 0 where the
    window ends on a true terminal state.
    """

    states: np.ndarray         # s_k (true)
    actions: np.ndarray        # a_k
    rewards: np.ndarray        # r_k .. r_{k+m-1}, shape (B, N)
    lengths: np.ndarray        # m
    next_states: np.ndarray    # s_{k+m} (true)
    next_beliefs: np.ndarray   # s_hat_{k+m} from belief head m
    bootstrap: np.ndarray      # 1.0 / 0.0

    def __len__(self) -> int:
        return len(self.states)


class IdentityBelief:
    """Delay-free reference: the "prediction" of ``s_{k+i}`` is ``s_{k+i}`` itself."""

    name = "identity"

    def window_predictions(self, traj: Trajectory, delta: int) -> np.ndarray:
        return trajectory_windows(traj, delta)[2]


def window_predictions(belief, traj: Trajectory, delta: int) -> np.ndarray:
    """``preds[k, i]`` estimates ``s_{k+i+1}`` from the tokens anchored at ``k``."""
    if hasattr(belief, "window_predictions"):
        return belief.window_predictions(traj, delta)
    tokens, _, _ = trajectory_windows(traj, delta)
    return belief.predict_tokens(tokens)


def _window_arrays(traj: Trajectory, preds: np.ndarray, N: int) -> dict[str, np.ndarray]:
    """Per-anchor window fields for every ``k`` of one trajectory."""
    T = len(traj)
    k = np.arange(T)
    m = np.minimum(N, T - k)
    cols = k[:, None] + np.arange(N)[None, :]
    rewards = np.where(np.arange(N)[None, :] < m[:, None],
                       traj.rewards[np.minimum(cols, T - 1)], 0.0)
    boot = np.ones(T)
    if traj.terminated:
        boot[k + m == T] = 0.0
    return dict(states=traj.states[:T], actions=traj.actions, rewards=rewards, lengths=m,
                next_states=traj.states[k + m], next_beliefs=preds[k, m - 1], bootstrap=boot)


class ReplayBuffer:
    """FIFO store of complete trajectories, evicting whole episodes past ``capacity``.

    Windows never cross an episode boundary: each stored anchor ``k`` only
    looks at its own trajectory, truncated at ``m = min(N, T - k)``.
    """

    def __init__(self, capacity: int, n_step: int, delta: int):
        if n_step < 1 or n_step > delta:
            raise ValueError(f"need 1 <= N <= delta, got N={n_step}, delta={delta}")
        self.capacity = capacity
        self.n_step = n_step
        self.delta = delta
        self.trajs: list[Trajectory] = []
        self.preds: list[np.ndarray] = []
        self._parts: list[dict[str, np.ndarray]] = []
        self._flat: dict[str, np.ndarray] | None = None
        self.size = 0

    def __len__(self) -> int:
        return self.size

    def add(self, traj: Trajectory, belief) -> None:
        if len(traj) == 0:
            return
        preds = window_predictions(belief, traj, self.delta)
        if not np.all(np.isfinite(preds)):
            raise FloatingPointError("non-finite belief prediction")
        self.trajs.append(traj)
        self.preds.append(preds)
        self._parts.append(_window_arrays(traj, preds, self.n_step))
        self.size += len(traj)
        while self.size > self.capacity and len(self.trajs) > 1:
            self.size -= len(self.trajs.pop(0))
            self.preds.pop(0)
            self._parts.pop(0)
        self._flat = None

    def index(self) -> np.ndarray:
        """``(trajectory, anchor)`` for each flat position, in storage order."""
        return np.concatenate([np.stack([np.full(len(t), i), np.arange(len(t))], axis=1)
                               for i, t in enumerate(self.trajs)])

    def sample_indices(self, batch_size: int, rng: np.random.Generator) -> np.ndarray:
        """Uniform flat positions over all stored anchors."""
        if self.size == 0:
            raise ValueError("empty replay buffer")
        return rng.integers(0, self.size, size=batch_size)

    def gather(self, flat_idx: np.ndarray) -> WindowBatch:
        if self._flat is None:
            self._flat = {key: np.concatenate([p[key] for p in self._parts])
                          for key in self._parts[0]}
        f = self._flat
        return WindowBatch(**{key: f[key][flat_idx] for key in f})

    def sample(self, batch_size: int, rng: np.random.Generator) -> WindowBatch:
        return self.gather(self.sample_indices(batch_size, rng))

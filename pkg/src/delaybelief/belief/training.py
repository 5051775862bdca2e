"""Losses, training loops, forecasting helpers and the L1 belief-error metric."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from ..delay import AugmentedState, DelaySpec, TokenSequence, tokenize_batch
from ..envs import Dataset, Trajectory
from ..numcore import DArray, OptState, RngStreams, Tape, adamw_step, backward, ops
from .models import DFBT, RecursiveModel

log = logging.getLogger(__name__)

LOSS_KINDS = ("mse", "gaussian_nll")

# Optimisation settings shared by both forecasters under each preset, so the
# direct/recursive comparison always uses an equal gradient-step budget.
TRAIN_PRESETS = {
    "paper": dict(epochs=1000, batch_size=256, lr=1e-4, weight_decay=1e-4, betas=(0.9, 0.999),
                  lr_schedule="constant", steps_per_epoch=None),
    "desk": dict(epochs=30, batch_size=64, lr=1e-3, weight_decay=1e-4, betas=(0.9, 0.999),
                 lr_schedule="cosine", steps_per_epoch=100),
}
_HALF_LOG_2PI = 0.5 * np.log(2.0 * np.pi)


# ---------------------------------------------------------------------------
# losses

def masked_loss(mean: DArray, log_std: DArray | None, target: np.ndarray, mask: np.ndarray,
                kind: str = "mse") -> DArray:
    """Mean over valid positions of the per-position loss.

    ``mean``/``log_std``/``target`` have shape ``(..., ds)`` and ``mask`` the
    leading shape. ``mse`` sums squared errors over the state dimensions;
    ``gaussian_nll`` is the diagonal-Gaussian negative log-likelihood (unit
    variance when ``log_std`` is None).
    """
    if kind not in LOSS_KINDS:
        raise ValueError(f"loss kind must be one of {LOSS_KINDS}")
    mask = np.asarray(mask, dtype=np.float64)
    total = float(mask.sum())
    if total <= 0:
        raise ValueError("every position is masked")
    diff = ops.sub(mean, np.asarray(target, dtype=np.float64))
    ds = mean.shape[-1]
    if kind == "mse":
        per = ops.sum_(ops.square(diff), axis=-1)
    else:
        if log_std is None:
            per = ops.add(ops.mul(ops.sum_(ops.square(diff), axis=-1), 0.5), ds * _HALF_LOG_2PI)
        else:
            z = ops.div(diff, ops.exp(log_std))
            per = ops.sum_(ops.add(ops.mul(ops.square(z), 0.5), log_std), axis=-1)
            per = ops.add(per, ds * _HALF_LOG_2PI)
    return ops.div(ops.sum_(ops.mul(per, mask)), total)


def dfbt_loss(model: DFBT, tokens: np.ndarray, mask: np.ndarray, targets: np.ndarray,
              kind: str = "mse", train: bool = False, rng=None) -> DArray:
    """Loss of DFBT predictions against true hidden states (normalised residual units)."""
    mean, log_std = model.forward(tokens, train=train, rng=rng)
    ds = model.cfg.state_dim
    anchor = np.asarray(tokens)[:, :1, :ds]
    target_n = (np.asarray(targets) - anchor) / model.norm.state_std * np.asarray(mask)[..., None]
    if kind == "gaussian_nll" and log_std is None:
        raise ValueError("gaussian_nll needs a model with a Gaussian head")
    return masked_loss(mean, log_std, target_n, mask, kind)


def recursive_loss(pmodel: RecursiveModel, states, actions, next_states,
                   kind: str = "mse") -> DArray:
    mean, log_std = pmodel.forward(states, actions)
    target_n = (next_states - states) / pmodel.norm.state_std
    if kind == "gaussian_nll" and log_std is None:
        raise ValueError("gaussian_nll needs a model with a Gaussian head")
    return masked_loss(mean, log_std, target_n, np.ones(len(states)), kind)


def dfbt_forward(model: DFBT, tokens, train_flag: bool = False, rng=None) -> np.ndarray:
    """Predicted hidden states for a :class:`TokenSequence` or token batch.

    Masked positions are returned as zeros.
    """
    if isinstance(tokens, TokenSequence):
        pred = dfbt_forward(model, tokens.tokens[None], train_flag, rng)[0]
        return pred * tokens.mask[:, None]
    tokens = np.asarray(tokens, dtype=np.float64)
    mean, _ = model.forward(tokens, train=train_flag, rng=rng)
    return tokens[:, :1, :model.cfg.state_dim] + mean.data * model.norm.state_std


# ---------------------------------------------------------------------------
# training data

def full_windows(dataset: Dataset, delta: int):
    """Every length-``delta`` window of every trajectory (anchors ``k <= T - delta``)."""
    toks, targs = [], []
    for traj in dataset.trajectories:
        T = len(traj)
        if T < delta:
            continue
        k = np.arange(T - delta + 1)
        idx = k[:, None] + np.arange(delta)[None, :]
        tokens, _ = tokenize_batch(traj.states[k], traj.actions[idx], traj.rewards[idx],
                                   np.full(len(k), delta), delta)
        toks.append(tokens)
        targs.append(traj.states[idx + 1])
    if not toks:
        raise ValueError(f"no trajectory is long enough for delta={delta}")
    return np.concatenate(toks), np.concatenate(targs)


def one_step_pairs(dataset: Dataset):
    trajs = [t for t in dataset.trajectories if len(t)]
    if not trajs:
        raise ValueError("dataset has no transitions")
    s = np.concatenate([t.states[:-1] for t in trajs])
    a = np.concatenate([t.actions for t in trajs])
    s2 = np.concatenate([t.states[1:] for t in trajs])
    return s, a, s2


def split_dataset(dataset: Dataset, held_out: float, seed: int) -> tuple[Dataset, Dataset]:
    """Split by whole trajectories into (train, held-out)."""
    rng = RngStreams(seed).stream("split")
    n = len(dataset.trajectories)
    order = rng.permutation(n)
    n_out = int(round(held_out * n))
    if n > 1:
        n_out = min(max(n_out, 1), n - 1)
    out = set(order[:n_out].tolist())
    tr = [t for i, t in enumerate(dataset.trajectories) if i not in out]
    te = [t for i, t in enumerate(dataset.trajectories) if i in out]
    return Dataset(dataset.spec, tr), Dataset(dataset.spec, te)


# ---------------------------------------------------------------------------
# training loops

def _batches(n: int, batch_size: int, rng, steps: int | None):
    order = rng.permutation(n)
    n_batches = _steps_per_epoch(n, batch_size, steps)
    for i in range(n_batches):
        yield order[i * batch_size:(i + 1) * batch_size]


def _lr_at(base: float, schedule: str, step: int, total: int) -> float:
    if schedule == "constant":
        return base
    if schedule == "cosine":
        return 0.5 * base * (1.0 + np.cos(np.pi * min(step, total) / max(total, 1)))
    raise ValueError(f"unknown lr schedule {schedule!r}")


def _steps_per_epoch(n: int, batch_size: int, cap: int | None) -> int:
    k = max(1, n // batch_size)
    return k if cap is None else min(k, cap)


def train_dfbt(model: DFBT, dataset: Dataset, delay_spec: DelaySpec, epochs: int, seed: int,
               batch_size: int = 256, lr: float = 1e-4, weight_decay: float = 1e-4,
               betas: tuple[float, float] = (0.9, 0.999), loss_kind: str = "mse",
               steps_per_epoch: int | None = None, lr_schedule: str = "constant",
               callback: Callable[[int, float], None] | None = None):
    """AdamW on uniformly sampled windows; returns ``(model, per-epoch train loss)``."""
    delta = delay_spec.delta_max
    if delta > model.cfg.delta_max:
        raise ValueError("delay exceeds the model's delta_max")
    tokens, targets = full_windows(dataset, delta)
    streams = RngStreams(seed)
    order_rng = streams.stream("dfbt/batches")
    drop_rng = streams.stream("dfbt/dropout")
    delay_rng = streams.stream("dfbt/delay")
    params = model.parameters()
    opt = OptState(lr=lr, beta1=betas[0], beta2=betas[1], weight_decay=weight_decay)
    ds = model.cfg.state_dim
    total = epochs * _steps_per_epoch(len(tokens), batch_size, steps_per_epoch)
    curve: list[float] = []
    for epoch in range(epochs):
        losses = []
        for idx in _batches(len(tokens), batch_size, order_rng, steps_per_epoch):
            opt.lr = _lr_at(lr, lr_schedule, opt.t, total)
            tok, tgt = tokens[idx], targets[idx]
            if delay_spec.kind == "constant":
                mask = np.ones(tok.shape[:2])
            else:
                lengths = delay_rng.integers(1, delta + 1, size=len(idx))
                tok, mask = tokenize_batch(tok[:, 0, :ds], tok[:, :, ds:-1], tok[:, :, -1],
                                           lengths, delta)
            model.zero_grads()
            with Tape() as tape:
                loss = dfbt_loss(model, tok, mask, tgt, loss_kind, train=True, rng=drop_rng)
            backward(tape, loss)
            adamw_step(params, opt)
            losses.append(loss.item())
        curve.append(float(np.mean(losses)))
        if callback:
            callback(epoch, curve[-1])
    return model, curve


def train_recursive(pmodel: RecursiveModel, dataset: Dataset, epochs: int, seed: int,
                    batch_size: int = 256, lr: float = 1e-3, weight_decay: float = 0.0,
                    betas: tuple[float, float] = (0.9, 0.999), loss_kind: str = "mse",
                    steps_per_epoch: int | None = None,
                    lr_schedule: str = "constant", callback: Callable[[int, float], None] | None = None):
    """Fit the one-step model on ``(s, a, s')`` pairs; returns ``(model, curve)``."""
    s, a, s2 = one_step_pairs(dataset)
    order_rng = RngStreams(seed).stream("recursive/batches")
    params = pmodel.parameters()
    opt = OptState(lr=lr, beta1=betas[0], beta2=betas[1], weight_decay=weight_decay)
    total = epochs * _steps_per_epoch(len(s), batch_size, steps_per_epoch)
    curve: list[float] = []
    for epoch in range(epochs):
        losses = []
        for idx in _batches(len(s), batch_size, order_rng, steps_per_epoch):
            opt.lr = _lr_at(lr, lr_schedule, opt.t, total)
            pmodel.zero_grads()
            with Tape() as tape:
                loss = recursive_loss(pmodel, s[idx], a[idx], s2[idx], loss_kind)
            backward(tape, loss)
            adamw_step(params, opt)
            losses.append(loss.item())
        curve.append(float(np.mean(losses)))
        if callback:
            callback(epoch, curve[-1])
    return pmodel, curve


# ---------------------------------------------------------------------------
# forecasting

def recursive_forecast_batch(pmodel, anchors: np.ndarray, actions: np.ndarray) -> np.ndarray:
    """Apply ``pmodel.predict`` once per queued action: ``(B, n, ds)`` predictions."""
    s = np.asarray(anchors, dtype=np.float64)
    out = np.empty((s.shape[0], actions.shape[1], s.shape[1]))
    for i in range(actions.shape[1]):
        s = pmodel.predict(s, actions[:, i])
        if not np.all(np.isfinite(s)):
            raise FloatingPointError(f"non-finite state after {i + 1} recursive steps")
        out[:, i] = s
    return out


def recursive_forecast(pmodel, aug: AugmentedState) -> np.ndarray:
    """Predicted ``s_{t-D+1..t}`` by ``effective_delay`` applications of ``pmodel``."""
    return recursive_forecast_batch(pmodel, aug.anchor_state[None], aug.action_queue[None])[0]


class DFBTBelief:
    """Direct forecasts from a trained DFBT."""

    name = "dfbt"

    def __init__(self, model: DFBT):
        self.model = model
        self.state_dim = model.cfg.state_dim
        self.action_dim = model.cfg.action_dim

    def predict_tokens(self, tokens: np.ndarray) -> np.ndarray:
        return self.model.predict(tokens)


class RecursiveBelief:
    """Recursive forecasts from any object exposing batched ``predict(states, actions)``."""

    name = "recursive"

    def __init__(self, pmodel, state_dim: int, action_dim: int):
        self.pmodel = pmodel
        self.state_dim = state_dim
        self.action_dim = action_dim

    def predict_tokens(self, tokens: np.ndarray) -> np.ndarray:
        ds, da = self.state_dim, self.action_dim
        return recursive_forecast_batch(self.pmodel, tokens[:, 0, :ds], tokens[:, :, ds:ds + da])


class OracleBelief(RecursiveBelief):
    """Recursive forecasting with the simulator's own noise-free dynamics."""

    name = "oracle"

    def __init__(self, env):
        super().__init__(env, env.spec.state_dim, env.spec.action_dim)


# ---------------------------------------------------------------------------
# metric

@dataclass
class BeliefCurve:
    mean: np.ndarray
    std: np.ndarray
    n: np.ndarray

    @property
    def horizons(self) -> np.ndarray:
        return np.arange(1, len(self.mean) + 1)


def belief_error(predicted: np.ndarray, true_states: np.ndarray,
                 mask: np.ndarray | None = None) -> BeliefCurve:
    """Per-horizon mean and std of the L1 error ``|s_hat - s|_1``."""
    predicted = np.asarray(predicted, dtype=np.float64)
    true_states = np.asarray(true_states, dtype=np.float64)
    if predicted.shape != true_states.shape or predicted.ndim != 3:
        raise ValueError(f"shape mismatch {predicted.shape} vs {true_states.shape}")
    if mask is None:
        mask = np.ones(predicted.shape[:2])
    mask = np.asarray(mask, dtype=bool)
    if predicted.shape[0] == 0 or not mask.any():
        raise ValueError("empty evaluation set")
    err = np.abs(predicted - true_states).sum(axis=-1)
    n = mask.sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = np.where(mask, err, 0.0).sum(0) / n
        var = np.where(mask, (err - mean) ** 2, 0.0).sum(0) / n
    return BeliefCurve(mean, np.sqrt(var), n)


def evaluate_belief(belief, dataset: Dataset, delta: int, max_windows: int | None = None,
                    seed: int = 0, batch: int = 1024) -> BeliefCurve:
    tokens, targets = full_windows(dataset, delta)
    if max_windows is not None and len(tokens) > max_windows:
        pick = np.sort(RngStreams(seed).stream("eval/windows").choice(len(tokens), max_windows,
                                                                      replace=False))
        tokens, targets = tokens[pick], targets[pick]
    preds = np.concatenate([belief.predict_tokens(tokens[i:i + batch])
                            for i in range(0, len(tokens), batch)])
    return belief_error(preds, targets)


def one_step_error(pmodel, dataset: Dataset) -> float:
    """Mean Euclidean one-step error of a dynamics model on a dataset."""
    s, a, s2 = one_step_pairs(dataset)
    return float(np.linalg.norm(pmodel.predict(s, a) - s2, axis=-1).mean())


def write_belief_csv(path, curves: dict[str, BeliefCurve]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["horizon", "method", "mean_L1", "std_L1", "n"])
        for method, c in curves.items():
            for h, m, s, n in zip(c.horizons, c.mean, c.std, c.n):
                w.writerow([int(h), method, f"{m:.12g}", f"{s:.12g}", int(n)])


def trajectory_predictions(belief, traj: Trajectory, delta: int):
    """Belief predictions for every anchor of a stored trajectory (see ``trajectory_windows``)."""
    from ..delay import trajectory_windows
    tokens, mask, targets = trajectory_windows(traj, delta)
    return belief.predict_tokens(tokens), mask, targets

"""Soft actor-critic on belief-predicted states with N-step targets."""

from .buffer import IdentityBelief, ReplayBuffer, WindowBatch, window_predictions
from .networks import Actor, CriticPair, EntropyTemp, QNet
from .sac import (
    Agent, SACConfig, act, actor_loss, actor_update, belief_state, critic_loss, critic_update,
    n_step_target,
)
from .train import (
    CURVE_COLUMNS, ActorPolicy, TrainResult, UndelayedEnv, evaluate, normalized_return, random_returns,
    train_dfbt_sac, write_curve, write_manifest, write_run,
)

__all__ = [
    "IdentityBelief", "ReplayBuffer", "WindowBatch", "window_predictions", "Actor",
    "CriticPair", "EntropyTemp", "QNet", "Agent", "SACConfig", "act", "actor_loss",
    "actor_update", "belief_state", "critic_loss", "critic_update", "n_step_target",
    "CURVE_COLUMNS", "ActorPolicy", "TrainResult", "UndelayedEnv", "evaluate", "normalized_return",
    "random_returns", "train_dfbt_sac", "write_curve", "write_manifest", "write_run",
]

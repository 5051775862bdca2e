"""Belief forecasters (direct transformer and recursive one-step model)."""

from .models import DFBT, DFBTConfig, Normalizer, RecursiveConfig, RecursiveModel
from .training import (
    TRAIN_PRESETS, BeliefCurve, DFBTBelief, OracleBelief, RecursiveBelief, belief_error, dfbt_forward,
    dfbt_loss, evaluate_belief, full_windows, masked_loss, one_step_error, one_step_pairs,
    recursive_forecast, recursive_forecast_batch, recursive_loss, split_dataset,
    train_dfbt, train_recursive, trajectory_predictions, write_belief_csv,
)

__all__ = [
    "DFBT", "DFBTConfig", "Normalizer", "RecursiveConfig", "RecursiveModel",
    "TRAIN_PRESETS", "BeliefCurve", "DFBTBelief", "OracleBelief", "RecursiveBelief", "belief_error",
    "dfbt_forward", "dfbt_loss", "evaluate_belief", "full_windows", "masked_loss",
    "one_step_error", "one_step_pairs", "recursive_forecast", "recursive_forecast_batch",
    "recursive_loss", "split_dataset", "train_dfbt", "train_recursive",
    "trajectory_predictions", "write_belief_csv",
]

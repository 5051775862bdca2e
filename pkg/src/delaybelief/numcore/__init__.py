"""Float64 arrays, reverse-mode tape, optimizers, named RNG streams, checkpoints."""

from . import core as ops
from .checkpoint import CheckpointError, load, loads, dumps, save
from .core import (
    DArray,
    NumericalError,
    ShapeError,
    Tape,
    TapeError,
    backward,
    current_tape,
    forward,
    zero_grads,
)
from .gradcheck import grad_check, grad_check_params
from .nn import MLP, LayerNorm, Linear, Module, param, soft_update
from .optim import OptState, adam_step, adamw_step
from .rng import RngStreams, make_generator

__all__ = [
    "ops", "DArray", "Tape", "TapeError", "ShapeError", "NumericalError",
    "backward", "current_tape", "forward", "zero_grads", "grad_check", "grad_check_params",
    "OptState", "adam_step", "adamw_step", "RngStreams", "make_generator",
    "Module", "Linear", "LayerNorm", "MLP", "param", "soft_update",
    "save", "load", "dumps", "loads", "CheckpointError",
]

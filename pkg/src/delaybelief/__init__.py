"""Delayed reinforcement learning with direct belief forecasting."""

__version__ = "0.1.0"

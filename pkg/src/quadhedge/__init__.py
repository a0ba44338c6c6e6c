"""Quadratic hedging (mean-variance and local risk minimization) in a multi-asset Heston market."""

from .bsde import BsdeRunResult, BsdeSpec, SolverConfig
from .hedge import HedgeRun, mse_over_time
from .market import HestonParams, PathBatch, coeffs_at, payoff, simulate, validate

__all__ = ["BsdeRunResult", "BsdeSpec", "HedgeRun", "HestonParams", "PathBatch", "SolverConfig", "coeffs_at",
           "mse_over_time", "payoff", "simulate", "validate"]

"""Stochastic flow map learning for slow-fast SDEs.

Simulate multiscale benchmarks, build burst-pair datasets, fit a conditional
normalizing flow for the slow variables, and validate long rollouts against
ground-truth ensembles.
"""

__version__ = "0.1.0"

from .data import Normalization, PairDataset, build_pairs, normalize, sample_initial_conditions
from .errors import (
    ConfigurationError,
    DegenerateDataError,
    IntegrationBlowup,
    NumericalInstability,
    RolloutDiverged,
    SFMLError,
    ShapeError,
    TrainingDiverged,
    UnsupportedSystemError,
)
from .flow import FlowModel, build_flow, flow_inverse, flow_sample, log_likelihood
from .metrics import compare, ks_distance, rollout, rollout_ensemble
from .systems import PRESETS, SystemSpec, Trajectory, get_system, sample_fast_stationary, simulate_slow
from .train import TrainConfig, cyclic_lr, train

__all__ = [
    "ConfigurationError", "DegenerateDataError", "FlowModel", "IntegrationBlowup", "Normalization",
    "NumericalInstability", "PRESETS", "PairDataset", "RolloutDiverged", "SFMLError", "ShapeError",
    "SystemSpec", "TrainConfig", "TrainingDiverged", "Trajectory", "UnsupportedSystemError", "build_flow",
    "build_pairs", "compare", "cyclic_lr", "flow_inverse", "flow_sample", "get_system", "ks_distance",
    "log_likelihood", "normalize", "rollout", "rollout_ensemble", "sample_fast_stationary",
    "sample_initial_conditions", "simulate_slow", "train",
]

"""Robust and semi-supervised robust training under transformation neighborhoods."""

__version__ = "0.1.0"

from .exceptions import ConfigError, ContractError, DataError, NumericalError
from .neighborhood import NeighborhoodSpec, TransformParams
from .attacks import AttackConfig, AttackResult, run_attack
from .risks import RiskReport, enumerated_risks, standard_risk
from .training import LRSchedule, TrainPlan, train

__all__ = [
    "AttackConfig",
    "AttackResult",
    "ConfigError",
    "ContractError",
    "DataError",
    "LRSchedule",
    "NeighborhoodSpec",
    "NumericalError",
    "RiskReport",
    "TrainPlan",
    "TransformParams",
    "enumerated_risks",
    "run_attack",
    "standard_risk",
    "train",
]

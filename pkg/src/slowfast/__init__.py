"""Simulation and verification tools for slow-fast multivalued McKean-Vlasov systems."""
from .errors import (AssumptionGateError, ConfigError, DivergenceError, InputError,
                     InsufficientSignalError, ModelError, NonConvergenceError,
                     NumericalError, SlowFastError, StepError)
from .measure import ParticleCloud, second_moment, w2_distance
from .model import CoefficientSet, check_assumptions, linear_test, ou_frozen
from .monotone_ops import (Ball, Box, HalfSpace, IndicatorOperator, Polytope,
                           SubgradientOperator, ZeroOperator, project, resolvent, yosida)
from .sde_engine import SimConfig, SlowFastEnsemble, Trajectory, simulate, step

__version__ = "0.1.0"

__all__ = [
    "AssumptionGateError",
    "ConfigError",
    "DivergenceError",
    "InputError",
    "InsufficientSignalError",
    "ModelError",
    "NonConvergenceError",
    "NumericalError",
    "SlowFastError",
    "StepError",
    "ParticleCloud",
    "second_moment",
    "w2_distance",
    "CoefficientSet",
    "check_assumptions",
    "linear_test",
    "ou_frozen",
    "Ball",
    "Box",
    "HalfSpace",
    "IndicatorOperator",
    "Polytope",
    "SubgradientOperator",
    "ZeroOperator",
    "project",
    "resolvent",
    "yosida",
    "SimConfig",
    "SlowFastEnsemble",
    "Trajectory",
    "simulate",
    "step",
]

"""Conservative integration of polynomial ODEs by the discrete multiplier method."""
from .polynomial import Polynomial, PolynomialParseError
from .multiplier import (ConservedSystem, DiscreteMultiplier, MinorSingular, continuous_multiplier,
                         verify_multiplier)
from .solver import NewtonConfig, NotConverged, SingularJacobian, newton_solve
from .integrators import StepperSpec, Trajectory, integrate
from .analysis import (drift_series, elliptic_geometry, epsilon_to_merge, exit_detector,
                       fit_accumulation_rate, n_max)
from ._core import BACKEND

__version__ = "0.1.0"

__all__ = [
    "Polynomial", "PolynomialParseError",
    "ConservedSystem", "DiscreteMultiplier", "MinorSingular", "continuous_multiplier", "verify_multiplier",
    "NewtonConfig", "NotConverged", "SingularJacobian", "newton_solve",
    "StepperSpec", "Trajectory", "integrate",
    "drift_series", "elliptic_geometry", "epsilon_to_merge", "exit_detector", "fit_accumulation_rate", "n_max",
    "BACKEND",
]

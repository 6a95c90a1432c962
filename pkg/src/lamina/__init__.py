"""lamina: deep models as stacks of semi-autonomous learning machines."""

from lamina.kaku import (
    IO,
    Assessment,
    Criterion,
    LearningMachine,
    OptimFactory,
    Optimizer,
    Parameter,
    State,
    step_dep,
)
from lamina.numerics import Rng

__version__ = "0.1.0"

__all__ = [
    "IO",
    "Assessment",
    "Criterion",
    "LearningMachine",
    "OptimFactory",
    "Optimizer",
    "Parameter",
    "Rng",
    "State",
    "step_dep",
]

"""Block-sparse mixed-integer QP solver for optimal-control problems."""

from .bounds import BoundState
from .model import (
    FeasibilityReport,
    InstanceError,
    InfeasibleBoundsError,
    MiocpProblem,
    StageData,
    Trajectory,
    apply_bounds,
    feasibility_report,
    load_instance,
    objective,
    reduce,
    save_instance,
)

__all__ = [
    "BoundState",
    "FeasibilityReport",
    "InstanceError",
    "InfeasibleBoundsError",
    "MiocpProblem",
    "StageData",
    "Trajectory",
    "apply_bounds",
    "feasibility_report",
    "load_instance",
    "objective",
    "reduce",
    "save_instance",
]

__version__ = "0.1.0"

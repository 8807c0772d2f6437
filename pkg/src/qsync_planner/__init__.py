"""Mixed-precision planner and training-timeline replayer for hybrid GPU clusters."""

from .graph import OperatorKind, OperatorNode, Precision, PrecisionDAG, build_dag
from .profile import LossSpec, ProfileBundle, load_profile

__version__ = "0.1.0"

__all__ = [
    "OperatorKind",
    "OperatorNode",
    "Precision",
    "PrecisionDAG",
    "build_dag",
    "LossSpec",
    "ProfileBundle",
    "load_profile",
]

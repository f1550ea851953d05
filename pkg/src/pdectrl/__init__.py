"""Surrogate-based PDE-constrained optimal control.

Phase 1 trains a convolutional autoencoder surrogate of a PDE solution
operator; Phase 2 searches the control through the frozen surrogate with a
reconstruction regularizer. A discrete-adjoint baseline is included.
"""
from .control import ControlProblem, phase2_steady, phase2_time
from .optim import LbfgsConfig, lbfgs_minimize
from .pde import Grid, PdeSpec
from .surrogate import OperatorSurrogate, TimeSurrogate

__all__ = [
    "ControlProblem",
    "Grid",
    "LbfgsConfig",
    "OperatorSurrogate",
    "PdeSpec",
    "TimeSurrogate",
    "lbfgs_minimize",
    "phase2_steady",
    "phase2_time",
]

__version__ = "0.1.0"

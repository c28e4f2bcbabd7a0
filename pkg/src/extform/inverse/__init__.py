"""Discrete adjoints, the wave forward model, inversion objective and optimiser."""

from .lbfgs import FunctionalAdapter, OptimizeResult, minimize_lbfgs
from .objective import (
    REGULARISERS,
    Objective,
    ObservationSet,
    ReducedFunctional,
    build_reduced_functional,
    objective_value,
    rf_gradient,
)
from .tape import MatrixCache, Tape, add_scalars, functional, lincomb, linear_map, matrix_action
from .taylor import TaylorResult, default_epsilons, taylor_test
from .wave import Trajectory, WaveProblem, forward_wave, stiffness_form

__all__ = [
    "FunctionalAdapter", "MatrixCache", "Objective", "ObservationSet", "OptimizeResult", "REGULARISERS",
    "ReducedFunctional", "Tape", "TaylorResult", "Trajectory", "WaveProblem", "add_scalars",
    "build_reduced_functional", "default_epsilons", "forward_wave", "functional", "lincomb", "linear_map",
    "matrix_action", "minimize_lbfgs", "objective_value", "rf_gradient", "stiffness_form", "taylor_test",
]

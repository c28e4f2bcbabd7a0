"""Misfit-plus-regulariser objective and its reduced functional."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from ..errors import LengthMismatch, UsageError
from ..fem.assembly import assemble
from ..field import FieldVector, as_values
from ..symbolic import Coefficient, Expr, Form, coefficients, dx, grad, inner
from .tape import Tape, add_scalars, functional, lincomb
from .wave import Trajectory, WaveProblem, forward_wave

REGULARISERS = ("none", "tikhonov", "neural")


@dataclass
class ObservationSet:
    """Full-field snapshots at steps ``stride, 2 stride, ...``."""

    snapshots: list
    stride: int

    def __post_init__(self):
        if self.stride < 1:
            raise UsageError("stride must be >= 1")
        self.snapshots = [np.asarray(as_values(s), dtype=float) for s in self.snapshots]

    @property
    def steps(self) -> list:
        return [self.stride * (k + 1) for k in range(len(self.snapshots))]

    def check(self, num_steps: int, size: Optional[int] = None) -> None:
        if len(self.snapshots) != num_steps // self.stride:
            raise LengthMismatch(
                f"{len(self.snapshots)} snapshots for {num_steps} steps at stride {self.stride}; "
                f"expected {num_steps // self.stride}")
        if size is not None and any(len(s) != size for s in self.snapshots):
            raise LengthMismatch(f"snapshot size differs from {size} dofs")

    @classmethod
    def from_trajectory(cls, trajectory: Trajectory, stride: int) -> "ObservationSet":
        states = trajectory.states
        return cls([states[n].values.copy() for n in range(stride, len(states), stride)], stride)


@dataclass
class Objective:
    """``J = 1/2 sum_n dt |phi^n - obs^n|^2_L2 + alpha R``.

    ``operator`` builds the regulariser network node from the speed
    expression; ``bindings`` holds values of that network's coefficients.
    """

    alpha: float = 0.0
    regulariser: str = "none"
    operator: Optional[Callable] = None
    bindings: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.regulariser not in REGULARISERS:
            raise UsageError(f"unknown regulariser {self.regulariser!r}; choose from {REGULARISERS}")
        if not self.alpha >= 0:
            raise UsageError(f"alpha must be >= 0, got {self.alpha}")
        if self.regulariser == "neural" and self.operator is None:
            raise UsageError("neural regulariser needs an operator")

    def regulariser_form(self, speed: Expr) -> Optional[Form]:
        """``R`` as a 0-form, or None."""
        if self.regulariser == "tikhonov":
            return 0.5 * inner(grad(speed), grad(speed)) * dx
        if self.regulariser == "neural":
            N = self.operator(speed)
            return 0.5 * inner(N, N) * dx
        return None


def _misfit(problem: WaveProblem, phi, obs) -> float:
    r = np.asarray(phi, dtype=float) - obs
    return 0.5 * problem.dt * float(r @ (problem.mass @ r))


def objective_value(obs: ObservationSet, trajectory: Trajectory, objective: Objective, c) -> float:
    """Evaluate ``J`` for a finished run.  ``c`` is ``problem.c``'s values or a bindings dict."""
    problem = trajectory.problem
    obs.check(len(trajectory.states) - 1, problem.V.dimension())
    J = sum(_misfit(problem, trajectory.states[n].values, o) for n, o in zip(obs.steps, obs.snapshots))
    R = objective.regulariser_form(problem.speed)
    if R is not None and objective.alpha > 0:
        bindings = dict(c) if isinstance(c, dict) else {problem.c: as_values(c)}
        bindings.update(objective.bindings)
        J += objective.alpha * assemble(R, bindings, mesh=problem.mesh)
    return float(J)


class ReducedFunctional:
    """``J`` as a function of one control, backed by a recorded tape."""

    def __init__(self, tape: Tape, output: int, control: Coefficient, control_var: int, parts=None):
        self.tape = tape
        self.output = output
        self.control = control
        self.control_var = control_var
        self.parts = parts or {}

    @property
    def value(self) -> np.ndarray:
        return self.tape.value(self.control_var).copy()

    def _set(self, value) -> None:
        value = np.asarray(as_values(value), dtype=float)
        if value.shape != self.tape.value(self.control_var).shape:
            raise LengthMismatch(f"control has shape {value.shape}, expected {self.tape.value(self.control_var).shape}")
        if self.tape.stale or not np.array_equal(value, self.tape.value(self.control_var)):
            self.tape.set_control(self.control_var, value)
            self.tape.replay()

    def __call__(self, value) -> float:
        self._set(value)
        return float(self.tape.value(self.output))

    def derivative(self, value=None) -> FieldVector:
        """Gradient (l2 dual representation) at ``value`` or at the current control."""
        if value is not None:
            self._set(value)
        g = self.tape.gradient(self.output)[self.control_var]
        return FieldVector(np.array(g, dtype=float), self.control.space)

    def part(self, name: str) -> float:
        return float(self.tape.value(self.parts[name]))


def rf_gradient(rf: ReducedFunctional, value=None) -> FieldVector:
    return rf.derivative(value)


def _misfit_record(tape: Tape, problem: WaveProblem, phi_var: int, obs: np.ndarray) -> int:
    M, dt = problem.mass, problem.dt

    def forward(phi):
        return _misfit(problem, phi, obs)

    def backward(bar, vals, active):
        return [bar * dt * (M @ (vals[0] - obs))]

    return tape.record("misfit", forward, [phi_var], backward)


def build_reduced_functional(problem: WaveProblem, obs: ObservationSet, objective: Objective,
                             control: Coefficient, bindings: dict) -> ReducedFunctional:
    """Record forward run and objective with ``control`` as the active input.

    ``bindings`` gives values of every coefficient in the speed expression,
    including the initial control value.
    """
    obs.check(problem.steps, problem.V.dimension())
    tape = Tape()
    speed_coefs = set(coefficients(problem.stiffness))
    if control not in speed_coefs:
        raise UsageError(f"control {control} does not enter the wave speed")
    inputs = {}
    for w in speed_coefs:
        if w not in bindings:
            raise UsageError(f"no value for coefficient {w}")
        value = np.asarray(as_values(bindings[w]), dtype=float)
        inputs[w] = tape.control(value) if w == control else tape.constant(value)
    traj = forward_wave(problem, tape=tape, inputs=inputs)
    misfits = [_misfit_record(tape, problem, traj.variables[n], o) for n, o in zip(obs.steps, obs.snapshots)]
    fidelity = add_scalars(tape, misfits)
    parts = {"fidelity": fidelity}
    R = objective.regulariser_form(problem.speed)
    if R is not None:
        reg_inputs = dict(inputs)
        for w in coefficients(R):
            if w not in reg_inputs:
                if w not in objective.bindings:
                    raise UsageError(f"no value for regulariser coefficient {w}")
                reg_inputs[w] = tape.constant(np.asarray(as_values(objective.bindings[w]), dtype=float))
        reg = functional(tape, R, {w: reg_inputs[w] for w in coefficients(R)}, name="regulariser")
        parts["regulariser"] = reg
        total = lincomb(tape, [(1.0, fidelity), (objective.alpha, reg)], name="objective")
    else:
        total = fidelity
    return ReducedFunctional(tape, total, control, inputs[control], parts)

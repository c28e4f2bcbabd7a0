"""Explicit P1 leapfrog for the scalar wave equation ``phi_tt - div(c^2 grad phi) = f``.

The scheme works on interior dofs with the consistent mass matrix::

    phi^{n+1} = 2 phi^n - phi^{n-1} + dt^2 M_II^{-1} (-K(c^2) phi^n + M f^n)_I

and a Taylor start ``phi^1 = phi^0 + dt v^0 + dt^2/2 a^0``.  Boundary dofs
stay at zero.  Every operation is recorded on a :class:`Tape`, so the
adjoint equation falls out of the reverse sweep.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from ..errors import CflViolation, NonFiniteState, ShapeMismatch
from ..extop import nodal
from ..fem.assembly import assemble
from ..fem.mesh import Mesh
from ..field import FieldVector, as_values
from ..symbolic import Coefficient, Expr, Form, TestFunction, TrialFunction, coefficients, dx, grad, inner
from .tape import Tape, check, lincomb, linear_map, matrix_action

CFL_SAFETY = 0.5


def stiffness_form(speed: Expr, V) -> Form:
    u, v = TrialFunction(V), TestFunction(V)
    return speed * speed * inner(grad(u), grad(v)) * dx


@dataclass(eq=False)
class WaveProblem:
    """Discrete wave problem on ``mesh`` with homogeneous Dirichlet data.

    ``speed`` defaults to the coefficient ``c``; it may be any scalar
    expression of coefficients, e.g. a network applied to the coordinate
    field.  ``source`` is None, a callable ``f(x[, y], t)`` or one nodal
    array per step.  ``max_speed`` is the largest speed this problem will be
    run with and is checked against the CFL bound up front; actual speeds
    are checked again on every run.
    """

    mesh: Mesh
    dt: float
    steps: int
    c: Optional[Coefficient] = None
    speed: Optional[Expr] = None
    source: object = None
    phi0: object = None
    v0: object = None
    max_speed: float = 1.0

    def __post_init__(self):
        if self.dt <= 0 or self.steps < 1:
            raise ValueError("need dt > 0 and at least one step")
        self.V = self.mesh.function_space()
        if self.c is None:
            self.c = Coefficient(self.V, label="c")
        if self.speed is None:
            self.speed = self.c
        self.check_cfl(self.max_speed)
        n = self.V.dimension()
        self.interior = np.setdiff1d(np.arange(n), self.mesh.boundary_dofs)
        u, v = TrialFunction(self.V), TestFunction(self.V)
        self.mass = assemble(u * v * dx(self.mesh))
        self._lu = splu(sp.csc_matrix(self.mass[self.interior][:, self.interior]))
        self.stiffness = stiffness_form(self.speed, self.V)

    @property
    def cfl_limit(self) -> float:
        return CFL_SAFETY * self.mesh.h_min / self.dt

    def check_cfl(self, speed_max: float) -> None:
        if not np.isfinite(speed_max) or speed_max > self.cfl_limit * (1 + 1e-12):
            raise CflViolation(
                f"dt={self.dt:g} violates dt <= {CFL_SAFETY} h_min / max(c) with max(c)={speed_max:g} "
                f"(limit {self.cfl_limit:g})")

    def times(self) -> np.ndarray:
        return self.dt * np.arange(self.steps + 1)

    def interior_solve(self, r):
        out = np.zeros(len(r))
        out[self.interior] = self._lu.solve(np.asarray(r, dtype=float)[self.interior])
        return out

    def initial_state(self, data) -> np.ndarray:
        n = self.V.dimension()
        if data is None:
            x = np.zeros(n)
        elif callable(data):
            x = np.asarray(data(*self.mesh.vertices.T), dtype=float) * np.ones(n)
        else:
            x = np.array(as_values(data), dtype=float)
        if x.shape != (n,):
            raise ShapeMismatch(f"initial data has {x.shape} values, expected {n}")
        x[self.mesh.boundary_dofs] = 0.0
        return x

    def source_values(self, n: int) -> Optional[np.ndarray]:
        if self.source is None:
            return None
        if callable(self.source):
            f = self.source(*self.mesh.vertices.T, n * self.dt)
            return np.asarray(f, dtype=float) * np.ones(self.V.dimension())
        return np.asarray(as_values(self.source[n]), dtype=float)

    def speed_values(self, bindings: dict) -> np.ndarray:
        if self.speed == self.c:
            return np.asarray(bindings[self.c], dtype=float)
        value, _ = nodal(self.speed, bindings)
        return np.asarray(value, dtype=float)


@dataclass
class Trajectory:
    states: list
    variables: list
    tape: Tape
    problem: WaveProblem
    inputs: dict = field(default_factory=dict)


def forward_wave(problem: WaveProblem, c=None, tape: Optional[Tape] = None, inputs: Optional[dict] = None,
                 source_vars: Optional[Sequence[int]] = None, phi0_var: Optional[int] = None) -> Trajectory:
    """Run the leapfrog scheme, recording it on ``tape``.

    ``inputs`` maps each coefficient of the speed expression to a tape
    variable; if omitted, ``c`` gives the values of ``problem.c`` and they
    enter the tape as constants.  ``source_vars`` (one per step) and
    ``phi0_var`` replace the source and initial state by tape variables.
    """
    tape = tape if tape is not None else Tape()
    if inputs is None:
        if c is None:
            raise ValueError("pass c values or tape inputs")
        inputs = {problem.c: tape.constant(np.asarray(as_values(c), dtype=float))}
    missing = [w for w in coefficients(problem.stiffness) if w not in inputs]
    if missing:
        raise ValueError(f"no tape variable for {missing}")
    coefs = list(inputs)
    dt = problem.dt

    def cfl(*vals):
        problem.check_cfl(float(np.max(np.abs(problem.speed_values(dict(zip(coefs, vals)))))))

    check(tape, cfl, [inputs[w] for w in coefs], name="cfl")

    M = problem.mass
    if source_vars is not None and len(source_vars) != problem.steps:
        raise ShapeMismatch(f"need {problem.steps} source variables, got {len(source_vars)}")

    def mass_source(n):
        if source_vars is not None:
            return linear_map(tape, lambda f: M @ f, lambda y: M @ y, source_vars[n], name="mass")
        f = problem.source_values(n)
        return None if f is None else tape.constant(M @ f)

    def acceleration(phi_var, n):
        k_phi = matrix_action(tape, problem.stiffness, inputs, phi_var, name="stiffness")
        mf = mass_source(n)
        terms = [(-1.0, k_phi)] if mf is None else [(-1.0, k_phi), (1.0, mf)]
        rhs = lincomb(tape, terms)
        return linear_map(tape, problem.interior_solve, problem.interior_solve, rhs, name="mass_solve")

    def finite(x):
        if not np.all(np.isfinite(x)):
            raise NonFiniteState("wave state became non-finite")

    if phi0_var is None:
        phi0_var = tape.constant(problem.initial_state(problem.phi0))
    v0_var = tape.constant(problem.initial_state(problem.v0))
    a0 = acceleration(phi0_var, 0)
    phi1 = lincomb(tape, [(1.0, phi0_var), (dt, v0_var), (0.5 * dt * dt, a0)])
    variables = [phi0_var, phi1]
    for n in range(1, problem.steps):
        a = acceleration(variables[n], n)
        nxt = lincomb(tape, [(2.0, variables[n]), (-1.0, variables[n - 1]), (dt * dt, a)])
        variables.append(nxt)
        if n % 10 == 0:
            check(tape, finite, [nxt], name="finite")
    check(tape, finite, [variables[-1]], name="finite")
    states = [FieldVector(tape.value(v), problem.V) for v in variables]
    return Trajectory(states, variables, tape, problem, dict(inputs))

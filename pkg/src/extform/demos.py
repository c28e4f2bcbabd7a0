"""Problem builders shared by the command line and the test-suite."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .fem import DirichletBC, apply_dirichlet, assemble, interpolate, l2_error, solve_linear
from .fem.mesh import unit_interval_mesh, unit_square_mesh
from .symbolic import Coefficient, FunctionSpace, TestFunction, TrialFunction, dx, grad, inner


# --------------------------------------------------------------------------
# Modified Helmholtz with a manufactured solution


def helmholtz_exact(x, y):
    return np.sin(np.pi * x) * np.sin(np.pi * y)


def helmholtz_rhs(x, y):
    return (2.0 * np.pi ** 2 + 1.0) * helmholtz_exact(x, y)


def helmholtz_forms(mesh):
    V = FunctionSpace(mesh, "Lagrange", 1)
    u, v = TrialFunction(V), TestFunction(V)
    f = Coefficient(V, label="f")
    a = (u * v + inner(grad(u), grad(v))) * dx
    L = f * v * dx
    return V, f, a, L


@dataclass
class HelmholtzSolution:
    mesh: object
    u: object
    error: float
    n: int

    @property
    def h(self) -> float:
        return 1.0 / self.n


def solve_helmholtz(n: int) -> HelmholtzSolution:
    """``u - lap u = f`` on an n x n unit square mesh with ``u = 0`` on the boundary."""
    mesh = unit_square_mesh(n, n)
    V, f, a, L = helmholtz_forms(mesh)
    A = assemble(a)
    b = assemble(L, {f: interpolate(helmholtz_rhs, V)}).values
    A, b = apply_dirichlet(A, b, mesh.boundary_dofs, 0.0, symmetric=True)
    u = solve_linear(A, b)
    return HelmholtzSolution(mesh, u, l2_error(mesh, u, helmholtz_exact), n)


def fitted_rate(hs: Sequence[float], errors: Sequence[float]) -> float:
    """Least-squares slope of log(error) against log(h)."""
    return float(np.polyfit(np.log(hs), np.log(errors), 1)[0])


# --------------------------------------------------------------------------
# Wave inversion setup


def truth_velocity(mesh, background: float, xs, ys, amplitudes, width: float) -> np.ndarray:
    """Constant background plus Gaussian anomalies (centres ``xs`` and, in 2D, ``ys``)."""
    pts = mesh.vertices
    c = np.full(len(pts), float(background))
    for k, amp in enumerate(amplitudes):
        r2 = (pts[:, 0] - xs[k]) ** 2
        if mesh.dim == 2:
            r2 = r2 + (pts[:, 1] - ys[k]) ** 2
        c += amp * np.exp(-r2 / (2.0 * width ** 2))
    return c


def ricker(t, frequency: float, delay: float):
    a = (math.pi * frequency * (np.asarray(t) - delay)) ** 2
    return (1.0 - 2.0 * a) * np.exp(-a)


def point_source(dim: int, centre, width: float, amplitude: float, frequency: float, delay: float):
    """Gaussian-in-space, Ricker-in-time source ``f(x[, y], t)``."""
    if dim == 1:
        def f(x, t):
            return amplitude * np.exp(-((x - centre[0]) ** 2) / (2 * width ** 2)) * ricker(t, frequency, delay)
    else:
        def f(x, y, t):
            r2 = (x - centre[0]) ** 2 + (y - centre[1]) ** 2
            return amplitude * np.exp(-r2 / (2 * width ** 2)) * ricker(t, frequency, delay)
    return f


def make_mesh(dim: int, cells: int, nx: int, ny: int):
    if dim == 1:
        return unit_interval_mesh(cells)
    if dim == 2:
        return unit_square_mesh(nx, ny)
    raise ValueError(f"dim must be 1 or 2, got {dim}")

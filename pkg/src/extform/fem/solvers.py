"""Linear and Newton solvers for assembled systems."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from ..autodiff import gateaux_derivative
from ..errors import NewtonDivergence, NonConvergence, SingularMatrix
from ..field import FieldVector, as_values
from ..symbolic import Argument, Coefficient, Form, arguments
from .assembly import assemble


@dataclass(frozen=True)
class DirichletBC:
    """Prescribe ``value`` (scalar or per-dof array) on ``dofs``."""

    dofs: np.ndarray
    value: object = 0.0

    def values(self) -> np.ndarray:
        return np.broadcast_to(np.asarray(self.value, dtype=float), (len(self.dofs),))


def apply_dirichlet(A, b, dofs, value=0.0, symmetric: bool = False):
    """Return ``(A, b)`` with constrained rows replaced by identity rows.

    With ``symmetric=True`` the constrained columns are eliminated as well,
    keeping a symmetric matrix symmetric.
    """
    dofs = np.asarray(dofs, dtype=np.int64)
    vals = np.broadcast_to(np.asarray(value, dtype=float), (len(dofs),))
    A = sp.csr_matrix(A, copy=True)
    b = np.array(as_values(b), dtype=float)
    n = A.shape[0]
    if A.shape[0] != A.shape[1]:
        raise ValueError("Dirichlet conditions need a square system")
    mask = np.zeros(n, dtype=bool)
    mask[dofs] = True
    keep = sp.diags((~mask).astype(float))
    if symmetric:
        full = np.zeros(n)
        full[dofs] = vals
        b = b - A @ full
        A = keep @ A @ keep
    else:
        A = keep @ A
    A = (A + sp.diags(mask.astype(float))).tocsr()
    A.eliminate_zeros()
    A.sort_indices()
    b[dofs] = vals
    return A, b


def _cg(A, b, rtol, maxiter):
    diag = A.diagonal()
    if np.any(diag <= 0):
        raise NonConvergence("cg needs a positive diagonal")
    inv_diag = 1.0 / diag
    x = np.zeros_like(b)
    r = b.copy()
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return x
    z = inv_diag * r
    p = z.copy()
    rz = r @ z
    for _ in range(maxiter):
        Ap = A @ p
        curvature = p @ Ap
        if curvature <= 0:
            raise NonConvergence("matrix is not positive definite")
        alpha = rz / curvature
        x += alpha * p
        r -= alpha * Ap
        if np.linalg.norm(r) <= rtol * bnorm:
            return x
        z = inv_diag * r
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
    raise NonConvergence(f"cg did not converge in {maxiter} iterations")


def solve_linear(A, b, method: str = "lu", rtol: float = 1e-10, maxiter: Optional[int] = None) -> FieldVector:
    """Solve ``A x = b`` by sparse LU or Jacobi-preconditioned CG."""
    bv = np.array(as_values(b), dtype=float)
    space = getattr(b, "space", None)
    A = sp.csr_matrix(A)
    if A.shape[0] != A.shape[1] or A.shape[0] != len(bv):
        raise ValueError("incompatible system dimensions")
    if method == "cg":
        x = _cg(A, bv, rtol, maxiter or 10 * len(bv))
    elif method == "lu":
        try:
            x = spla.splu(A.tocsc()).solve(bv)
        except RuntimeError as exc:
            raise SingularMatrix(str(exc)) from None
        if not np.all(np.isfinite(x)):
            raise SingularMatrix("direct solve produced non-finite values")
    else:
        raise ValueError(f"unknown method {method!r}")
    return FieldVector(x, space)


@dataclass
class NewtonResult:
    solution: FieldVector
    iterations: int
    residuals: list = field(default_factory=list)


def solve_nonlinear(F: Form, u: Coefficient, bindings: Optional[dict] = None,
                    bcs: Sequence[DirichletBC] = (), atol: float = 1e-10, rtol: float = 1e-12,
                    max_iter: int = 50) -> NewtonResult:
    """Newton's method for ``F(u; v) = 0`` with the Jacobian from :func:`gateaux_derivative`.

    The initial guess is ``bindings[u]`` (zero if unbound); Dirichlet values
    are imposed on it and the updates vanish on constrained dofs.
    """
    if [a.number for a in arguments(F)] != [0]:
        raise ValueError("residual must be a 1-form in the test function")
    bindings = dict(bindings or {})
    n = u.space.dimension()
    x = np.array(as_values(bindings[u]), dtype=float) if u in bindings else np.zeros(n)
    fixed = np.zeros(n, dtype=bool)
    for bc in bcs:
        x[bc.dofs] = bc.values()
        fixed[bc.dofs] = True
    dofs = np.flatnonzero(fixed)
    J_form = gateaux_derivative(F, u, Argument(u.space, 1))
    residuals = []
    r0 = None
    for it in range(max_iter + 1):
        bindings[u] = x
        r = np.array(assemble(F, bindings).values)
        r[fixed] = 0.0
        norm = float(np.linalg.norm(r))
        residuals.append(norm)
        if not math.isfinite(norm):
            raise NewtonDivergence("residual became non-finite", residuals)
        if r0 is None:
            r0 = norm
        if norm <= atol or (r0 > 0 and norm <= rtol * r0):
            return NewtonResult(FieldVector(x.copy(), u.space), it, residuals)
        if it == max_iter:
            break
        J = assemble(J_form, bindings)
        J, rhs = apply_dirichlet(J, -r, dofs, 0.0)
        try:
            dx = solve_linear(J, rhs, "lu").values
        except SingularMatrix as exc:
            raise NewtonDivergence(f"singular Jacobian: {exc}", residuals) from None
        x = x + dx
    raise NewtonDivergence(f"Newton did not converge in {max_iter} iterations", residuals)

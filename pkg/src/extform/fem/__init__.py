"""P1 finite elements: meshes, quadrature, assembly and solvers."""

from .assembly import assemble, estimate_degree
from .io import interpolate, read_field_csv, write_field_csv, write_matrix_coo
from .mesh import DofMap, Mesh, unit_interval_mesh, unit_square_mesh
from .norms import l2_error
from .quadrature import QuadratureRule, make_rule
from .solvers import DirichletBC, NewtonResult, apply_dirichlet, solve_linear, solve_nonlinear

__all__ = [
    "DirichletBC", "DofMap", "Mesh", "NewtonResult", "QuadratureRule", "apply_dirichlet", "assemble",
    "estimate_degree", "interpolate", "l2_error", "make_rule", "read_field_csv", "solve_linear", "solve_nonlinear",
    "unit_interval_mesh", "unit_square_mesh", "write_field_csv", "write_matrix_coo",
]

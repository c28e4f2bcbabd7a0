"""A small differentiable form language with external operators.

The public surface mirrors the usual finite element form language::

    from extform import *
    mesh = unit_square_mesh(10, 10)
    V = FunctionSpace(mesh, "Lagrange", 1)
    u, v = TrialFunction(V), TestFunction(V)
    a = (u * v + inner(grad(u), grad(v))) * dx
"""

from .autodiff import action, adjoint, derivative, gateaux_derivative, replace
from .extop import (
    ExternalOperator,
    IdentityOperator,
    OperatorForm,
    OperatorImpl,
    evaluate,
    evaluate_adjoint_derivative,
    evaluate_derivative,
    external_derivative,
    register_impl,
)
from .fem import (
    DirichletBC,
    Mesh,
    apply_dirichlet,
    assemble,
    interpolate,
    solve_linear,
    solve_nonlinear,
    unit_interval_mesh,
    unit_square_mesh,
)
from .field import FieldVector
from .mlp import MlpModel, init_mlp, load_weights, mlp_forward, mlp_vjp, neuralnet, pretrain, save_weights
from .symbolic import (
    Argument,
    Coefficient,
    Constant,
    Form,
    FunctionSpace,
    RealSpace,
    SpatialCoordinate,
    TestFunction,
    TrialFunction,
    arguments,
    arity,
    coefficients,
    dx,
    grad,
    inner,
)

__all__ = [
    "Argument", "Coefficient", "Constant", "DirichletBC", "ExternalOperator", "FieldVector", "Form",
    "FunctionSpace", "IdentityOperator", "Mesh", "MlpModel", "OperatorForm", "OperatorImpl", "RealSpace",
    "SpatialCoordinate", "TestFunction", "TrialFunction", "action", "adjoint", "apply_dirichlet", "arguments",
    "arity", "assemble", "coefficients", "derivative", "dx", "evaluate", "evaluate_adjoint_derivative",
    "evaluate_derivative", "external_derivative", "gateaux_derivative", "grad", "init_mlp", "inner",
    "interpolate", "load_weights", "mlp_forward", "mlp_vjp", "neuralnet", "pretrain", "register_impl",
    "replace", "save_weights", "solve_linear", "solve_nonlinear", "unit_interval_mesh", "unit_square_mesh",
]

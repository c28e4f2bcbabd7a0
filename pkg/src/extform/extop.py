"""External operators: symbolic nodes whose numerics live outside the language.

An :class:`ExternalOperator` ``N(u_1, ..., u_k; v_l, ..., v_1)`` is an
expression node like any other.  Its evaluation and derivatives are
delegated to an :class:`OperatorImpl` registered in a process-wide registry
and referenced from the node by an integer handle.

Operators act pointwise on degree-of-freedom values: operands are evaluated
to nodal vectors, the implementation maps them to a nodal vector in the
result space ``X``.  A node can be read in two ways:

* as an expression with values in ``X`` (usable anywhere a coefficient is);
* as a form ``N(u; v*)`` with an implicit coargument ``v* in X*``, see
  :class:`OperatorForm`.  Replacing the coargument by a vector ``y`` gives
  the Euclidean pairing ``y . N``.
"""

from __future__ import annotations

import threading
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import (
    FormError,
    HigherDerivativeUnsupported,
    IndexOutOfRange,
    ShapeMismatch,
    SpaceMismatch,
    UnboundCoefficient,
    UnknownImplementation,
)
from .field import FieldVector, as_values
from .symbolic import (
    Argument,
    Coefficient,
    Constant,
    Expr,
    FunctionSpace,
    Grad,
    Inner,
    Negate,
    Product,
    Sum,
    max_argument_number,
    traverse,
)


class OperatorImpl:
    """Numerical implementation behind an external operator.

    Subclasses provide :meth:`eval` and :meth:`jac_operand`; :meth:`vjp` and
    :meth:`jvp` default to products with the Jacobian.  Implementations
    must be free of hidden mutable state: everything they need arrives as
    operand values.
    """

    def check(self, operands: Sequence[np.ndarray]) -> None:
        """Raise :class:`ShapeMismatch` for operand values of the wrong size."""

    def eval(self, operands: Sequence[np.ndarray]) -> np.ndarray:
        raise NotImplementedError

    def jac_operand(self, i: int, operands: Sequence[np.ndarray]):
        """Jacobian (dense array or scipy sparse matrix) w.r.t. operand ``i``."""
        raise NotImplementedError

    def jvp(self, i, operands, tangent):
        return np.asarray(self.jac_operand(i, operands) @ tangent).ravel()

    def vjp(self, i, operands, cotangent):
        return np.asarray(self.jac_operand(i, operands).T @ cotangent).ravel()


class IdentityOperator(OperatorImpl):
    """N(c) = c."""

    def check(self, operands):
        if len(operands) != 1:
            raise ShapeMismatch("identity operator takes one operand")

    def eval(self, operands):
        return np.array(operands[0], dtype=float)

    def jac_operand(self, i, operands):
        return sp.identity(len(operands[0]), format="csr")

    def jvp(self, i, operands, tangent):
        return np.array(tangent, dtype=float)

    def vjp(self, i, operands, cotangent):
        return np.array(cotangent, dtype=float)


class _Registry:
    def __init__(self):
        self._lock = threading.Lock()
        self._impls: dict[int, OperatorImpl] = {}
        self._by_object: dict[int, int] = {}

    def register(self, impl: OperatorImpl) -> int:
        with self._lock:
            handle = self._by_object.get(id(impl))
            if handle is not None and self._impls[handle] is impl:
                return handle
            handle = len(self._impls)
            self._impls[handle] = impl
            self._by_object[id(impl)] = handle
            return handle

    def get(self, handle: int) -> OperatorImpl:
        try:
            return self._impls[handle]
        except KeyError:
            raise UnknownImplementation(f"no operator implementation registered as {handle}") from None


_registry = _Registry()


def register_impl(impl: OperatorImpl) -> int:
    """Register ``impl`` and return its handle.

    Registering the same object again returns the same handle; distinct
    objects always get distinct handles.
    """
    return _registry.register(impl)


def get_impl(handle: int) -> OperatorImpl:
    return _registry.get(handle)


class ExternalOperator(Expr):
    """Symbolic external operator node.

    Args:
        *operands: expressions the operator depends on (typically coefficients).
        impl: an :class:`OperatorImpl` (registered on the fly) or a handle.
        function_space: result space ``X``; defaults to the first operand's
            Lagrange space.
        derivatives: derivative multi-index, one entry per operand.
        directions: arguments or coefficients the derivatives act on.
    """

    __slots__ = ("operands", "result_space", "derivatives", "directions", "impl_id")

    def __init__(self, *operands, impl, function_space: Optional[FunctionSpace] = None,
                 derivatives: Optional[Sequence[int]] = None, directions: Sequence[Expr] = ()):
        operands = tuple(o if isinstance(o, Expr) else Constant(o) for o in operands)
        if not operands:
            raise FormError("an external operator needs at least one operand")
        for o in operands:
            if o.arguments:
                raise FormError(f"external operator operand {o} contains form arguments")
        if function_space is None:
            function_space = _default_space(operands)
        if derivatives is None:
            derivatives = (0,) * len(operands)
        derivatives = tuple(int(d) for d in derivatives)
        if len(derivatives) != len(operands) or min(derivatives) < 0:
            raise FormError("derivative multi-index must have one entry >= 0 per operand")
        directions = tuple(directions)
        if sum(derivatives) != len(directions):
            raise FormError("number of directions must equal the derivative order")
        self.operands = operands
        self.result_space = function_space
        self.derivatives = derivatives
        self.directions = directions
        self.impl_id = impl if isinstance(impl, int) else register_impl(impl)
        self._init(operands + directions, function_space.shape, function_space.domain)

    def _key(self):
        return (self.impl_id, self.result_space, self.derivatives, len(self.operands))

    def _copy(self, operands=None, derivatives=None, directions=None) -> "ExternalOperator":
        return ExternalOperator(
            *(self.operands if operands is None else operands),
            impl=self.impl_id,
            function_space=self.result_space,
            derivatives=self.derivatives if derivatives is None else derivatives,
            directions=self.directions if directions is None else directions,
        )

    def reconstruct(self, *children):
        k = len(self.operands)
        return self._copy(operands=children[:k], directions=children[k:])

    def reconstruct_pruned(self, children):
        k = len(self.operands)
        if any(c is None for c in children[k:]):
            return None  # linear in each direction
        operands = [Constant(0.0) if c is None else c for c in children[:k]]
        return self.reconstruct(*operands, *children[k:])

    @property
    def order(self) -> int:
        return sum(self.derivatives)

    @property
    def impl(self) -> OperatorImpl:
        return get_impl(self.impl_id)

    def __str__(self):
        ops = ", ".join(str(o) for o in self.operands)
        head = f"N{self.impl_id}"
        if self.order:
            head += "[d" + "".join(str(d) for d in self.derivatives) + "]"
            dirs = ", ".join(str(d) for d in self.directions)
            return f"{head}({ops}; {dirs})"
        return f"{head}({ops})"


def _default_space(operands) -> FunctionSpace:
    for o in operands:
        for node in traverse(o):
            space = getattr(node, "space", None)
            if space is not None and not space.is_real:
                return space
    raise FormError("cannot infer the result space; pass function_space")


def external_derivative(N: ExternalOperator, operand_index: int, direction: Expr) -> ExternalOperator:
    """Differentiate ``N`` once w.r.t. operand ``operand_index`` in ``direction``."""
    if not 0 <= operand_index < len(N.operands):
        raise IndexOutOfRange(f"operand index {operand_index} out of range for {len(N.operands)} operands")
    operand = N.operands[operand_index]
    d_space = getattr(direction, "space", None)
    o_space = getattr(operand, "space", None)
    if d_space is not None and o_space is not None and d_space != o_space:
        raise SpaceMismatch(f"direction space {d_space} differs from operand space {o_space}")
    if direction.shape != operand.shape:
        raise SpaceMismatch("direction shape differs from operand shape")
    derivs = list(N.derivatives)
    derivs[operand_index] += 1
    return N._copy(derivatives=derivs, directions=N.directions + (direction,))


class OperatorForm:
    """An external operator read as a form ``N(u; v..., v*)``.

    ``coargument`` is an :class:`Argument` in ``X`` (the dual basis, giving
    nodal values on assembly) or a :class:`Coefficient` whose nodal vector is
    paired with the operator's output.
    """

    __slots__ = ("operator", "coargument")

    def __init__(self, operator: ExternalOperator, coargument: Optional[Expr] = None):
        if not isinstance(operator, ExternalOperator):
            raise TypeError("OperatorForm wraps an ExternalOperator")
        if coargument is None:
            coargument = Argument(operator.result_space, 0)
            used = {a.number for a in operator.arguments}
            if 0 in used:
                raise FormError("argument 0 is taken; pass the coargument explicitly")
        self.operator = operator
        self.coargument = coargument

    def exprs(self):
        return [self.operator, self.coargument]

    @property
    def domain(self):
        return self.operator.domain

    def __eq__(self, other):
        return (isinstance(other, OperatorForm) and self.operator == other.operator
                and self.coargument == other.coargument)

    def __hash__(self):
        return hash((self.operator, self.coargument))

    def __str__(self):
        return f"<{self.coargument}, {self.operator}>"

    __repr__ = __str__


def as_operator_form(obj):
    if isinstance(obj, ExternalOperator):
        return OperatorForm(obj)
    return obj


# --------------------------------------------------------------------------
# Nodal evaluation


def lookup(bindings: dict, coefficient: Coefficient) -> np.ndarray:
    try:
        value = bindings[coefficient]
    except KeyError:
        raise UnboundCoefficient(f"coefficient {coefficient} is not bound") from None
    return as_values(value)


def _add_lin(a, b):
    return a + b


def nodal(expr: Expr, bindings: dict, memo: Optional[dict] = None):
    """Evaluate ``expr`` on degrees of freedom.

    Returns ``(value, None)`` for argument-free expressions, where ``value``
    is a float or nodal vector, and ``(None, matrix)`` for expressions linear
    in a single argument, where ``matrix`` maps the argument's dofs to the
    expression's nodal values.
    """
    if memo is None:
        memo = {}
    if expr in memo:
        return memo[expr]
    result = _nodal(expr, bindings, memo)
    memo[expr] = result
    return result


def _nodal(expr, bindings, memo):
    if isinstance(expr, Constant):
        return expr.value, None
    if isinstance(expr, Coefficient):
        return lookup(bindings, expr), None
    if isinstance(expr, Argument):
        n = expr.space.dimension()
        return None, sp.identity(n, format="csr")
    if isinstance(expr, Negate):
        v, m = nodal(expr.children[0], bindings, memo)
        return (None if v is None else -v), (None if m is None else -m)
    if isinstance(expr, Sum):
        (va, ma), (vb, mb) = (nodal(c, bindings, memo) for c in expr.children)
        if ma is None:
            return va + vb, None
        return None, _add_lin(ma, mb)
    if isinstance(expr, (Product, Inner)):
        (va, ma), (vb, mb) = (nodal(c, bindings, memo) for c in expr.children)
        if expr.children[0].shape:
            raise ShapeMismatch("nodal evaluation supports scalar expressions only")
        if ma is None and mb is None:
            return va * vb, None
        scale, lin = (va, mb) if ma is None else (vb, ma)
        if np.ndim(scale) == 0:
            return None, float(scale) * lin
        return None, _scale_rows(scale, lin)
    if isinstance(expr, ExternalOperator):
        return _nodal_operator(expr, bindings, memo)
    if isinstance(expr, Grad):
        raise FormError("gradients have no nodal value; use them in integrands only")
    raise FormError(f"cannot evaluate {type(expr).__name__} on nodes")


def _scale_rows(scale, lin):
    if sp.issparse(lin):
        return sp.diags(np.asarray(scale, dtype=float)) @ lin
    return np.asarray(scale, dtype=float)[:, None] * lin


def _operand_values(N: ExternalOperator, bindings, memo):
    values = []
    for o in N.operands:
        v, _ = nodal(o, bindings, memo)
        values.append(np.atleast_1d(np.asarray(v, dtype=float)))
    impl = N.impl
    impl.check(values)
    return impl, values


def _derivative_index(N: ExternalOperator) -> int:
    if N.order > 1:
        raise HigherDerivativeUnsupported(
            f"derivative multi-index {N.derivatives} has order {N.order}; only first derivatives are implemented")
    if N.order == 0:
        raise FormError("operator carries no derivative")
    return N.derivatives.index(1)


def _nodal_operator(N, bindings, memo):
    impl, values = _operand_values(N, bindings, memo)
    if N.order == 0:
        return np.asarray(impl.eval(values), dtype=float), None
    i = _derivative_index(N)
    dv, dm = nodal(N.directions[0], bindings, memo)
    if dm is None:
        dv = np.broadcast_to(np.asarray(dv, dtype=float), values[i].shape)
        return np.asarray(impl.jvp(i, values, dv), dtype=float), None
    J = impl.jac_operand(i, values)
    return None, J @ dm


def derivative_map(N: ExternalOperator, bindings: dict, memo=None):
    """Linearisation data of a derivative node whose direction holds an argument.

    Returns ``(impl, operand values, operand index, T)`` where ``T`` maps the
    direction argument's dofs to operand dofs.
    """
    memo = {} if memo is None else memo
    impl, values = _operand_values(N, bindings, memo)
    i = _derivative_index(N)
    dv, dm = nodal(N.directions[0], bindings, memo)
    if dm is None:
        raise FormError("derivative direction carries no argument")
    return impl, values, i, dm


def evaluate(N: ExternalOperator, bindings: dict) -> FieldVector:
    """Evaluate an underived operator to a field in its result space."""
    if N.order != 0:
        raise FormError("use evaluate_derivative for derivative nodes")
    value, _ = _nodal_operator(N, bindings, {})
    return FieldVector(value, N.result_space)


def evaluate_derivative(N: ExternalOperator, bindings: dict, direction=None) -> FieldVector:
    """Forward derivative ``dN/du_i . direction``.

    ``direction`` defaults to the node's own (argument-free) direction.
    """
    memo = {}
    impl, values = _operand_values(N, bindings, memo)
    i = _derivative_index(N)
    if direction is None:
        direction, lin = nodal(N.directions[0], bindings, memo)
        if lin is not None:
            raise FormError("direction is an argument; pass direction values")
    d = np.broadcast_to(as_values(direction), values[i].shape)
    return FieldVector(impl.jvp(i, values, d), N.result_space)


def evaluate_adjoint_derivative(N: ExternalOperator, bindings: dict, cotangent) -> FieldVector:
    """Adjoint derivative ``(dN/du_i)^T y`` (backpropagation for networks)."""
    impl, values = _operand_values(N, bindings, {})
    i = _derivative_index(N)
    y = as_values(cotangent)
    space = getattr(N.operands[i], "space", None)
    return FieldVector(impl.vjp(i, values, y), space)


def fresh_direction(obj, space: FunctionSpace) -> Argument:
    """A new argument numbered one above the highest argument of ``obj``."""
    number = max_argument_number(obj) + 1
    if isinstance(obj, ExternalOperator):
        number = max(number, 1)  # 0 is reserved for the coargument
    return Argument(space, number)

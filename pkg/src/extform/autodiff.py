"""Symbolic Gateaux differentiation and form transformations.

Derivatives are computed by rewriting trees.  Zero branches are pruned as
they appear (None stands for zero internally), so differentiating a form
with respect to a coefficient it does not contain yields the canonical
zero form.

External operators are differentiated by the chain rule: for a node
``N(e_1, ..., e_k)`` each operand contributes ``dN/de_i`` applied to the
derivative of ``e_i``, represented as a new operator node with an
incremented derivative multi-index and the direction appended.
"""

from __future__ import annotations

from typing import Optional

from .errors import ArityError, FormError, SpaceMismatch
from .extop import ExternalOperator, OperatorForm, external_derivative, fresh_direction
from .symbolic import (
    Argument,
    Coefficient,
    Expr,
    Form,
    Grad,
    Inner,
    Negate,
    Product,
    Sum,
    Terminal,
    arguments,
    max_argument_number,
    substitute,
)


def _add(a, b):
    if a is None:
        return b
    if b is None:
        return a
    return Sum(a, b)


def expr_derivative(expr: Expr, variable: Coefficient, direction: Expr, memo=None) -> Optional[Expr]:
    """Directional derivative of ``expr``; None when identically zero."""
    if memo is None:
        memo = {}

    def d(node):
        if node in memo:
            return memo[node]
        out = _rule(node)
        memo[node] = out
        return out

    def _rule(node):
        if node == variable:
            return direction
        if isinstance(node, Terminal):
            return None
        if isinstance(node, Sum):
            return _add(*(d(c) for c in node.children))
        if isinstance(node, Negate):
            da = d(node.children[0])
            return None if da is None else Negate(da)
        if isinstance(node, (Product, Inner)):
            a, b = node.children
            da, db = d(a), d(b)
            left = None if da is None else node.reconstruct(da, b)
            right = None if db is None else node.reconstruct(a, db)
            return _add(left, right)
        if isinstance(node, Grad):
            da = d(node.children[0])
            return None if da is None else Grad(da)
        if isinstance(node, ExternalOperator):
            out = None
            for i, operand in enumerate(node.operands):
                dop = d(operand)
                if dop is not None:
                    out = _add(out, external_derivative(node, i, dop))
            for j, dirn in enumerate(node.directions):
                ddir = d(dirn)
                if ddir is not None:
                    dirs = list(node.directions)
                    dirs[j] = ddir
                    out = _add(out, node._copy(directions=dirs))
            return out
        raise FormError(f"no derivative rule for {type(node).__name__}")

    return d(expr)


def _check_direction(variable: Coefficient, direction: Expr) -> None:
    if not isinstance(variable, Coefficient):
        raise FormError("can only differentiate with respect to a coefficient")
    space = getattr(direction, "space", None)
    if space is not None and space != variable.space:
        raise SpaceMismatch(f"direction space {space} differs from variable space {variable.space}")
    if direction.shape != variable.shape:
        raise SpaceMismatch("direction shape differs from variable shape")


def gateaux_derivative(form: Form, variable: Coefficient, direction: Optional[Expr] = None) -> Form:
    """Derivative of ``form`` w.r.t. ``variable`` in ``direction``.

    ``direction`` defaults to a fresh argument numbered above the form's
    highest argument, so the arity rises by one.
    """
    if direction is None:
        direction = Argument(variable.space, max_argument_number(form) + 1)
    _check_direction(variable, direction)
    memo = {}
    zero_args = list(arguments(form)) + [a for a in direction.arguments]
    return form.map_integrands(lambda e: expr_derivative(e, variable, direction, memo), zero_args)


def derivative(obj, variable: Coefficient, direction: Optional[Expr] = None):
    """Differentiate a form, an external operator or an operator form.

    For an operator ``N`` the result is a derivative node (or a sum of them
    when several operands depend on ``variable``); when ``N`` does not depend
    on ``variable`` the canonical zero form is returned.
    """
    if isinstance(obj, Form):
        return gateaux_derivative(obj, variable, direction)
    if isinstance(obj, OperatorForm):
        if direction is None:
            direction = Argument(variable.space, max_argument_number(obj) + 1)
        out = _operator_derivative(obj.operator, variable, direction, obj.coargument)
        if isinstance(out, ExternalOperator):
            return OperatorForm(out, obj.coargument)
        return out
    if isinstance(obj, ExternalOperator):
        if direction is None:
            direction = fresh_direction(obj, variable.space)
        return _operator_derivative(obj, variable, direction, Argument(obj.result_space, 0))
    raise TypeError(f"cannot differentiate {type(obj).__name__}")


def _operator_derivative(N, variable, direction, coargument):
    _check_direction(variable, direction)
    out = expr_derivative(N, variable, direction)
    if out is None:
        args = list(N.arguments) + list(direction.arguments)
        if isinstance(coargument, Argument):
            args.append(coargument)
        return Form.zero(args)
    return out


def adjoint(form) -> Form:
    """Swap the two arguments of a bilinear form (matrix transpose)."""
    if isinstance(form, ExternalOperator):
        form = OperatorForm(form)
    args = arguments(form) if not isinstance(form, OperatorForm) else _operator_form_args(form)
    if sorted(a.number for a in args) != [0, 1]:
        raise ArityError(f"adjoint needs a form with arguments 0 and 1, got {[a.number for a in args]}")
    a0, a1 = args
    mapping = {a0: Argument(a0.space, 1), a1: Argument(a1.space, 0)}
    if isinstance(form, OperatorForm):
        coarg = mapping.get(form.coargument, form.coargument)
        return OperatorForm(substitute(form.operator, mapping), coarg)
    if form.is_zero:
        return Form.zero(list(mapping.values()))
    memo = {}
    return form.map_integrands(lambda e: substitute(e, mapping, memo), list(mapping.values()))


def _operator_form_args(form: OperatorForm):
    args = set(form.operator.arguments)
    if isinstance(form.coargument, Argument):
        args.add(form.coargument)
    return sorted(args, key=lambda a: a.number)


def action(form, w: Expr):
    """Replace the highest-numbered argument of ``form`` by ``w``."""
    if isinstance(form, ExternalOperator):
        form = OperatorForm(form)
    args = _operator_form_args(form) if isinstance(form, OperatorForm) else arguments(form)
    if not args:
        raise ArityError("action needs a form with at least one argument")
    target = args[-1]
    space = getattr(w, "space", None)
    if (space is not None and space != target.space) or w.shape != target.shape:
        raise SpaceMismatch(f"cannot substitute {w} for an argument of {target.space}")
    if isinstance(form, OperatorForm):
        if form.coargument == target:
            return OperatorForm(form.operator, w)
        return OperatorForm(substitute(form.operator, {target: w}), form.coargument)
    remaining = args[:-1]
    if form.is_zero:
        return Form.zero(remaining)
    memo = {}
    return form.map_integrands(lambda e: substitute(e, {target: w}, memo), remaining)


def replace(form, mapping: dict):
    """Simultaneously substitute coefficients by expressions."""
    for key, value in mapping.items():
        if not isinstance(key, Coefficient):
            raise FormError(f"replace keys must be coefficients, got {key!r}")
        space = getattr(value, "space", None)
        if (space is not None and space != key.space) or value.shape != key.shape:
            raise SpaceMismatch(f"cannot replace {key} by {value}")
    if isinstance(form, Expr):
        return substitute(form, mapping)
    if isinstance(form, OperatorForm):
        coarg = mapping.get(form.coargument, form.coargument)
        return OperatorForm(substitute(form.operator, mapping), coarg)
    if form.is_zero:
        return form
    memo = {}
    return form.map_integrands(lambda e: substitute(e, mapping, memo))

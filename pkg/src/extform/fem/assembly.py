"""Cell-loop assembly of 0-, 1- and 2-forms on P1 meshes.

The loop over cells is vectorised: every integrand node evaluates to an
array with axes ``(cell, quadrature point, test dof, trial dof, *value)``
where the dof axes have length 1 when the node does not depend on the
corresponding argument.

External operators are handled with an assembled-coefficient strategy.
Underived operators (and derivative nodes whose directions are known
functions) are evaluated on the dofs first and substituted by ordinary
coefficients.  A derivative node ``dN[w]`` whose direction ``w`` carries an
argument enters linearly; the form is assembled with that node replaced by
an argument of the operator's result space and the result is composed with
the operator Jacobian, i.e. ``dF/dN . dN/du``.
"""

from __future__ import annotations

import itertools
from typing import Optional

import numpy as np
import scipy.sparse as sp

from ..errors import ArityError, FormError, ShapeMismatch
from ..extop import ExternalOperator, OperatorForm, derivative_map, lookup, nodal
from ..field import FieldVector, as_values
from ..symbolic import (
    Argument,
    Coefficient,
    Constant,
    Expr,
    Form,
    Grad,
    Inner,
    Negate,
    Product,
    SpatialCoordinate,
    Sum,
    arguments,
    check_arity,
    mesh_of,
    substitute,
    traverse,
)
from .quadrature import make_rule, p1_basis


def estimate_degree(expr: Expr) -> int:
    """Syntactic polynomial degree bound of an integrand."""
    memo = {}

    def deg(node):
        if node in memo:
            return memo[node]
        if isinstance(node, Constant):
            out = 0
        elif isinstance(node, (Argument, Coefficient, SpatialCoordinate, ExternalOperator)):
            out = 1
        elif isinstance(node, Grad):
            out = max(deg(node.children[0]) - 1, 0)
        elif isinstance(node, (Product, Inner)):
            out = deg(node.children[0]) + deg(node.children[1])
        elif isinstance(node, Sum):
            out = max(deg(c) for c in node.children)
        elif isinstance(node, Negate):
            out = deg(node.children[0])
        else:
            out = 1
        memo[node] = out
        return out

    return deg(expr)


class _Geometry:
    def __init__(self, mesh, degree):
        rule = make_rule(mesh.dim, degree)
        self.mesh = mesh
        self.weights = rule.weights
        self.phi = p1_basis(rule.points)  # (q, nloc)
        x = mesh.vertices[mesh.cells]  # (c, nloc, d)
        self.xq = np.einsum("qa,cad->cqd", self.phi, x)
        self.scale = np.abs(mesh.detj)  # (c,)


def _geometry(mesh, degree) -> _Geometry:
    cache = mesh.__dict__.setdefault("_geometry_cache", {})
    key = min(max(degree, 1), 4)
    if key not in cache:
        cache[key] = _Geometry(mesh, key)
    return cache[key]


class _Evaluator:
    """Evaluates an external-operator-free integrand at quadrature points."""

    def __init__(self, geom: _Geometry, bindings: dict):
        self.g = geom
        self.mesh = geom.mesh
        self.bindings = bindings
        self.memo = {}
        self.grad_memo = {}

    def _p1_values(self, coefficient):
        if coefficient.space.is_real:
            raise FormError(f"Real-space coefficient {coefficient} can only be an external-operator operand")
        vals = lookup(self.bindings, coefficient)
        if vals.shape != (self.mesh.num_vertices,):
            raise ShapeMismatch(f"{coefficient} bound to {vals.shape[0]} values, mesh has {self.mesh.num_vertices}")
        return vals[self.mesh.cells]  # (c, nloc)

    def value(self, node):
        try:
            return self.memo[node]
        except KeyError:
            pass
        out = self._value(node)
        self.memo[node] = out
        return out

    def _value(self, node):
        if isinstance(node, Constant):
            return np.full((1, 1, 1, 1), node.value)
        if isinstance(node, Coefficient):
            return (self._p1_values(node) @ self.g.phi.T)[:, :, None, None]
        if isinstance(node, Argument):
            _check_p1_argument(node)
            phi = self.g.phi
            if node.number == 0:
                return phi[None, :, :, None]
            return phi[None, :, None, :]
        if isinstance(node, SpatialCoordinate):
            x = self.g.xq[:, :, None, None, :]
            return x if node.component is None else x[..., node.component]
        if isinstance(node, Sum):
            a, b = node.children
            return self.value(a) + self.value(b)
        if isinstance(node, Negate):
            return -self.value(node.children[0])
        if isinstance(node, Product):
            a, b = node.children
            va, vb = self.value(a), self.value(b)
            if a.shape:
                vb = vb[..., None]
            elif b.shape:
                va = va[..., None]
            return va * vb
        if isinstance(node, Inner):
            a, b = node.children
            prod = self.value(a) * self.value(b)
            return prod.sum(axis=-1) if a.shape else prod
        if isinstance(node, Grad):
            return self.gradient(node.children[0])
        raise FormError(f"cannot evaluate {type(node).__name__} in an integrand")

    def gradient(self, node):
        try:
            return self.grad_memo[node]
        except KeyError:
            pass
        out = self._gradient(node)
        self.grad_memo[node] = out
        return out

    def _gradient(self, node):
        d = self.mesh.dim
        grads = self.mesh.basis_gradients  # (c, nloc, d)
        if isinstance(node, Constant):
            return np.zeros((1, 1, 1, 1, d))
        if isinstance(node, Coefficient):
            g = np.einsum("ca,cad->cd", self._p1_values(node), grads)
            return g[:, None, None, None, :]
        if isinstance(node, Argument):
            _check_p1_argument(node)
            if node.number == 0:
                return grads[:, None, :, None, :]
            return grads[:, None, None, :, :]
        if isinstance(node, SpatialCoordinate) and node.component is not None:
            e = np.zeros((1, 1, 1, 1, d))
            e[..., node.component] = 1.0
            return e
        if isinstance(node, Sum):
            a, b = node.children
            return self.gradient(a) + self.gradient(b)
        if isinstance(node, Negate):
            return -self.gradient(node.children[0])
        if isinstance(node, (Product, Inner)) and not node.children[0].shape:
            a, b = node.children
            return self.value(a)[..., None] * self.gradient(b) + self.value(b)[..., None] * self.gradient(a)
        raise FormError(f"gradient of {node} is not supported for P1 fields")

    def integrate(self, integrand) -> np.ndarray:
        """Element tensors, shape (c, n0, n1) with n0/n1 in {1, nloc}."""
        vals = self.value(integrand)
        c = self.mesh.num_cells
        q = len(self.g.weights)
        vals = np.broadcast_to(vals, (c, q) + vals.shape[2:4])
        return np.einsum("cqij,q,c->cij", vals, self.g.weights, self.g.scale)


def _check_p1_argument(arg: Argument) -> None:
    if arg.space.is_real:
        raise FormError("Real-space arguments can only appear as external-operator directions")
    if arg.number > 1:
        raise ArityError(f"argument number {arg.number} is not supported by assembly")


def _resolve_mesh(form, mesh):
    if mesh is not None:
        return mesh
    mesh = mesh_of(form.domain)
    if mesh is None:
        raise FormError("form has no bound mesh; pass mesh=")
    return mesh


def _normalise(bindings) -> dict:
    return {} if bindings is None else dict(bindings)


def assemble(form, bindings: Optional[dict] = None, mesh=None):
    """Assemble a form to a float (0-form), FieldVector (1-form) or CSR matrix (2-form).

    An :class:`ExternalOperator` or :class:`OperatorForm` is assembled in its
    form reading: its nodal values, Jacobian, or a pairing with the
    coargument.
    """
    bindings = _normalise(bindings)
    if isinstance(form, ExternalOperator):
        form = OperatorForm(form)
    if isinstance(form, OperatorForm):
        return _assemble_operator_form(form, bindings)
    if not isinstance(form, Form):
        raise TypeError(f"cannot assemble {type(form).__name__}")
    check_arity(form)
    args = arguments(form)
    mesh = _resolve_mesh(form, mesh)
    shape = [a.space.dimension() for a in args]

    total = _zero_tensor(args, shape)
    if form.is_zero:
        return _wrap(total, args)

    memo = {}
    integrands = []
    for integral in form.integrals:
        e = _evaluate_operators(integral.integrand, bindings, memo)
        integrands.append(e)

    for integrand in integrands:
        for term, maps in _split_slots(integrand, bindings):
            part = _assemble_plain(term, bindings, mesh, [a for a in arguments(term)])
            total = _accumulate(total, _compose(part, maps, args))
    return _wrap(total, args)


def _zero_tensor(args, shape):
    if not args:
        return 0.0
    if len(args) == 1:
        return np.zeros(shape[0])
    return sp.csr_matrix(tuple(shape))


def _accumulate(total, part):
    if sp.issparse(total) or sp.issparse(part):
        return sp.csr_matrix(total + part)
    return total + part


def _wrap(total, args):
    if not args:
        return float(total)
    if len(args) == 1:
        return FieldVector(total, args[0].space)
    out = sp.csr_matrix(total)
    out.sum_duplicates()
    out.sort_indices()
    return out


def _evaluate_operators(expr, bindings, memo):
    """Replace argument-free operator nodes by coefficients bound to their values."""
    mapping = {}
    nodal_memo = memo.setdefault("__nodal__", {})
    for node in traverse(expr, stop=lambda n: isinstance(n, ExternalOperator)):
        if isinstance(node, ExternalOperator) and not node.arguments:
            if node not in memo:
                value, _ = nodal(node, bindings, nodal_memo)
                if node.result_space.is_real:
                    raise FormError("operators with Real-space results cannot appear in integrands")
                stand_in = Coefficient(node.result_space, label=str(node))
                bindings[stand_in] = np.asarray(value, dtype=float)
                memo[node] = stand_in
            mapping[node] = memo[node]
    if not mapping:
        return expr
    return substitute(expr, mapping)


def _split_slots(expr, bindings):
    """Yield ``(term, maps)`` pairs isolating each argument-carrying derivative node.

    ``maps[k]`` is None when argument ``k`` enters directly, otherwise the
    linearisation data of the derivative node standing in for it.
    """
    slots = {}
    for node in traverse(expr, stop=lambda n: isinstance(n, ExternalOperator)):
        if isinstance(node, ExternalOperator) and node.arguments:
            numbers = {a.number for a in node.arguments}
            if len(numbers) != 1:
                raise FormError(f"operator node {node} carries several arguments")
            slots.setdefault(numbers.pop(), []).append(node)
    if not slots:
        yield expr, {}
        return
    direct = {a.number: a for a in expr.arguments}
    numbers = sorted(direct)
    options = [[None] + slots.get(k, []) for k in numbers]
    for choice in itertools.product(*options):
        mapping = {}
        maps = {}
        for k, chosen in zip(numbers, choice):
            for node in slots.get(k, []):
                mapping[node] = None
            if chosen is None:
                continue
            mapping[direct[k]] = None
            mapping[chosen] = Argument(chosen.result_space, k)
            maps[k] = derivative_map(chosen, bindings)
        term = substitute(expr, mapping)
        if term is not None:
            yield term, maps


def _assemble_plain(expr, bindings, mesh, args):
    geom = _geometry(mesh, estimate_degree(expr))
    local = _Evaluator(geom, bindings).integrate(expr)
    cells = mesh.cells
    if not args:
        return float(local.sum())
    if len(args) == 1:
        n = args[0].space.dimension()
        return np.bincount(cells.ravel(), weights=local.reshape(len(cells), -1).ravel(), minlength=n)
    nloc = cells.shape[1]
    rows = np.repeat(cells, nloc, axis=1).ravel()
    cols = np.tile(cells, (1, nloc)).ravel()
    n0, n1 = (a.space.dimension() for a in args)
    return sp.coo_matrix((local.ravel(), (rows, cols)), shape=(n0, n1)).tocsr()


def _jacobian(data):
    impl, values, i, T = data
    J = impl.jac_operand(i, values)
    return J @ T


def _compose(part, maps, args):
    """Apply the chain rule to a tensor assembled against placeholder arguments."""
    if not maps:
        return part
    if len(args) == 1:
        impl, values, i, T = maps[args[0].number]
        g = impl.vjp(i, values, np.asarray(part, dtype=float))
        return np.asarray(T.T @ g).ravel()
    out = part
    if 1 in maps:
        out = out @ _jacobian(maps[1])
    if 0 in maps:
        out = _jacobian(maps[0]).T @ out
    return sp.csr_matrix(out)


def _assemble_operator_form(form: OperatorForm, bindings):
    node = form.operator
    coarg = form.coargument
    memo = {}
    if node.order == 0:
        value, _ = nodal(node, bindings, memo)
        if isinstance(coarg, Argument):
            return FieldVector(value, node.result_space)
        return float(np.dot(as_values(nodal(coarg, bindings, memo)[0]), value))
    dv, dm = nodal(node.directions[0], bindings, memo) if node.order == 1 else (None, None)
    if dm is None:
        value, _ = nodal(node, bindings, memo)
        if isinstance(coarg, Argument):
            return FieldVector(value, node.result_space)
        return float(np.dot(as_values(nodal(coarg, bindings, memo)[0]), value))
    impl, values, i, T = derivative_map(node, bindings, memo)
    direction_arg = next(iter(node.arguments))
    if isinstance(coarg, Argument):
        J = sp.csr_matrix(impl.jac_operand(i, values) @ T)
        out = J if coarg.number == 0 else J.T.tocsr()
        out.sort_indices()
        return out
    y, _ = nodal(coarg, bindings, memo)
    g = impl.vjp(i, values, np.asarray(y, dtype=float))
    return FieldVector(np.asarray(T.T @ g).ravel(), direction_arg.space)

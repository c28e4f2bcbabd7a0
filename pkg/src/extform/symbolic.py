"""Immutable expression trees and multilinear variational forms.

Expressions are built with ordinary Python operators and a handful of
functions mirroring the usual form language surface::

    u, v = TrialFunction(V), TestFunction(V)
    a = (u * v + inner(grad(u), grad(v))) * dx

Nodes are never mutated after construction.  Equality is structural and
hashes are cached, so trees can be used as dictionary keys.  No constant
folding happens at build time; zero pruning is left to the transformations
in :mod:`extform.autodiff`.
"""

from __future__ import annotations

import itertools
import threading
import weakref
from dataclasses import dataclass
from numbers import Real as _Number
from typing import Callable, Iterator, Optional

from .errors import (
    ArgumentMismatch,
    ArityError,
    FormError,
    NonlinearArgumentUse,
    ShapeMismatch,
)

LAGRANGE = "Lagrange"
REAL = "Real"

_id_lock = threading.Lock()
_domain_counter = itertools.count()
_coefficient_counter = itertools.count()
_meshes: "weakref.WeakValueDictionary[int, object]" = weakref.WeakValueDictionary()


def _next(counter) -> int:
    with _id_lock:
        return next(counter)


@dataclass(frozen=True)
class Domain:
    """Opaque handle for the geometric domain of a form."""

    id: int
    dim: int

    @classmethod
    def new(cls, dim: int) -> "Domain":
        return cls(_next(_domain_counter), dim)


def bind_mesh(domain: Domain, mesh) -> None:
    _meshes[domain.id] = mesh


def mesh_of(domain: Optional[Domain]):
    """Return the mesh bound to ``domain``, or None."""
    if domain is None:
        return None
    return _meshes.get(domain.id)


def as_domain(obj) -> Optional[Domain]:
    if obj is None or isinstance(obj, Domain):
        return obj
    domain = getattr(obj, "domain", None)
    if isinstance(domain, Domain):
        return domain
    raise TypeError(f"cannot interpret {obj!r} as a domain")


@dataclass(frozen=True)
class FunctionSpace:
    """A scalar P-k Lagrange space or the constant space R^M.

    ``domain`` may also be given as a mesh; it is normalised to the mesh's
    :class:`Domain`.
    """

    domain: Optional[Domain]
    family: str = LAGRANGE
    degree: int = 1
    value_size: int = 1

    def __post_init__(self):
        object.__setattr__(self, "domain", as_domain(self.domain))
        if self.family not in (LAGRANGE, REAL):
            raise ValueError(f"unknown family {self.family!r}")
        if self.degree < 1 or self.value_size < 1:
            raise ValueError("degree and value_size must be >= 1")
        if self.family == LAGRANGE:
            if self.domain is None:
                raise ValueError("a Lagrange space needs a domain")
            if self.value_size != 1:
                raise ValueError("only scalar Lagrange spaces are supported")

    @property
    def is_real(self) -> bool:
        return self.family == REAL

    @property
    def shape(self) -> tuple:
        """Value shape when a function of this space is used in an integrand."""
        if self.is_real and self.value_size > 1:
            return (self.value_size,)
        return ()

    def dimension(self) -> int:
        """Number of degrees of freedom."""
        if self.is_real:
            return self.value_size
        mesh = mesh_of(self.domain)
        if mesh is None:
            raise FormError("function space is not bound to a mesh")
        return mesh.num_vertices

    def __repr__(self):
        if self.is_real:
            return f"R^{self.value_size}"
        return f"{self.family}{self.degree}(domain {self.domain.id})"


def RealSpace(size: int, domain=None) -> FunctionSpace:
    return FunctionSpace(domain, REAL, 1, size)


# --------------------------------------------------------------------------
# Expression nodes


class Expr:
    """Base class of all expression nodes."""

    __slots__ = ("children", "shape", "domain", "_args", "_hash")

    children: tuple
    shape: tuple

    def _init(self, children, shape, domain=None):
        self.children = tuple(children)
        self.shape = shape
        if domain is None:
            domain = next((c.domain for c in self.children if c.domain is not None), None)
        self.domain = domain
        args = frozenset()
        for c in self.children:
            args |= c._args
        self._args = args
        self._hash = None

    def _key(self) -> tuple:
        return ()

    def reconstruct(self, *children) -> "Expr":
        return type(self)(*children)

    @property
    def arguments(self) -> frozenset:
        return self._args

    def __hash__(self):
        if self._hash is None:
            self._hash = hash((type(self).__name__, self._key(), self.children))
        return self._hash

    def __eq__(self, other):
        if self is other:
            return True
        if type(self) is not type(other) or hash(self) != hash(other):
            return False
        return self._key() == other._key() and self.children == other.children

    def __ne__(self, other):
        return not self == other

    def __bool__(self):
        return True

    # operator sugar
    def __add__(self, other):
        return Sum(self, as_expr(other))

    def __radd__(self, other):
        return Sum(as_expr(other), self)

    def __sub__(self, other):
        return Sum(self, Negate(as_expr(other)))

    def __rsub__(self, other):
        return Sum(as_expr(other), Negate(self))

    def __neg__(self):
        return Negate(self)

    def __mul__(self, other):
        if isinstance(other, Measure):
            return other.__rmul__(self)
        return Product(self, as_expr(other))

    def __rmul__(self, other):
        return Product(as_expr(other), self)

    def __truediv__(self, other):
        if not isinstance(other, _Number):
            return NotImplemented
        return Product(Constant(1.0 / float(other)), self)

    def __repr__(self):
        return str(self)


def as_expr(value) -> Expr:
    if isinstance(value, Expr):
        return value
    if isinstance(value, _Number):
        return Constant(value)
    raise TypeError(f"cannot convert {value!r} to an expression")


class Terminal(Expr):
    __slots__ = ()

    def reconstruct(self, *children):
        return self


class Constant(Terminal):
    __slots__ = ("value",)

    def __init__(self, value):
        self.value = float(value)
        self._init((), ())

    def _key(self):
        return (self.value,)

    def __str__(self):
        return repr(self.value)


class SpatialCoordinate(Terminal):
    """The coordinate field ``x``; ``x[i]`` selects one scalar component."""

    __slots__ = ("component",)

    def __init__(self, domain, component: Optional[int] = None):
        domain = as_domain(domain)
        self.component = component
        if component is not None and not 0 <= component < domain.dim:
            raise ShapeMismatch(f"coordinate component {component} out of range")
        self._init((), () if component is not None else (domain.dim,), domain)

    def _key(self):
        return (self.domain, self.component)

    def __getitem__(self, i):
        if self.component is not None:
            raise ShapeMismatch("cannot index a scalar")
        return SpatialCoordinate(self.domain, i)

    def __str__(self):
        return "x" if self.component is None else f"x[{self.component}]"


class Argument(Terminal):
    """Unknown function in a form: number 0 is the test, 1 the trial function."""

    __slots__ = ("space", "number")

    def __init__(self, space: FunctionSpace, number: int):
        if number < 0:
            raise ValueError("argument numbers are non-negative")
        self.space = space
        self.number = int(number)
        self._init((), space.shape, space.domain)
        self._args = frozenset([self])

    def _key(self):
        return (self.space, self.number)

    def __str__(self):
        return f"v_{self.number}"


def TestFunction(space: FunctionSpace) -> Argument:
    return Argument(space, 0)


def TrialFunction(space: FunctionSpace) -> Argument:
    return Argument(space, 1)


class Coefficient(Terminal):
    """Known function.  Identity is by a process-unique ``id``."""

    __slots__ = ("space", "id", "label")

    def __init__(self, space: FunctionSpace, label: Optional[str] = None):
        self.space = space
        self.id = _next(_coefficient_counter)
        self.label = label
        self._init((), space.shape, space.domain)

    def _key(self):
        return (self.id,)

    def __str__(self):
        return self.label if self.label else f"w_{self.id}"


def _check_argument_numbers(args: frozenset) -> None:
    numbers = [a.number for a in args]
    if len(numbers) != len(set(numbers)):
        raise ArgumentMismatch("two distinct arguments share the same number")


class Sum(Expr):
    __slots__ = ()

    def __init__(self, a, b):
        a, b = as_expr(a), as_expr(b)
        if a.shape != b.shape:
            raise ShapeMismatch(f"cannot add shapes {a.shape} and {b.shape}")
        if a._args != b._args:
            raise ArgumentMismatch(f"terms of a sum carry different arguments: {a} | {b}")
        self._init((a, b), a.shape)

    def __str__(self):
        a, b = self.children
        return f"({a} + {b})"


def _check_linear(a: Expr, b: Expr) -> None:
    shared = {x.number for x in a._args} & {x.number for x in b._args}
    if shared:
        raise NonlinearArgumentUse(f"argument {sorted(shared)} appears in both factors: {a} | {b}")


class Product(Expr):
    """Scalar times scalar, or scalar times vector."""

    __slots__ = ()

    def __init__(self, a, b):
        a, b = as_expr(a), as_expr(b)
        if a.shape and b.shape:
            raise ShapeMismatch(f"product needs a scalar factor, got {a.shape} and {b.shape}")
        _check_linear(a, b)
        self._init((a, b), a.shape or b.shape)
        _check_argument_numbers(self._args)

    def __str__(self):
        a, b = self.children
        return f"({a} * {b})"


class Inner(Expr):
    __slots__ = ()

    def __init__(self, a, b):
        a, b = as_expr(a), as_expr(b)
        if a.shape != b.shape:
            raise ShapeMismatch(f"inner of shapes {a.shape} and {b.shape}")
        _check_linear(a, b)
        self._init((a, b), ())
        _check_argument_numbers(self._args)

    def __str__(self):
        a, b = self.children
        return f"inner({a}, {b})"


class Grad(Expr):
    __slots__ = ()

    def __init__(self, a):
        a = as_expr(a)
        if a.shape:
            raise ShapeMismatch("grad is only defined for scalar expressions")
        if a.domain is None:
            raise ShapeMismatch(f"grad of spatially constant expression {a}")
        self._init((a,), (a.domain.dim,))

    def __str__(self):
        return f"grad({self.children[0]})"


class Negate(Expr):
    __slots__ = ()

    def __init__(self, a):
        a = as_expr(a)
        self._init((a,), a.shape)

    def __str__(self):
        return f"(-{self.children[0]})"


def inner(a, b) -> Expr:
    return Inner(a, b)


def grad(a) -> Expr:
    return Grad(a)


# --------------------------------------------------------------------------
# Traversal and rewriting


def traverse(expr: Expr, stop: Optional[Callable[[Expr], bool]] = None) -> Iterator[Expr]:
    """Yield each distinct node once, parents before children.

    Children of nodes for which ``stop(node)`` is true are not visited.
    """
    seen = set()
    stack = [expr]
    while stack:
        node = stack.pop()
        if node in seen:
            continue
        seen.add(node)
        yield node
        if stop is None or not stop(node):
            stack.extend(reversed(node.children))


def rebuild(node: Expr, children: list) -> Optional[Expr]:
    """Reconstruct ``node`` from new children where None means zero."""
    if all(n is o for n, o in zip(children, node.children)):
        return node
    if isinstance(node, Sum):
        a, b = children
        if a is None:
            return b
        if b is None:
            return a
        return Sum(a, b)
    if isinstance(node, (Product, Inner, Negate, Grad)):
        if any(c is None for c in children):
            return None
        return node.reconstruct(*children)
    return node.reconstruct_pruned(children)


def substitute(expr: Expr, mapping: dict, memo: Optional[dict] = None) -> Optional[Expr]:
    """Simultaneous substitution of whole subtrees.

    Nodes found in ``mapping`` are replaced without descending into them or
    into their replacements.  A replacement of None means zero and is pruned.
    """
    if memo is None:
        memo = {}

    def visit(node):
        if node in mapping:
            return mapping[node]
        try:
            return memo[node]
        except KeyError:
            pass
        if node.children:
            out = rebuild(node, [visit(c) for c in node.children])
        else:
            out = node
        memo[node] = out
        return out

    return visit(expr)


def coefficients(obj) -> list:
    """Coefficients of a form or expression in ascending id order."""
    if isinstance(obj, Expr):
        found = {n for n in traverse(obj) if isinstance(n, Coefficient)}
    else:
        found = set()
        for e in _form_exprs(obj):
            found.update(n for n in traverse(e) if isinstance(n, Coefficient))
    return sorted(found, key=lambda c: c.id)


def arguments(obj) -> list:
    """Arguments of a form or expression sorted by number."""
    if isinstance(obj, Expr):
        args = obj._args
    else:
        args = frozenset()
        for e in _form_exprs(obj):
            args |= e._args
        args |= frozenset(getattr(obj, "extra_arguments", ()))
    return sorted(args, key=lambda a: a.number)


def _form_exprs(obj):
    if hasattr(obj, "exprs"):
        return obj.exprs()
    raise TypeError(f"expected a form or expression, got {type(obj).__name__}")


def arity(form) -> int:
    """Number of distinct argument numbers of ``form``."""
    return len({a.number for a in arguments(form)})


# --------------------------------------------------------------------------
# Integrals and forms


class Measure:
    """Cell integration measure; ``dx(mesh)`` fixes the domain explicitly."""

    def __init__(self, domain=None):
        self.domain = as_domain(domain)

    def __call__(self, domain) -> "Measure":
        return Measure(domain)

    def __rmul__(self, integrand):
        integrand = as_expr(integrand)
        return Form([Integral(integrand, self.domain or integrand.domain)])

    def __repr__(self):
        return "dx"


dx = Measure()


@dataclass(frozen=True)
class Integral:
    integrand: Expr
    domain: Optional[Domain] = None

    def __post_init__(self):
        if self.integrand.shape != ():
            raise ShapeMismatch(f"integrand must be scalar, got shape {self.integrand.shape}")

    def __str__(self):
        return f"{self.integrand} * dx"


class Form:
    """Sum of cell integrals, linear in each argument.

    A form with no integrals is the canonical zero form; it remembers the
    arguments it would have had so it can still be assembled.
    """

    __slots__ = ("integrals", "_zero_args", "_hash")

    def __init__(self, integrals, zero_arguments=()):
        self.integrals = tuple(integrals)
        self._hash = None
        domains = {i.domain for i in self.integrals if i.domain is not None}
        if len(domains) > 1:
            raise FormError("all integrals of a form must share one domain")
        if self.integrals:
            sets = {i.integrand._args for i in self.integrals}
            if len(sets) > 1:
                raise ArgumentMismatch("integrals of a form carry different arguments")
            self._zero_args = ()
        else:
            self._zero_args = tuple(sorted(zero_arguments, key=lambda a: a.number))

    @classmethod
    def zero(cls, arguments=()) -> "Form":
        return cls((), arguments)

    @property
    def is_zero(self) -> bool:
        return not self.integrals

    @property
    def domain(self) -> Optional[Domain]:
        for i in self.integrals:
            if i.domain is not None:
                return i.domain
        for a in self._zero_args:
            if a.space.domain is not None:
                return a.space.domain
        return None

    @property
    def extra_arguments(self):
        return self._zero_args

    def exprs(self):
        return [i.integrand for i in self.integrals]

    def map_integrands(self, fn, zero_arguments=None) -> "Form":
        """Apply ``fn`` to each integrand, dropping those that become None."""
        out = []
        for i in self.integrals:
            new = fn(i.integrand)
            if new is not None:
                out.append(Integral(new, i.domain))
        if zero_arguments is None:
            zero_arguments = arguments(self)
        return Form(out, zero_arguments)

    def __add__(self, other):
        if not isinstance(other, Form):
            return NotImplemented
        if self.is_zero:
            return other
        if other.is_zero:
            return self
        return Form(self.integrals + other.integrals)

    def __neg__(self):
        return self.map_integrands(Negate)

    def __sub__(self, other):
        if not isinstance(other, Form):
            return NotImplemented
        return self + (-other)

    def __rmul__(self, scalar):
        if not isinstance(scalar, (_Number, Expr)):
            return NotImplemented
        return self.map_integrands(lambda e: Product(as_expr(scalar), e))

    def __eq__(self, other):
        if not isinstance(other, Form):
            return NotImplemented
        return self.integrals == other.integrals and self._zero_args == other._zero_args

    def __hash__(self):
        if self._hash is None:
            self._hash = hash((self.integrals, self._zero_args))
        return self._hash

    def __str__(self):
        if self.is_zero:
            return "0"
        return " + ".join(str(i) for i in self.integrals)

    def __repr__(self):
        return f"Form({self})"


def max_argument_number(obj) -> int:
    """Highest argument number present, or -1 when there are none."""
    args = arguments(obj)
    return max((a.number for a in args), default=-1)


def check_arity(form, limit=2) -> int:
    k = arity(form)
    if k > limit:
        raise ArityError(f"form has arity {k}, at most {limit} supported")
    return k

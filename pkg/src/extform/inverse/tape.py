"""A minimal reverse-mode tape over numpy values.

Each record holds a pure forward function of its input values and, for
records that matter to gradients, a backward function mapping the output
adjoint to input adjoints.  Replaying reruns the forward functions in
order, so a new control value propagates through the whole recorded
computation without rebuilding it.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
import scipy.sparse as sp

from ..autodiff import action, derivative
from ..errors import StaleTape
from ..fem.assembly import assemble
from ..symbolic import Coefficient, Form, arguments, coefficients


@dataclass
class Record:
    name: str
    forward: Callable
    inputs: tuple
    output: Optional[int]
    backward: Optional[Callable] = None


class Tape:
    """Ordered forward records plus the values they produced."""

    def __init__(self):
        self.records: list[Record] = []
        self._values: list = []
        self._active: list[bool] = []
        self._controls: list[int] = []
        self.stale = False

    def _new(self, value, active: bool) -> int:
        self._values.append(value)
        self._active.append(active)
        return len(self._values) - 1

    def control(self, value) -> int:
        var = self._new(np.array(value, dtype=float), True)
        self._controls.append(var)
        return var

    def constant(self, value) -> int:
        return self._new(value, False)

    def value(self, var: int):
        return self._values[var]

    def is_active(self, var: int) -> bool:
        return self._active[var]

    def record(self, name: str, forward: Callable, inputs: Sequence[int],
               backward: Optional[Callable] = None, output: bool = True) -> Optional[int]:
        """Run ``forward`` on the current input values and append the record.

        ``backward(adjoint, input_values, active)`` returns one adjoint (or
        None) per input.  Records without an output are checks.
        """
        inputs = tuple(inputs)
        result = forward(*(self._values[i] for i in inputs))
        out = None
        if output:
            out = self._new(result, any(self._active[i] for i in inputs))
        self.records.append(Record(name, forward, inputs, out, backward))
        return out

    def set_control(self, var: int, value) -> None:
        if var not in self._controls:
            raise ValueError(f"variable {var} is not a control")
        self._values[var] = np.array(value, dtype=float)
        self.stale = True

    def replay(self) -> None:
        """Recompute every recorded value from the current controls."""
        for rec in self.records:
            result = rec.forward(*(self._values[i] for i in rec.inputs))
            if rec.output is not None:
                self._values[rec.output] = result
        self.stale = False

    def gradient(self, output: int, seed=1.0) -> dict:
        """Adjoints of every control with respect to ``output``."""
        if self.stale:
            raise StaleTape("controls changed since the last forward run; replay first")
        adj = {output: seed}
        for rec in reversed(self.records):
            if rec.output is None or rec.output not in adj or rec.backward is None:
                continue
            bar = adj.pop(rec.output)
            active = [self._active[i] for i in rec.inputs]
            if not any(active):
                continue
            vals = [self._values[i] for i in rec.inputs]
            contributions = rec.backward(bar, vals, active)
            for var, c, on in zip(rec.inputs, contributions, active):
                if c is None or not on:
                    continue
                adj[var] = adj[var] + c if var in adj else c
        return {v: adj.get(v, np.zeros_like(self._values[v])) for v in self._controls}


# --------------------------------------------------------------------------
# Taped operations


def lincomb(tape: Tape, terms: Sequence[tuple], name="lincomb") -> int:
    """Record ``sum(a_i x_i)`` for (coefficient, variable) pairs."""
    weights = [float(a) for a, _ in terms]

    def forward(*xs):
        out = weights[0] * xs[0]
        for a, x in zip(weights[1:], xs[1:]):
            out = out + a * x
        return out

    def backward(bar, vals, active):
        return [a * bar for a in weights]

    return tape.record(name, forward, [v for _, v in terms], backward)


def add_scalars(tape: Tape, variables: Sequence[int]) -> int:
    def forward(*xs):
        total = 0.0
        for x in xs:
            total += x
        return total

    def backward(bar, vals, active):
        return [bar] * len(vals)

    return tape.record("sum", forward, variables, backward)


def linear_map(tape: Tape, apply: Callable, apply_transpose: Callable, var: int, name="linear") -> int:
    """Record ``y = L x`` for a fixed linear operator."""
    return tape.record(name, apply, [var], lambda bar, vals, active: [apply_transpose(bar)])


def check(tape: Tape, fn: Callable, inputs: Sequence[int], name="check") -> None:
    tape.record(name, fn, inputs, output=False)


class _DerivativeCache:
    def __init__(self, form):
        self.form = form
        self.forms = {}

    def get(self, coefficient):
        if coefficient not in self.forms:
            self.forms[coefficient] = derivative(self.form, coefficient)
        return self.forms[coefficient]


def functional(tape: Tape, form: Form, inputs: dict, name="functional") -> int:
    """Record the assembly of a 0-form whose coefficients come from tape variables."""
    coefs = list(inputs)
    missing = [c for c in coefficients(form) if c not in inputs]
    if missing:
        raise ValueError(f"coefficients {missing} have no tape variable")
    cache = _DerivativeCache(form)

    def forward(*vals):
        return assemble(form, dict(zip(coefs, vals)))

    def backward(bar, vals, active):
        bindings = dict(zip(coefs, vals))
        out = []
        for c, on in zip(coefs, active):
            out.append(bar * assemble(cache.get(c), bindings).values if on else None)
        return out

    return tape.record(name, forward, [inputs[c] for c in coefs], backward)


class MatrixCache:
    """Reassemble a bilinear form only when its coefficient values change."""

    def __init__(self, form: Form):
        if len(arguments(form)) != 2:
            raise ValueError("MatrixCache needs a bilinear form")
        self.form = form
        self._key = None
        self._matrix = None
        self._transpose = None

    def get(self, coefs, vals):
        if self._key is None or any(not np.array_equal(a, b) for a, b in zip(self._key, vals)):
            self._matrix = assemble(self.form, dict(zip(coefs, vals)))
            self._transpose = sp.csr_matrix(self._matrix.T)
            self._key = [np.array(v, copy=True) for v in vals]
        return self._matrix, self._transpose


def matrix_action(tape: Tape, form: Form, inputs: dict, x_var: int, name="action") -> int:
    """Record ``y = A(w) x`` for a bilinear form ``A`` with coefficients ``w``.

    Adjoint contributions to ``w`` are assembled from the derivative of the
    scalar ``ybar . A(w) x``.
    """
    coefs = list(inputs)
    a0, a1 = arguments(form)
    x_c = Coefficient(a1.space, label="x")
    y_c = Coefficient(a0.space, label="ybar")
    pairing = action(action(form, x_c), y_c)
    cache = _DerivativeCache(pairing)
    matrices = MatrixCache(form)

    def forward(*vals):
        A, _ = matrices.get(coefs, vals[:-1])
        return A @ vals[-1]

    def backward(bar, vals, active):
        A, AT = matrices.get(coefs, vals[:-1])
        bindings = dict(zip(coefs, vals[:-1]))
        bindings[x_c] = vals[-1]
        bindings[y_c] = bar
        out = []
        for c, on in zip(coefs, active[:-1]):
            out.append(assemble(cache.get(c), bindings).values if on else None)
        out.append(AT @ bar if active[-1] else None)
        return out

    return tape.record(name, forward, [inputs[c] for c in coefs] + [x_var], backward)

"""Limited-memory BFGS with Armijo backtracking and optional box projection."""

from __future__ import annotations

import math
import time
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from ..errors import LineSearchFailure, NumericalError
from ..field import as_values

ARMIJO_C1 = 1e-4
SHRINK = 0.5
MAX_BACKTRACKS = 30


class FunctionalAdapter:
    """Wrap plain ``fun(x)`` and ``grad(x)`` callables in the reduced-functional interface."""

    def __init__(self, fun: Callable, grad: Callable):
        self.fun = fun
        self.grad = grad

    def __call__(self, x) -> float:
        return float(self.fun(np.asarray(x, dtype=float)))

    def derivative(self, x) -> np.ndarray:
        return np.asarray(self.grad(np.asarray(x, dtype=float)), dtype=float)


@dataclass
class OptimizeResult:
    x: np.ndarray
    J: float
    gnorm: float
    iterations: int
    converged: bool
    message: str
    log: list = field(default_factory=list)
    evaluations: int = 0


def _two_loop(g, pairs, mask=None):
    q = g.copy()
    if mask is not None:
        q *= mask
        pairs = [(s * mask, y * mask) for s, y, _ in pairs]
        pairs = [(s, y, 1.0 / (s @ y)) for s, y in pairs if s @ y > 0]
        if not pairs:
            return -q
    alphas = []
    for s, y, rho in reversed(pairs):
        a = rho * (s @ q)
        alphas.append(a)
        q -= a * y
    s, y, _ = pairs[-1]
    q *= (s @ y) / (y @ y)
    for (s, y, rho), a in zip(pairs, reversed(alphas)):
        b = rho * (y @ q)
        q += (a - b) * s
    return -q


def minimize_lbfgs(rf, x0, memory: int = 10, max_iter: int = 100, gtol: float = 1e-5, bounds=None,
                   initial_step: float = 1.0, timing: bool = False, callback: Optional[Callable] = None
                   ) -> OptimizeResult:
    """Minimise ``rf`` from ``x0``.

    ``bounds`` is None or a ``(lower, upper)`` pair of scalars or arrays;
    iterates are projected onto the box and the curvature history is
    cleared whenever the set of active bounds changes.  The first step
    moves ``initial_step`` in the max norm along the steepest descent
    direction.  A trial point that raises a numerical error or gives a
    non-finite value counts as a failed trial.
    """
    x = np.array(as_values(x0), dtype=float)
    lo = hi = None
    if bounds is not None:
        lo = np.broadcast_to(np.asarray(bounds[0], dtype=float), x.shape)
        hi = np.broadcast_to(np.asarray(bounds[1], dtype=float), x.shape)
        x = np.clip(x, lo, hi)

    def project(z):
        return z if lo is None else np.clip(z, lo, hi)

    def active(z):
        if lo is None:
            return None
        return (z <= lo) | (z >= hi)

    def free(z, g):
        # variables held at a bound by the gradient are left out of the step
        if lo is None:
            return None
        return (~(((z <= lo) & (g > 0)) | ((z >= hi) & (g < 0)))).astype(float)

    def gnorm_of(z, g):
        if lo is None:
            return float(np.max(np.abs(g))) if g.size else 0.0
        return float(np.max(np.abs(project(z - g) - z))) if g.size else 0.0

    clock = time.perf_counter()
    evaluations = 1
    J = float(rf(x))
    if not math.isfinite(J):
        raise NumericalError(f"objective is {J} at the initial point")
    g = np.array(as_values(rf.derivative(x)), dtype=float)
    log = []

    def record(it, step):
        entry = {"iter": it, "J": J, "gnorm": gnorm_of(x, g), "step": step,
                 "wall_ms": round(1000 * (time.perf_counter() - clock), 3) if timing else None}
        log.append(entry)
        if callback is not None:
            callback(entry)

    record(0, 0.0)
    pairs = deque(maxlen=memory)
    act = active(x)
    it = 0
    message = "max_iter reached"
    converged = gnorm_of(x, g) <= gtol
    if converged:
        message = "gradient tolerance reached"
    while not converged and it < max_iter:
        mask = free(x, g)
        gf = g if mask is None else g * mask
        if pairs:
            p = _two_loop(g, list(pairs), mask)
        if not pairs or g @ p >= 0:
            pairs.clear()
            p = -gf / np.max(np.abs(gf)) * initial_step
        alpha = 1.0
        for _ in range(MAX_BACKTRACKS + 1):
            trial = project(x + alpha * p)
            evaluations += 1
            try:
                J_trial = float(rf(trial))
            except NumericalError:
                J_trial = math.inf
            if math.isfinite(J_trial) and J_trial <= J + ARMIJO_C1 * (g @ (trial - x)):
                break
            alpha *= SHRINK
        else:
            raise LineSearchFailure(f"no sufficient decrease after {MAX_BACKTRACKS} backtracks at iteration {it + 1}")
        g_new = np.array(as_values(rf.derivative(trial)), dtype=float)
        s, y = trial - x, g_new - g
        sy = s @ y
        if sy > 1e-12 * np.linalg.norm(s) * np.linalg.norm(y):
            pairs.append((s, y, 1.0 / sy))
        new_act = active(trial)
        if act is not None and not np.array_equal(act, new_act):
            pairs.clear()
        act = new_act
        x, J, g = trial, J_trial, g_new
        it += 1
        record(it, alpha)
        if gnorm_of(x, g) <= gtol:
            converged = True
            message = "gradient tolerance reached"
    return OptimizeResult(x, J, gnorm_of(x, g), it, converged, message, log, evaluations)

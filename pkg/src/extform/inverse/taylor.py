"""Taylor remainder test for reduced functionals."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from ..field import as_values


@dataclass
class TaylorResult:
    epsilons: list
    remainders: list
    rates: list

    def min_rate(self, last: Optional[int] = None) -> float:
        rates = self.rates if last is None else self.rates[-last:]
        return float(min(rates))


def default_epsilons(eps0: float = 1e-2, halvings: int = 4) -> list:
    return [eps0 / 2 ** k for k in range(halvings + 1)]


def taylor_test(rf, base, perturbation, epsilons: Optional[Sequence[float]] = None, gradient=None) -> TaylorResult:
    """Remainders ``|J(m + e dm) - J(m) - e <g, dm>|`` and their observed orders.

    ``gradient`` overrides the functional's own derivative, which is how a
    deliberately wrong gradient is tested.
    """
    eps = list(default_epsilons() if epsilons is None else epsilons)
    if any(b >= a for a, b in zip(eps, eps[1:])):
        raise ValueError("epsilon schedule must be strictly decreasing")
    base = np.array(as_values(base), dtype=float)
    dm = np.asarray(as_values(perturbation), dtype=float)
    J0 = rf(base)
    g = rf.derivative(base) if gradient is None else gradient
    slope = float(np.dot(as_values(g), dm))
    remainders = [abs(rf(base + e * dm) - J0 - e * slope) for e in eps]
    rf(base)
    rates = []
    for (e0, r0), (e1, r1) in zip(zip(eps, remainders), zip(eps[1:], remainders[1:])):
        if r0 == 0.0 or r1 == 0.0:
            rates.append(float("inf"))
        else:
            rates.append(float(np.log(r0 / r1) / np.log(e0 / e1)))
    return TaylorResult(eps, remainders, rates)

"""Quadrature rules on the reference interval [0, 1] and triangle."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

MAX_DEGREE = 4


@dataclass(frozen=True)
class QuadratureRule:
    points: np.ndarray  # (q, d)
    weights: np.ndarray  # (q,)
    degree: int


@lru_cache(maxsize=None)
def interval_rule(degree: int) -> QuadratureRule:
    """Gauss-Legendre rule exact for polynomials up to ``degree``."""
    npts = max(1, (degree + 2) // 2)
    x, w = np.polynomial.legendre.leggauss(npts)
    return QuadratureRule(((x + 1.0) / 2.0)[:, None], w / 2.0, 2 * npts - 1)


_A1 = 0.445948490915964886318329253883051
_W1 = 0.223381589678011465695007008433120
_A2 = 0.091576213509770743459571463402202
_W2 = 0.109951743655321867638326324900210


@lru_cache(maxsize=None)
def triangle_rule(degree: int) -> QuadratureRule:
    """Symmetric rules (1, 3 and 6 points) exact up to ``degree``."""
    if degree <= 1:
        return QuadratureRule(np.array([[1.0 / 3.0, 1.0 / 3.0]]), np.array([0.5]), 1)
    if degree == 2:
        pts = np.array([[1 / 6, 1 / 6], [2 / 3, 1 / 6], [1 / 6, 2 / 3]])
        return QuadratureRule(pts, np.full(3, 1.0 / 6.0), 2)
    if degree > MAX_DEGREE:
        raise ValueError(f"no triangle rule above degree {MAX_DEGREE}")
    pts = []
    wts = []
    for a, w in ((_A1, _W1), (_A2, _W2)):
        b = 1.0 - 2.0 * a
        pts += [[a, a], [b, a], [a, b]]
        wts += [w / 2.0] * 3
    return QuadratureRule(np.array(pts), np.array(wts), 4)


def make_rule(dim: int, degree: int) -> QuadratureRule:
    degree = min(max(degree, 1), MAX_DEGREE)
    return interval_rule(degree) if dim == 1 else triangle_rule(degree)


def p1_basis(points: np.ndarray) -> np.ndarray:
    """Reference P1 basis values at ``points``, shape (q, d + 1)."""
    return np.column_stack([1.0 - points.sum(axis=1), points])

"""Error norms against analytic functions."""

from __future__ import annotations

import numpy as np

from ..field import as_values
from .quadrature import MAX_DEGREE, make_rule, p1_basis


def l2_error(mesh, values, exact) -> float:
    """``||u_h - u||_L2`` with ``exact(x[, y])`` sampled at degree-4 quadrature points."""
    rule = make_rule(mesh.dim, MAX_DEGREE)
    phi = p1_basis(rule.points)  # (q, nloc)
    uh = as_values(values)[mesh.cells] @ phi.T  # (c, q)
    x = mesh.vertices[mesh.cells]  # (c, nloc, d)
    pts = np.einsum("qa,cad->cqd", phi, x)
    u = exact(*np.moveaxis(pts, -1, 0))
    err = (uh - u) ** 2 @ rule.weights
    return float(np.sqrt(np.sum(err * np.abs(mesh.detj))))

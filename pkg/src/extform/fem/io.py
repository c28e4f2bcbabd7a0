"""Plain-text field and matrix files."""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from ..field import FieldVector, as_values
from ..symbolic import mesh_of


def interpolate(f, space, mesh=None) -> FieldVector:
    """Nodal interpolant of ``f(x)`` (1D) or ``f(x, y)`` (2D), or of a constant."""
    mesh = mesh or mesh_of(space.domain)
    coords = mesh.vertices.T
    values = f(*coords) if callable(f) else f
    values = np.broadcast_to(np.asarray(values, dtype=float), (mesh.num_vertices,)).copy()
    return FieldVector(values, space)


def _header(dim):
    return ["x", "value"] if dim == 1 else ["x", "y", "value"]


def write_field_csv(path, mesh, values) -> None:
    """One row per dof in dof order; floats written with round-trip precision."""
    values = as_values(values)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(_header(mesh.dim))
        for coords, v in zip(mesh.vertices, values):
            w.writerow([repr(float(c)) for c in coords] + [repr(float(v))])


def read_field_csv(path, mesh=None) -> np.ndarray:
    """Read the value column; checks row count against ``mesh`` when given."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][-1] != "value":
        raise ValueError(f"{path}: not a field file")
    values = np.array([float(r[-1]) for r in rows[1:]])
    if mesh is not None:
        if rows[0] != _header(mesh.dim) or len(values) != mesh.num_vertices:
            raise ValueError(f"{path}: does not match the mesh")
    return values


def write_matrix_coo(path, A) -> None:
    """Debug dump as ``row col value`` lines in row-major order."""
    A = sp.csr_matrix(A)
    A.sort_indices()
    coo = A.tocoo()
    Path(path).write_text("".join(f"{i} {j} {v!r}\n" for i, j, v in zip(coo.row, coo.col, coo.data.tolist())))

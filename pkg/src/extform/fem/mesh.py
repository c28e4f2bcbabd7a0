"""Simplicial meshes of intervals and triangles with P1 dof maps."""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from ..symbolic import Domain, FunctionSpace, bind_mesh


@dataclass(frozen=True)
class DofMap:
    """P1 dof map: one dof per vertex."""

    cell_dofs: np.ndarray
    size: int


class Mesh:
    """Vertices (n, d) and cells (c, d + 1), d in {1, 2}."""

    def __init__(self, vertices, cells):
        vertices = np.asarray(vertices, dtype=float)
        if vertices.ndim == 1:
            vertices = vertices[:, None]
        cells = np.asarray(cells, dtype=np.int64)
        dim = vertices.shape[1]
        if dim not in (1, 2) or cells.ndim != 2 or cells.shape[1] != dim + 1:
            raise ValueError("expected interval or triangle cells")
        if cells.min() < 0 or cells.max() >= len(vertices):
            raise ValueError("cell vertex index out of range")
        self.vertices = vertices
        self.cells = cells
        self.dim = dim
        self.domain = Domain.new(dim)
        bind_mesh(self.domain, self)
        if np.any(self.cell_volumes <= 0.0):
            raise ValueError("mesh has degenerate or inverted cells")

    @property
    def num_vertices(self) -> int:
        return len(self.vertices)

    @property
    def num_cells(self) -> int:
        return len(self.cells)

    @cached_property
    def dofmap(self) -> DofMap:
        return DofMap(self.cells, self.num_vertices)

    @cached_property
    def jacobians(self) -> np.ndarray:
        """Affine map Jacobians, shape (c, d, d); column k is x_{k+1} - x_0."""
        x = self.vertices[self.cells]
        return np.transpose(x[:, 1:, :] - x[:, :1, :], (0, 2, 1))

    @cached_property
    def detj(self) -> np.ndarray:
        return np.linalg.det(self.jacobians)

    @cached_property
    def cell_volumes(self) -> np.ndarray:
        scale = 1.0 if self.dim == 1 else 0.5
        return scale * self.detj

    @cached_property
    def basis_gradients(self) -> np.ndarray:
        """Physical gradients of the P1 basis on each cell, shape (c, d + 1, d)."""
        ref = np.vstack([-np.ones((1, self.dim)), np.eye(self.dim)])
        inv = np.linalg.inv(self.jacobians)
        return np.einsum("ad,cdk->cak", ref, inv)

    @cached_property
    def h_min(self) -> float:
        x = self.vertices[self.cells]
        k = self.dim + 1
        lengths = [np.linalg.norm(x[:, i] - x[:, j], axis=1) for i in range(k) for j in range(i + 1, k)]
        return float(np.min(lengths))

    @cached_property
    def boundary_dofs(self) -> np.ndarray:
        """Vertices on the boundary (facets owned by one cell), sorted."""
        k = self.dim + 1
        facets = []
        for drop in range(k):
            keep = [i for i in range(k) if i != drop]
            facets.append(np.sort(self.cells[:, keep], axis=1))
        facets = np.vstack(facets)
        uniq, counts = np.unique(facets, axis=0, return_counts=True)
        return np.unique(uniq[counts == 1])

    @property
    def coordinates(self) -> np.ndarray:
        return self.vertices

    def function_space(self, family="Lagrange", degree=1) -> FunctionSpace:
        return FunctionSpace(self.domain, family, degree)

    def __repr__(self):
        return f"Mesh(dim={self.dim}, vertices={self.num_vertices}, cells={self.num_cells})"


def unit_interval_mesh(n: int) -> Mesh:
    if n < 1:
        raise ValueError("n must be >= 1")
    x = np.linspace(0.0, 1.0, n + 1)
    cells = np.column_stack([np.arange(n), np.arange(1, n + 1)])
    return Mesh(x, cells)


def unit_square_mesh(nx: int, ny: int) -> Mesh:
    """Uniform triangulation, each square split along its lower-left/upper-right diagonal."""
    if nx < 1 or ny < 1:
        raise ValueError("nx and ny must be >= 1")
    xs, ys = np.meshgrid(np.linspace(0.0, 1.0, nx + 1), np.linspace(0.0, 1.0, ny + 1))
    vertices = np.column_stack([xs.ravel(), ys.ravel()])
    i, j = np.meshgrid(np.arange(nx), np.arange(ny))
    i, j = i.ravel(), j.ravel()
    ll = j * (nx + 1) + i
    lr, ul = ll + 1, ll + nx + 1
    ur = ul + 1
    lower = np.column_stack([ll, lr, ur])
    upper = np.column_stack([ll, ur, ul])
    cells = np.stack([lower, upper], axis=1).reshape(-1, 3)
    return Mesh(vertices, cells)

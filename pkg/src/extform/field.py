"""Discrete field data attached to a function space."""

from dataclasses import dataclass
from typing import Any

import numpy as np


@dataclass(frozen=True, eq=False)
class FieldVector:
    """Nodal (degree-of-freedom) values of a function in ``space``."""

    values: np.ndarray
    space: Any = None

    def __post_init__(self):
        object.__setattr__(self, "values", np.asarray(self.values, dtype=float))

    def __array__(self, dtype=None, copy=None):
        if dtype is None:
            return self.values
        return self.values.astype(dtype)

    def __len__(self):
        return len(self.values)

    def __repr__(self):
        return f"FieldVector(n={len(self.values)})"


def as_values(data) -> np.ndarray:
    """Return a float array from a FieldVector, array or scalar."""
    if isinstance(data, FieldVector):
        return data.values
    return np.asarray(data, dtype=float)

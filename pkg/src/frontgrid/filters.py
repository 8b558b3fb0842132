"""Linear cone density filter and its transpose."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .mesh import Mesh, filter_neighborhoods


@dataclass(frozen=True, eq=False)
class FilterOperator:
    matrix: sp.csr_matrix   # rows sum to one
    radius: float

    @property
    def size(self) -> int:
        return self.matrix.shape[0]

    def apply(self, x: np.ndarray) -> np.ndarray:
        return self.matrix @ np.asarray(x, dtype=float)

    def adjoint_apply(self, g: np.ndarray) -> np.ndarray:
        return self.matrix.T @ np.asarray(g, dtype=float)


def build_filter(mesh: Mesh, radius: float = 1.5) -> FilterOperator:
    n = mesh.n_elements
    if radius <= 1.0:
        # only the element itself can lie inside; avoids normalising subnormal weights
        return FilterOperator(sp.identity(n, format="csr"), radius)
    rows, cols, w = filter_neighborhoods(mesh, radius)
    H = sp.csr_matrix((w, (rows, cols)), shape=(n, n))
    rowsum = np.asarray(H.sum(axis=1)).ravel()
    F = sp.diags(1.0 / rowsum) @ H
    return FilterOperator(sp.csr_matrix(F), radius)


def apply(F: FilterOperator, x: np.ndarray) -> np.ndarray:
    return F.apply(x)


def adjoint_apply(F: FilterOperator, g: np.ndarray) -> np.ndarray:
    return F.adjoint_apply(g)

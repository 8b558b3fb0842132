"""Jacobi-preconditioned conjugate gradients for the SPD systems of the solver."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla


class LinearSolveError(RuntimeError):
    pass


@dataclass
class CGInfo:
    iterations: int
    relres: float
    converged: bool


def pcg(A: sp.spmatrix, b: np.ndarray, tol: float = 1e-12, maxiter: int | None = None,
        x0: np.ndarray | None = None) -> tuple[np.ndarray, CGInfo]:
    """Solve ``A x = b`` for SPD ``A`` with a diagonal (Jacobi) preconditioner.

    Stops when ``||b - A x|| <= tol * ||b||``.
    """
    n = b.shape[0]
    maxiter = 10 * n if maxiter is None else maxiter
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return np.zeros(n), CGInfo(0, 0.0, True)
    dinv = 1.0 / A.diagonal()
    if x0 is None:
        x = np.zeros(n)
        r = b.copy()
    else:
        x = x0.copy()
        r = b - A @ x
    z = dinv * r
    p = z.copy()
    rz = r @ z
    target = tol * bnorm
    rnorm = np.linalg.norm(r)
    it = 0
    while rnorm > target and it < maxiter:
        Ap = A @ p
        alpha = rz / (p @ Ap)
        x += alpha * p
        r -= alpha * Ap
        it += 1
        rnorm = np.linalg.norm(r)
        z = dinv * r
        rz_new = r @ z
        p *= rz_new / rz
        p += z
        rz = rz_new
    return x, CGInfo(it, rnorm / bnorm, bool(rnorm <= target))


def solve_spd(A: sp.spmatrix, b: np.ndarray, method: str = "cg", tol: float = 1e-12,
              maxiter: int | None = None) -> tuple[np.ndarray, CGInfo]:
    if method == "cg":
        return pcg(A, b, tol=tol, maxiter=maxiter)
    if method == "direct":
        x = spla.spsolve(sp.csc_matrix(A), b)
        bnorm = np.linalg.norm(b)
        relres = float(np.linalg.norm(b - A @ x) / bnorm) if bnorm > 0 else 0.0
        return x, CGInfo(1, relres, True)
    raise ValueError(f"unknown linear solver {method!r}")

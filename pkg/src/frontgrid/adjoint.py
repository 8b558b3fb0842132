"""Adjoint gradients of busbar power and a finite-difference oracle."""
from __future__ import annotations

import numpy as np

from .filters import FilterOperator
from .linsolve import LinearSolveError, solve_spd
from .mesh import Mesh
from .physics import (CellParams, SolveOptions, SolveResult, _System, element_matrix, newton_solve,
                      sheet_conductance_derivative)


def adjoint_rhs(system: _System) -> np.ndarray:
    """dP/dV on free nodes: ``-v_bus * sum_d G[d, f]`` (the diode lumping is diagonal)."""
    mesh = system.mesh
    col = np.asarray(system.G[mesh.dirichlet].sum(axis=0)).ravel()
    return -system.params.v_bus * col[system.free]


def adjoint_solve(mesh: Mesh, xt: np.ndarray, result: SolveResult, params: CellParams,
                  opts: SolveOptions | None = None, system: _System | None = None) -> np.ndarray:
    """Adjoint vector on the free nodes, ``J^T lam = dP/dV``.

    J is symmetric so the forward linear-solve path is reused.
    """
    if not result.converged:
        raise ValueError("adjoint_solve needs a converged state")
    opts = opts or SolveOptions()
    system = system or _System(mesh, xt, params)
    Wf = result.V[system.free] - params.v_bus
    J = system.jacobian(Wf)
    g = adjoint_rhs(system)
    lam, info = solve_spd(J, g, opts.linear_solver, opts.linear_tol,
                          opts.linear_max_iter or 10 * max(system.free.size, 1))
    if not info.converged:
        raise LinearSolveError(
            f"adjoint solve stopped at relative residual {info.relres:.3e} after {info.iterations} iterations")
    return lam


def total_gradient(mesh: Mesh, xt: np.ndarray, result: SolveResult, lam: np.ndarray,
                   params: CellParams) -> np.ndarray:
    """dP/dx~ per active element.

    With multipliers ``mu = -v_bus`` on busbar nodes and ``-lam`` on free nodes,
    ``dP/dx~_e = mu_e . dR_e/dx~_e`` where the element residual derivative is
    ``sigma'(x~_e) K V_e + (area_e / 4) j_L``.
    """
    mu = np.zeros(mesh.n_nodes)
    mu[mesh.dirichlet] = -params.v_bus
    mu[mesh.free] = -lam
    K = element_matrix(mesh.grid.hx, mesh.grid.hy)
    W = result.V - params.v_bus
    We = W[mesh.conn]
    mue = mu[mesh.conn]
    cond = sheet_conductance_derivative(xt, params) * np.einsum("ei,ij,ej->e", mue, K, We)
    shade = mesh.area / 4.0 * params.j_L * mue.sum(axis=1)
    return cond + shade


def power_and_gradient(mesh: Mesh, xt: np.ndarray, params: CellParams,
                       opts: SolveOptions | None = None) -> tuple[SolveResult, np.ndarray | None]:
    """Solve and, when converged, return dP/dx~ as well."""
    opts = opts or SolveOptions()
    system = _System(mesh, xt, params)
    res = newton_solve(mesh, xt, params, opts, system)
    if not res.converged:
        return res, None
    lam = adjoint_solve(mesh, xt, res, params, opts, system)
    return res, total_gradient(mesh, system.xt, res, lam, params)


class OracleError(RuntimeError):
    pass


def fd_gradient_oracle(mesh: Mesh, x: np.ndarray, params: CellParams, elements, h: float = 1e-6,
                       filt: FilterOperator | None = None, opts: SolveOptions | None = None) -> np.ndarray:
    """Central differences of P w.r.t. raw densities (through the filter when given)."""
    opts = opts or SolveOptions(newton_tol=1e-12)
    x = np.asarray(x, dtype=float)

    def P(xv):
        xt = filt.apply(xv) if filt is not None else xv
        r = newton_solve(mesh, xt, params, opts)
        if not r.converged:
            raise OracleError(f"probe solve did not converge (residual {r.final_residual:.3e})")
        return r.power

    out = []
    for e in elements:
        xp = x.copy()
        xm = x.copy()
        xp[e] += h
        xm[e] -= h
        out.append((P(xp) - P(xm)) / (2 * h))
    return np.array(out)

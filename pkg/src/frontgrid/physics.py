"""Front-surface conduction with a distributed diode source.

Unknowns are nodal voltages; the busbar nodes are held at ``v_bus`` and the
remaining nodes satisfy ``G(x) V = I(V, x)``.  Internally the solver works with
the offset ``W = V - v_bus`` so that the conductance product does not cancel
large equal voltages.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp

from .linsolve import LinearSolveError, solve_spd
from .mesh import ConfigError, Mesh

log = logging.getLogger(__name__)


def calibrate_v_thermal(v_bus: float, j_0: float, target: float, j_L: float | None = None) -> float:
    """Exponent scale such that the diode current density at ``v_bus`` equals ``target``."""
    if j_L is not None and target >= j_L:
        raise ConfigError(f"diode target {target} A/m^2 must be below j_L = {j_L} A/m^2")
    if target <= 0 or j_0 <= 0:
        raise ConfigError("diode calibration needs positive target and j_0")
    return v_bus / math.log(target / j_0 + 1.0)


@dataclass(frozen=True)
class CellParams:
    sigma_metal: float = 100.0      # S per square
    sigma_min: float = 0.02
    j_L: float = 310.0              # A/m^2
    j_0: float = 0.06               # magnitude, A/m^2
    v_bus: float = 0.5
    temperature: float = 320.0
    p_in: float = 1000.0            # W/m^2
    v_thermal: float | None = None  # None: calibrate to diode_target at v_bus
    diode_target: float = 40.0
    simp_power: float = 3.0
    exp_clamp: float = 40.0

    def __post_init__(self):
        if not self.sigma_metal > self.sigma_min > 0:
            raise ConfigError("physics: need sigma_metal > sigma_min > 0")
        if not self.j_L > 0:
            raise ConfigError("physics: j_L must be positive")
        if self.j_0 < 0:
            raise ConfigError("physics: j_0 magnitude must be >= 0")
        if not self.v_bus > 0:
            raise ConfigError("physics: v_bus must be positive")
        if not (self.p_in > 0 and self.temperature > 0 and self.simp_power >= 1):
            raise ConfigError("physics: p_in, temperature must be positive, simp_power >= 1")
        if self.v_thermal is None and self.j_0 == 0:
            # no dark current: the exponent scale is irrelevant, use k_B T / q
            object.__setattr__(self, "v_thermal", 8.617333262e-5 * self.temperature)
        elif self.v_thermal is None:
            vt = calibrate_v_thermal(self.v_bus, self.j_0, self.diode_target, self.j_L)
            object.__setattr__(self, "v_thermal", vt)
        elif not self.v_thermal > 0:
            raise ConfigError("physics: v_thermal must be positive")


@dataclass(frozen=True)
class SolveOptions:
    newton_tol: float = 1e-10
    newton_max_iter: int = 50
    linear_tol: float = 1e-12
    linear_max_iter: int | None = None   # None: 10 * n_free
    damping: str = "backtracking"
    max_halvings: int = 20
    linear_solver: str = "cg"

    def __post_init__(self):
        if not (self.newton_tol > 0 and self.linear_tol > 0):
            raise ConfigError("solver tolerances must be positive")
        if self.damping not in ("none", "backtracking"):
            raise ConfigError(f"unknown damping {self.damping!r}")
        if self.linear_solver not in ("cg", "direct"):
            raise ConfigError(f"unknown linear solver {self.linear_solver!r}")


@dataclass
class SolveResult:
    V: np.ndarray
    busbar_current: float
    power: float
    efficiency: float
    newton_iters: int
    final_residual: float
    converged: bool
    initial_residual: float = 0.0
    residual_history: list = field(default_factory=list)
    linear_iters: int = 0


# ---------------------------------------------------------------- materials

def sheet_conductance(xt, params: CellParams):
    xt = np.asarray(xt, dtype=float)
    return params.sigma_min + xt ** params.simp_power * (params.sigma_metal - params.sigma_min)


def sheet_conductance_derivative(xt, params: CellParams):
    xt = np.asarray(xt, dtype=float)
    p = params.simp_power
    return p * xt ** (p - 1.0) * (params.sigma_metal - params.sigma_min)


def generation_density(xt, params: CellParams):
    """Photo-generated current density; metal shades linearly."""
    return params.j_L * (1.0 - np.asarray(xt, dtype=float))


def diode_density(V, params: CellParams):
    arg = np.minimum(np.asarray(V, dtype=float) / params.v_thermal, params.exp_clamp)
    return params.j_0 * np.expm1(arg)


def diode_slope(V, params: CellParams):
    arg = np.minimum(np.asarray(V, dtype=float) / params.v_thermal, params.exp_clamp)
    return params.j_0 / params.v_thermal * np.exp(arg)


# ---------------------------------------------------------------- assembly

def element_matrix(hx: float, hy: float) -> np.ndarray:
    """Bilinear quad Laplace matrix for unit sheet conductance.

    Node order: (0,0), (1,0), (1,1), (0,1).
    """
    kx = np.array([[2, -2, -1, 1], [-2, 2, 1, -1], [-1, 1, 2, -2], [1, -1, -2, 2]], float)
    ky = np.array([[2, 1, -1, -2], [1, 2, -2, -1], [-1, -2, 2, 1], [-2, -1, 1, 2]], float)
    return (hy / hx) / 6.0 * kx + (hx / hy) / 6.0 * ky


def nodal_area(mesh: Mesh) -> np.ndarray:
    """Lumped area per node (a quarter of each adjacent element)."""
    return np.bincount(mesh.conn.ravel(), np.repeat(mesh.area / 4.0, 4), minlength=mesh.n_nodes)


def assemble_conductance(mesh: Mesh, xt: np.ndarray, params: CellParams) -> sp.csr_matrix:
    """Global conductance matrix on all grid nodes (rows of unused nodes are empty)."""
    K = element_matrix(mesh.grid.hx, mesh.grid.hy)
    sig = sheet_conductance(xt, params)
    rows = np.repeat(mesh.conn, 4, axis=1).ravel()
    cols = np.tile(mesh.conn, (1, 4)).ravel()
    data = (sig[:, None] * K.ravel()[None, :]).ravel()
    n = mesh.n_nodes
    return sp.csr_matrix((data, (rows, cols)), shape=(n, n))


def conductance_apply(mesh: Mesh, xt: np.ndarray, V: np.ndarray, params: CellParams) -> np.ndarray:
    """Matrix-free ``G V`` by element loop in fixed order."""
    K = element_matrix(mesh.grid.hx, mesh.grid.hy)
    sig = sheet_conductance(xt, params)
    Ve = V[mesh.conn]
    KV = sig[:, None] * (Ve @ K)
    return np.bincount(mesh.conn.ravel(), KV.ravel(), minlength=mesh.n_nodes)


def source_current(mesh: Mesh, xt: np.ndarray, V: np.ndarray, params: CellParams) -> np.ndarray:
    """Nodal current injection: each element gives ``area/4 * (j_gen - j_D(V_node))`` to its 4 nodes."""
    jg = generation_density(xt, params)
    jd = diode_density(V, params)
    contrib = (mesh.area / 4.0)[:, None] * (jg[:, None] - jd[mesh.conn])
    return np.bincount(mesh.conn.ravel(), contrib.ravel(), minlength=mesh.n_nodes)


# ---------------------------------------------------------------- solver

class _System:
    """Cached pieces of the free-node system for one density field."""

    def __init__(self, mesh: Mesh, xt: np.ndarray, params: CellParams):
        if not mesh.has_busbar:
            raise ConfigError("mesh has no busbar (Dirichlet) nodes")
        xt = np.asarray(xt, dtype=float)
        if xt.shape != (mesh.n_elements,):
            raise ConfigError(f"density has {xt.shape} values, mesh has {mesh.n_elements} active elements")
        self.mesh, self.xt, self.params = mesh, xt, params
        self.G = assemble_conductance(mesh, xt, params)
        self.free = mesh.free
        self.Gff = self.G[self.free][:, self.free].tocsr()
        self.area_n = nodal_area(mesh)

    def voltage(self, Wf: np.ndarray) -> np.ndarray:
        V = np.full(self.mesh.n_nodes, self.params.v_bus)
        V[self.free] += Wf
        return V

    def residual(self, Wf: np.ndarray) -> np.ndarray:
        """Free-node residual ``(G V - I(V))_f``; Dirichlet offsets are zero so G_fd drops out."""
        I = source_current(self.mesh, self.xt, self.voltage(Wf), self.params)
        return self.Gff @ Wf - I[self.free]

    def roundoff_floor(self, Wf: np.ndarray) -> float:
        """Residual norm attainable in floating point at state ``Wf``."""
        f = self.free
        V = self.voltage(Wf)
        mag = abs(self.Gff) @ np.abs(Wf) + self.area_n[f] * (
            self.params.j_L + np.abs(diode_density(V[f], self.params)))
        return 64.0 * np.finfo(float).eps * float(np.linalg.norm(mag))

    def jacobian(self, Wf: np.ndarray) -> sp.csr_matrix:
        f = self.free
        d = self.area_n[f] * diode_slope(self.params.v_bus + Wf, self.params)
        return (self.Gff + sp.diags(d)).tocsr()


def busbar_current(mesh: Mesh, xt: np.ndarray, V: np.ndarray, params: CellParams) -> float:
    """Current delivered into the busbar, ``sum over busbar nodes of (I(V) - G V)``."""
    W = V - params.v_bus
    GW = conductance_apply(mesh, xt, W, params)
    I = source_current(mesh, xt, V, params)
    d = mesh.dirichlet
    return float(np.sum(I[d] - GW[d]))


def output_power(params: CellParams, i_bus: float) -> float:
    return params.v_bus * i_bus


def efficiency(params: CellParams, mesh_or_area, p_out: float) -> float:
    """Percent efficiency for cell area taken from a mesh or given in m^2."""
    area = mesh_or_area.cell_area if isinstance(mesh_or_area, Mesh) else float(mesh_or_area)
    return 100.0 * p_out / (area * params.p_in)


def ideal_cell_oracle(params: CellParams, target: float | None = None) -> tuple[float, float]:
    """Zero-resistance lumped cell: (efficiency ceiling %, v_thermal).

    With ``target`` given, v_thermal is recalibrated so the diode current
    density at ``v_bus`` equals it; otherwise ``params.v_thermal`` is used.
    """
    vt = params.v_thermal if target is None else calibrate_v_thermal(params.v_bus, params.j_0, target, params.j_L)
    jd = params.j_0 * math.expm1(params.v_bus / vt)
    eta = 100.0 * params.v_bus * (params.j_L - jd) / params.p_in
    return eta, vt


def newton_solve(mesh: Mesh, xt: np.ndarray, params: CellParams,
                 opts: SolveOptions | None = None, system: _System | None = None) -> SolveResult:
    """Damped Newton on the free nodes starting from ``V = v_bus``.

    Never raises on non-convergence; the result carries ``converged=False``.
    """
    opts = opts or SolveOptions()
    sys_ = system or _System(mesh, xt, params)
    nf = sys_.free.size
    lin_max = opts.linear_max_iter or 10 * max(nf, 1)
    Wf = np.zeros(nf)
    R = sys_.residual(Wf)
    r0 = rk = float(np.linalg.norm(R))
    history = [r0]
    it = 0
    lin_total = 0
    floor = sys_.roundoff_floor(Wf)
    converged = rk <= max(opts.newton_tol * r0, floor)
    while not converged and it < opts.newton_max_iter:
        J = sys_.jacobian(Wf)
        try:
            step, info = solve_spd(J, -R, opts.linear_solver, opts.linear_tol, lin_max)
        except Exception as exc:  # singular factorisation etc.
            log.warning("linear solve failed at Newton iteration %d: %s", it, exc)
            break
        lin_total += info.iterations
        if not info.converged:
            log.warning("CG stopped at relres %.3e after %d iterations", info.relres, info.iterations)
        t = 1.0
        trial = Wf + step
        Rt = sys_.residual(trial)
        rt = float(np.linalg.norm(Rt))
        if opts.damping == "backtracking":
            halvings = 0
            while not rt < rk and halvings < opts.max_halvings:
                t *= 0.5
                trial = Wf + t * step
                Rt = sys_.residual(trial)
                rt = float(np.linalg.norm(Rt))
                halvings += 1
        it += 1
        if not np.isfinite(rt):
            break
        Wf, R, rk = trial, Rt, rt
        history.append(rk)
        floor = sys_.roundoff_floor(Wf)
        converged = rk <= max(opts.newton_tol * r0, floor)
        if not converged and t < 0.5 ** opts.max_halvings * 1.0001:
            log.warning("line search stalled at residual %.3e", rk)
            break
    V = sys_.voltage(Wf)
    i_bus = busbar_current(mesh, sys_.xt, V, params)
    p = output_power(params, i_bus)
    if len(history) >= 3:
        log.debug("Newton residual tail %s", history[-3:])
    return SolveResult(V=V, busbar_current=i_bus, power=p, efficiency=efficiency(params, mesh, p),
                       newton_iters=it, final_residual=rk, converged=bool(converged),
                       initial_residual=r0, residual_history=history, linear_iters=lin_total)


def power(mesh: Mesh, xt: np.ndarray, params: CellParams, opts: SolveOptions | None = None) -> float:
    return newton_solve(mesh, xt, params, opts).power

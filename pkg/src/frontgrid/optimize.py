"""Direct density optimisation and CNN reparameterisation, both driven by Adam."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from . import cnn
from .adjoint import power_and_gradient
from .filters import FilterOperator, build_filter
from .mesh import ConfigError, Mesh
from .physics import CellParams, SolveOptions, ideal_cell_oracle, newton_solve

log = logging.getLogger(__name__)

PIPELINES = ("direct", "solarnet")
DEFAULT_LR = {"direct": 0.05, "solarnet": 0.001}


@dataclass
class AdamState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def copy(self) -> "AdamState":
        return replace(self, m={k: a.copy() for k, a in self.m.items()},
                       v={k: a.copy() for k, a in self.v.items()})


def adam_step(state: AdamState, params: dict, grads: dict) -> dict:
    """One bias-corrected Adam update; returns new parameter arrays and advances ``state``."""
    for k, g in grads.items():
        if np.shape(g) != np.shape(params[k]):
            raise ValueError(f"gradient block {k!r} has shape {np.shape(g)}, parameter {np.shape(params[k])}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in parameter block {k!r}")
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    out = {}
    for k, p in params.items():
        g = grads[k]
        m = state.m.get(k, np.zeros_like(p))
        v = state.v.get(k, np.zeros_like(p))
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * (g * g)
        state.m[k], state.v[k] = m, v
        out[k] = p - state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return out


@dataclass
class RunConfig:
    pipeline: str = "direct"
    max_iters: int = 500
    lr: float | None = None
    seed: int = 0
    p_ref: float | None = None          # None: power of the uniform x = 0.5 design
    snapshot_every: int = 0
    simp_continuation: bool = False
    filter_cnn_output: bool = True

    def __post_init__(self):
        if self.pipeline not in PIPELINES:
            raise ConfigError(f"run.pipeline must be one of {PIPELINES}")
        if self.max_iters < 1:
            raise ConfigError("run.max_iters must be >= 1")
        if self.lr is not None and not self.lr > 0:
            raise ConfigError("run.lr must be positive")
        if self.p_ref is not None and not self.p_ref > 0:
            raise ConfigError("run.p_ref must be positive")

    @property
    def learning_rate(self) -> float:
        return self.lr if self.lr is not None else DEFAULT_LR[self.pipeline]


@dataclass
class IterationLog:
    iteration: int
    power_w: float
    efficiency_pct: float
    loss: float
    grad_norm: float
    newton_iters: int
    wall_s: float


@dataclass
class Problem:
    """Mesh, physics, filter and solver options shared by both pipelines."""
    mesh: Mesh
    params: CellParams
    filt: FilterOperator
    opts: SolveOptions = field(default_factory=SolveOptions)

    @classmethod
    def build(cls, mesh: Mesh, params: CellParams, radius: float = 1.5,
              opts: SolveOptions | None = None) -> "Problem":
        return cls(mesh, params, build_filter(mesh, radius), opts or SolveOptions())


def reference_power(problem: Problem) -> float:
    """Power of the uniform 0.5 design; falls back to the ideal-cell power if that is not positive."""
    x = np.full(problem.mesh.n_elements, 0.5)
    res = newton_solve(problem.mesh, problem.filt.apply(x), problem.params, problem.opts)
    if res.converged and res.power > 0:
        return res.power
    eta, _ = ideal_cell_oracle(problem.params)
    return eta / 100.0 * problem.mesh.cell_area * problem.params.p_in


def loss_eval(mesh: Mesh, xt: np.ndarray, params: CellParams, p_ref: float,
              opts: SolveOptions | None = None):
    """Normalised negative power and its gradient w.r.t. the filtered density.

    Returns ``(loss, grad, solve_result)``; ``grad`` is None when the solve failed.
    """
    res, g = power_and_gradient(mesh, xt, params, opts)
    if g is None:
        return float("nan"), None, res
    return -res.power / p_ref, -g / p_ref, res


@dataclass
class RunState:
    """Everything needed to continue a run bit-for-bit."""
    pipeline: str
    iteration: int                     # next iteration to evaluate
    params: dict
    adam: AdamState
    p_ref: float
    best_efficiency: float = -np.inf
    best_iteration: int = -1
    best_params: dict | None = None
    failures: int = 0


@dataclass
class RunResult:
    density: np.ndarray                # best filtered density
    raw_density: np.ndarray
    efficiency: float
    power: float
    iteration: int
    logs: list
    state: RunState
    cnn_params: dict | None = None


def simp_power_at(cfg: RunConfig, base: float, it: int) -> float:
    if not cfg.simp_continuation:
        return base
    ramp = max(1.0, 0.4 * cfg.max_iters)
    return 1.0 + (base - 1.0) * min(1.0, it / ramp)


class Pipeline:
    """Maps optimisation variables to raw densities and gradients back."""

    def __init__(self, problem: Problem, cfg: RunConfig, arch: cnn.CnnArch | None = None):
        self.problem, self.cfg, self.arch = problem, cfg, arch
        mesh = problem.mesh
        if cfg.pipeline == "solarnet":
            if arch is None:
                raise ConfigError("solarnet pipeline needs a CNN architecture")
            if tuple(arch.out_shape) != (mesh.grid.ny, mesh.grid.nx):
                raise ConfigError(f"CNN output {arch.out_shape} does not match grid ({mesh.grid.ny}, {mesh.grid.nx})")

    def init_params(self) -> dict:
        if self.cfg.pipeline == "direct":
            return {"logits": np.zeros(self.problem.mesh.n_elements)}
        return cnn.init_params(self.arch, self.cfg.seed)

    def uses_filter(self) -> bool:
        return self.cfg.pipeline == "direct" or self.cfg.filter_cnn_output

    def densities(self, theta: dict):
        """Raw and filtered densities plus whatever the backward pass needs."""
        mesh = self.problem.mesh
        if self.cfg.pipeline == "direct":
            x = cnn.sigmoid(theta["logits"])
            tape = x
        else:
            img, tape = cnn.forward(self.arch, theta)
            x = mesh.from_image(img)
        xt = self.problem.filt.apply(x) if self.uses_filter() else x.copy()
        np.clip(xt, 0.0, 1.0, out=xt)
        return x, xt, tape

    def pullback(self, theta: dict, tape, g_xt: np.ndarray) -> dict:
        g_x = self.problem.filt.adjoint_apply(g_xt) if self.uses_filter() else g_xt
        if self.cfg.pipeline == "direct":
            return {"logits": g_x * tape * (1.0 - tape)}
        img_grad = self.problem.mesh.to_image(g_x, fill=0.0)
        return cnn.backward(self.arch, theta, tape, img_grad)


def start_state(pipe: Pipeline, p_ref: float | None = None) -> RunState:
    cfg = pipe.cfg
    if p_ref is None:
        p_ref = cfg.p_ref if cfg.p_ref is not None else reference_power(pipe.problem)
    return RunState(cfg.pipeline, 0, pipe.init_params(), AdamState(lr=cfg.learning_rate), p_ref)


def run_loop(pipe: Pipeline, state: RunState, until: int | None = None,
             on_iter: Callable[[IterationLog, RunState, np.ndarray], None] | None = None) -> list:
    """Advance ``state`` up to iteration ``until`` (exclusive, default max_iters)."""
    cfg, problem = pipe.cfg, pipe.problem
    until = cfg.max_iters if until is None else min(until, cfg.max_iters)
    logs = []
    while state.iteration < until:
        t0 = time.perf_counter()
        k = state.iteration
        params = problem.params
        p_simp = simp_power_at(cfg, params.simp_power, k)
        if p_simp != params.simp_power:
            params = replace(params, simp_power=p_simp)
        x, xt, tape = pipe.densities(state.params)
        loss, g_xt, res = loss_eval(problem.mesh, xt, params, state.p_ref, problem.opts)
        if g_xt is None:
            # keep the previous iterate, retry with a smaller step
            state.failures += 1
            state.adam.lr *= 0.5
            log.warning("iteration %d: Newton did not converge (residual %.3e); lr -> %.3g",
                        k, res.final_residual, state.adam.lr)
            row = IterationLog(k, float("nan"), float("nan"), float("nan"), float("nan"),
                               res.newton_iters, time.perf_counter() - t0)
            state.iteration += 1
            logs.append(row)
            if on_iter:
                on_iter(row, state, xt)
            if state.failures > 10:
                raise RuntimeError("too many failed physics solves")
            continue
        grads = pipe.pullback(state.params, tape, g_xt)
        gnorm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
        if res.efficiency > state.best_efficiency:
            state.best_efficiency = res.efficiency
            state.best_iteration = k
            state.best_params = {n: a.copy() for n, a in state.params.items()}
        state.params = adam_step(state.adam, state.params, grads)
        state.iteration += 1
        row = IterationLog(k, res.power, res.efficiency, loss, gnorm, res.newton_iters,
                           time.perf_counter() - t0)
        logs.append(row)
        log.info("iter %4d  P=%.6e W  eta=%.4f%%  loss=%.6f  |g|=%.3e  newton=%d",
                 k, res.power, res.efficiency, loss, gnorm, res.newton_iters)
        if on_iter:
            on_iter(row, state, xt)
    return logs


def finish(pipe: Pipeline, state: RunState, logs: list) -> RunResult:
    """Re-evaluate the best iterate."""
    theta = state.best_params if state.best_params is not None else state.params
    x, xt, _ = pipe.densities(theta)
    res = newton_solve(pipe.problem.mesh, xt, pipe.problem.params, pipe.problem.opts)
    return RunResult(density=xt, raw_density=x, efficiency=res.efficiency, power=res.power,
                     iteration=state.best_iteration, logs=logs, state=state,
                     cnn_params=theta if state.pipeline == "solarnet" else None)


def run_direct(problem: Problem, cfg: RunConfig, on_iter=None) -> RunResult:
    """Per-element logits through a sigmoid and the density filter, updated by Adam from x = 0.5."""
    if cfg.pipeline != "direct":
        cfg = replace(cfg, pipeline="direct")
    pipe = Pipeline(problem, cfg)
    state = start_state(pipe)
    logs = run_loop(pipe, state, on_iter=on_iter)
    return finish(pipe, state, logs)


def run_solarnet(problem: Problem, arch: cnn.CnnArch, cfg: RunConfig, on_iter=None) -> RunResult:
    """Optimise CNN weights whose output image is the raw density field."""
    if cfg.pipeline != "solarnet":
        cfg = replace(cfg, pipeline="solarnet")
    pipe = Pipeline(problem, cfg, arch)
    state = start_state(pipe)
    logs = run_loop(pipe, state, on_iter=on_iter)
    return finish(pipe, state, logs)


def default_arch(ny: int, nx: int, **kw) -> cnn.CnnArch:
    """Default architecture for a grid, using as many of the three x2 upsamplings as divide it."""
    n_up = 3
    while n_up > 0 and (ny % 2 ** n_up or nx % 2 ** n_up):
        n_up -= 1
    ups = tuple(i < n_up for i in range(cnn.N_CONV))
    return cnn.CnnArch(out_shape=(ny, nx), upsample_after=ups, **kw)


@dataclass
class ComparisonRow:
    name: str
    direct: float
    solarnet: float
    direct_seeds: list
    solarnet_seeds: list

    @property
    def delta(self) -> float:
        return self.solarnet - self.direct


def compare_pipelines(problems: dict, cfg: RunConfig, seeds, arch_factory=None,
                      on_run=None) -> list:
    """Best-of-seeds efficiency of both pipelines per named problem, same iteration budget."""
    rows = []
    for name, problem in problems.items():
        g = problem.mesh.grid
        arch = (arch_factory or default_arch)(g.ny, g.nx)
        d_eff, s_eff = [], []
        for seed in seeds:
            rd = run_direct(problem, replace(cfg, pipeline="direct", seed=seed, lr=None))
            rs = run_solarnet(problem, arch, replace(cfg, pipeline="solarnet", seed=seed, lr=None))
            d_eff.append(rd.efficiency)
            s_eff.append(rs.efficiency)
            if on_run:
                on_run(name, seed, rd, rs)
        rows.append(ComparisonRow(name, max(d_eff), max(s_eff), d_eff, s_eff))
    return rows

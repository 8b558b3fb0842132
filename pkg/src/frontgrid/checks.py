"""Gradient verification suites shared by the `gradcheck` command and the tests."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import cnn
from .adjoint import fd_gradient_oracle, power_and_gradient
from .optimize import Problem
from .physics import SolveOptions

TOY_ARCH = cnn.CnnArch(out_shape=(8, 8), latent_size=6, channels=(3, 3, 2, 2, 1),
                       upsample_after=(True, True, False, False, False))


@dataclass
class CheckResult:
    name: str
    passed: bool
    worst: float          # max |a - f| / (atol + rtol |f|); <= 1 passes
    count: int

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'}  {self.name:<40s} worst={self.worst:.3e}  n={self.count}"


def _ratio(a, f, atol, rtol) -> float:
    a, f = np.asarray(a, float), np.asarray(f, float)
    return float(np.max(np.abs(a - f) / (atol + rtol * np.abs(f))))


def adjoint_check(problem: Problem, n_elements: int = 20, h: float = 1e-6, seed: int = 0,
                  atol: float = 1e-6, rtol: float = 1e-4) -> CheckResult:
    """Adjoint gradient w.r.t. raw densities (through the filter) against central differences."""
    rng = np.random.default_rng(seed)
    mesh, params, filt = problem.mesh, problem.params, problem.filt
    tight = SolveOptions(newton_tol=1e-12, linear_solver=problem.opts.linear_solver)
    x = rng.uniform(0.05, 0.95, mesh.n_elements)
    res, g = power_and_gradient(mesh, filt.apply(x), params, tight)
    if g is None:
        return CheckResult(f"adjoint {mesh.grid.nx}x{mesh.grid.ny}", False, np.inf, 0)
    graw = filt.adjoint_apply(g)
    els = rng.choice(mesh.n_elements, min(n_elements, mesh.n_elements), replace=False)
    fd = fd_gradient_oracle(mesh, x, params, els, h, filt, tight)
    worst = _ratio(graw[els], fd, atol, rtol)
    return CheckResult(f"adjoint vs FD {mesh.grid.nx}x{mesh.grid.ny}", worst <= 1.0, worst, len(els))


def _central(fun, x, idx, h=1e-6):
    x = x.copy()
    x0 = x[idx]
    x[idx] = x0 + h
    fp = fun(x)
    x[idx] = x0 - h
    fm = fun(x)
    return (fp - fm) / (2 * h)


def cnn_network_check(arch: cnn.CnnArch = TOY_ARCH, n_params: int = 50, seed: int = 0,
                      atol: float = 1e-5, rtol: float = 1e-3) -> CheckResult:
    """End-to-end parameter gradients of <forward(theta), G> against central differences."""
    rng = np.random.default_rng(seed)
    p = cnn.init_params(arch, seed)
    G = rng.standard_normal(arch.out_shape)
    img, tape = cnn.forward(arch, p)
    grads = cnn.backward(arch, p, tape, G)
    names = list(p)
    a, f = [], []
    for t in range(n_params):
        k = names[t % len(names)]
        idx = tuple(int(rng.integers(0, s)) for s in p[k].shape)

        def obj(v, k=k):
            q = dict(p)
            q[k] = v
            return float(np.sum(cnn.forward(arch, q)[0] * G))
        a.append(grads[k][idx])
        f.append(_central(obj, p[k], idx))
    worst = _ratio(a, f, atol, rtol)
    return CheckResult("CNN end-to-end vs FD", worst <= 1.0, worst, n_params)


def layer_checks(seed: int = 0, atol: float = 1e-6, rtol: float = 1e-4) -> list[CheckResult]:
    """Isolated FD checks of convolution, normalisation and the upsampling transpose."""
    rng = np.random.default_rng(seed)
    out = []

    x = rng.standard_normal((2, 6, 6))
    w = rng.standard_normal((3, 2, 5, 5))
    b = rng.standard_normal(3)
    G = rng.standard_normal((3, 6, 6))
    gx, gw, gb = cnn.conv2d_backward(x, w, G)
    a, f = [], []
    for _ in range(20):
        i = tuple(int(rng.integers(0, s)) for s in x.shape)
        a.append(gx[i]); f.append(_central(lambda v: np.sum(cnn.conv2d_forward(v, w, b) * G), x, i))
        k = tuple(int(rng.integers(0, s)) for s in w.shape)
        a.append(gw[k]); f.append(_central(lambda v: np.sum(cnn.conv2d_forward(x, v, b) * G), w, k))
    for o in range(3):
        a.append(gb[o]); f.append(_central(lambda v: np.sum(cnn.conv2d_forward(x, w, v) * G), b, o))
    worst = _ratio(a, f, atol, rtol)
    out.append(CheckResult("conv2d backward vs FD", worst <= 1.0, worst, len(a)))

    x = rng.standard_normal((3, 4, 4))
    gam, bet = rng.standard_normal(3), rng.standard_normal(3)
    G = rng.standard_normal((3, 4, 4))
    _, cache = cnn.channelnorm_forward(x, gam, bet)
    gx, gg, gb = cnn.channelnorm_backward(cache, gam, G)
    fn = lambda xx, g_, b_: np.sum(cnn.channelnorm_forward(xx, g_, b_)[0] * G)
    a, f = [], []
    for i in np.ndindex(x.shape):
        a.append(gx[i]); f.append(_central(lambda v: fn(v, gam, bet), x, i))
    for c in range(3):
        a.append(gg[c]); f.append(_central(lambda v: fn(x, v, bet), gam, c))
        a.append(gb[c]); f.append(_central(lambda v: fn(x, gam, v), bet, c))
    worst = _ratio(a, f, atol, rtol)
    out.append(CheckResult("channel norm backward vs FD", worst <= 1.0, worst, len(a)))

    x = rng.standard_normal((2, 5, 4))
    G = rng.standard_normal((2, 10, 8))
    gx = cnn.upsample2x_backward(G)
    a, f = [], []
    for i in np.ndindex(x.shape):
        a.append(gx[i]); f.append(_central(lambda v: np.sum(cnn.upsample2x_forward(v) * G), x, i))
    worst = _ratio(a, f, atol, rtol)
    out.append(CheckResult("upsample backward vs FD", worst <= 1.0, worst, len(a)))

    z = rng.standard_normal(20)
    s = cnn.sigmoid(z)
    a = s * (1 - s)
    f = [_central(lambda v: float(cnn.sigmoid(v)[j]), z, j) for j in range(20)]
    worst = _ratio(a, f, atol, rtol)
    out.append(CheckResult("sigmoid derivative vs FD", worst <= 1.0, worst, 20))
    return out

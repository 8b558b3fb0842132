"""Small generator CNN with hand-written forward and backward passes.

Layout: trainable latent -> dense -> (c0, cy, cx) -> five 5x5 convolutions.
The first four convolutions are each followed by per-channel normalisation
and LeakyReLU, and optionally by a bilinear x2 upsampling; the last
convolution has one output channel and a sigmoid.  Tensors are (C, H, W) with
H along y and W along x, so the output image is (ny, nx).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .mesh import ConfigError

N_CONV = 5


@dataclass(frozen=True)
class CnnArch:
    out_shape: tuple[int, int] = (200, 200)   # (ny, nx)
    latent_size: int = 128
    channels: tuple[int, ...] = (32, 32, 16, 8, 1)
    upsample_after: tuple[bool, ...] = (True, True, True, False, False)
    dense_channels: int | None = None         # defaults to channels[0]
    kernel: int = 5
    leaky_slope: float = 0.2
    norm_eps: float = 1e-5

    def __post_init__(self):
        if len(self.channels) != N_CONV or len(self.upsample_after) != N_CONV:
            raise ConfigError(f"arch: exactly {N_CONV} convolution layers required")
        if self.channels[-1] != 1:
            raise ConfigError("arch: last convolution must have one output channel")
        if self.upsample_after[-1]:
            raise ConfigError("arch: no upsampling after the output convolution")
        if self.kernel % 2 != 1 or self.kernel < 1:
            raise ConfigError("arch: kernel size must be odd")
        if self.latent_size < 1 or min(self.channels) < 1:
            raise ConfigError("arch: sizes must be positive")
        f = 2 ** self.n_upsample
        ny, nx = self.out_shape
        if ny % f or nx % f:
            raise ConfigError(f"arch: output {self.out_shape} not divisible by upsampling factor {f}")

    @property
    def n_upsample(self) -> int:
        return int(sum(self.upsample_after))

    @property
    def coarse_shape(self) -> tuple[int, int]:
        f = 2 ** self.n_upsample
        return self.out_shape[0] // f, self.out_shape[1] // f

    @property
    def c0(self) -> int:
        return self.dense_channels or self.channels[0]

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        cy, cx = self.coarse_shape
        k = self.kernel
        shapes = {
            "latent": (self.latent_size,),
            "dense.w": (self.latent_size, self.c0 * cy * cx),
            "dense.b": (self.c0 * cy * cx,),
        }
        cin = self.c0
        for i, cout in enumerate(self.channels):
            shapes[f"conv{i}.w"] = (cout, cin, k, k)
            shapes[f"conv{i}.b"] = (cout,)
            if i < N_CONV - 1:
                shapes[f"norm{i}.gamma"] = (cout,)
                shapes[f"norm{i}.beta"] = (cout,)
            cin = cout
        return shapes


def glorot_std(shape: tuple[int, ...]) -> float:
    if len(shape) == 2:
        fan_in, fan_out = shape
    else:
        rf = int(np.prod(shape[2:]))
        fan_in, fan_out = shape[1] * rf, shape[0] * rf
    return float(np.sqrt(2.0 / (fan_in + fan_out)))


def init_params(arch: CnnArch, seed: int) -> dict[str, np.ndarray]:
    """Glorot-normal weights, zero biases, unit scales, standard-normal latent."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in arch.param_shapes().items():
        if name == "latent":
            params[name] = rng.standard_normal(shape)
        elif name.endswith(".w"):
            params[name] = rng.standard_normal(shape) * glorot_std(shape)
        elif name.endswith(".gamma"):
            params[name] = np.ones(shape)
        else:
            params[name] = np.zeros(shape)
    return params


def check_params(arch: CnnArch, params: dict[str, np.ndarray]) -> None:
    shapes = arch.param_shapes()
    if set(shapes) != set(params):
        missing = sorted(set(shapes) - set(params))
        extra = sorted(set(params) - set(shapes))
        raise ConfigError(f"CNN parameters do not match architecture (missing {missing}, unexpected {extra})")
    for name, shape in shapes.items():
        if tuple(np.shape(params[name])) != shape:
            raise ConfigError(f"CNN parameter {name}: shape {np.shape(params[name])}, expected {shape}")


# ---------------------------------------------------------------- layers

def conv2d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Stride-1 'same' cross-correlation of (Cin, H, W) with (Cout, Cin, k, k)."""
    _, H, W = x.shape
    k = w.shape[-1]
    p = k // 2
    xp = np.pad(x, ((0, 0), (p, p), (p, p)))
    out = np.zeros((w.shape[0], H, W))
    for di in range(k):
        for dj in range(k):
            out += np.tensordot(w[:, :, di, dj], xp[:, di:di + H, dj:dj + W], axes=(1, 0))
    out += b[:, None, None]
    return out


def conv2d_backward(x: np.ndarray, w: np.ndarray, grad_out: np.ndarray):
    """Gradients (input, kernel, bias) of ``conv2d_forward`` for upstream ``grad_out``."""
    _, H, W = x.shape
    k = w.shape[-1]
    p = k // 2
    xp = np.pad(x, ((0, 0), (p, p), (p, p)))
    gxp = np.zeros_like(xp)
    gw = np.empty_like(w)
    for di in range(k):
        for dj in range(k):
            win = xp[:, di:di + H, dj:dj + W]
            gw[:, :, di, dj] = np.tensordot(grad_out, win, axes=([1, 2], [1, 2]))
            gxp[:, di:di + H, dj:dj + W] += np.tensordot(w[:, :, di, dj], grad_out, axes=(0, 0))
    gx = gxp[:, p:p + H, p:p + W]
    return gx, gw, grad_out.sum(axis=(1, 2))


def channelnorm_forward(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float = 1e-5):
    mu = x.mean(axis=(1, 2), keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=(1, 2), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = gamma[:, None, None] * xhat + beta[:, None, None]
    return y, (xhat, inv)


def channelnorm_backward(cache, gamma: np.ndarray, grad_out: np.ndarray):
    """Gradients (input, gamma, beta); includes the dependence of mean and variance on x."""
    xhat, inv = cache
    n = xhat.shape[1] * xhat.shape[2]
    dgamma = (grad_out * xhat).sum(axis=(1, 2))
    dbeta = grad_out.sum(axis=(1, 2))
    dxhat = grad_out * gamma[:, None, None]
    dx = inv / n * (n * dxhat - dxhat.sum(axis=(1, 2), keepdims=True)
                    - xhat * (dxhat * xhat).sum(axis=(1, 2), keepdims=True))
    return dx, dgamma, dbeta


def upsample_matrix(n: int) -> np.ndarray:
    """(2n, n) linear interpolation weights, half-pixel centres, edge-clamped."""
    U = np.zeros((2 * n, n))
    src = np.maximum((np.arange(2 * n) + 0.5) / 2.0 - 0.5, 0.0)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n - 1)
    w1 = src - i0
    rows = np.arange(2 * n)
    np.add.at(U, (rows, i0), 1.0 - w1)
    np.add.at(U, (rows, i1), w1)
    return U


def upsample2x_forward(x: np.ndarray) -> np.ndarray:
    Uh = upsample_matrix(x.shape[1])
    Uw = upsample_matrix(x.shape[2])
    return np.einsum("ab,cbd,ed->cae", Uh, x, Uw, optimize=True)


def upsample2x_backward(grad_out: np.ndarray) -> np.ndarray:
    Uh = upsample_matrix(grad_out.shape[1] // 2)
    Uw = upsample_matrix(grad_out.shape[2] // 2)
    return np.einsum("ab,cae,ed->cbd", Uh, grad_out, Uw, optimize=True)


def leaky_relu(x: np.ndarray, slope: float) -> np.ndarray:
    return np.where(x > 0, x, slope * x)


def sigmoid(x):
    # split form keeps exp from overflowing and the result strictly inside (0, 1) for moderate |x|
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# ---------------------------------------------------------------- network

@dataclass
class ForwardTape:
    entries: list = field(default_factory=list)   # (kind, cache) in execution order


def forward(arch: CnnArch, params: dict[str, np.ndarray]) -> tuple[np.ndarray, ForwardTape]:
    """Density image of shape ``arch.out_shape`` with values in (0, 1)."""
    check_params(arch, params)
    tape = ForwardTape()
    cy, cx = arch.coarse_shape
    z = params["latent"]
    h = (z @ params["dense.w"] + params["dense.b"]).reshape(arch.c0, cy, cx)
    tape.entries.append(("dense", z))
    for i in range(N_CONV):
        w, b = params[f"conv{i}.w"], params[f"conv{i}.b"]
        tape.entries.append(("conv", (i, h)))
        h = conv2d_forward(h, w, b)
        if i == N_CONV - 1:
            break
        h, cache = channelnorm_forward(h, params[f"norm{i}.gamma"], params[f"norm{i}.beta"], arch.norm_eps)
        tape.entries.append(("norm", (i, cache)))
        tape.entries.append(("leaky", h > 0))
        h = leaky_relu(h, arch.leaky_slope)
        if arch.upsample_after[i]:
            tape.entries.append(("up", None))
            h = upsample2x_forward(h)
    s = sigmoid(h[0])
    tape.entries.append(("sigmoid", s))
    return s, tape


def backward(arch: CnnArch, params: dict[str, np.ndarray], tape: ForwardTape,
             grad_image: np.ndarray) -> dict[str, np.ndarray]:
    """Reverse-mode gradients of a scalar with image gradient ``grad_image`` for every parameter."""
    grads = {}
    g = None
    for kind, cache in reversed(tape.entries):
        if kind == "sigmoid":
            g = (np.asarray(grad_image, dtype=float) * cache * (1.0 - cache))[None]
        elif kind == "up":
            g = upsample2x_backward(g)
        elif kind == "leaky":
            g = np.where(cache, g, arch.leaky_slope * g)
        elif kind == "norm":
            i, nc = cache
            g, grads[f"norm{i}.gamma"], grads[f"norm{i}.beta"] = channelnorm_backward(
                nc, params[f"norm{i}.gamma"], g)
        elif kind == "conv":
            i, x = cache
            g, grads[f"conv{i}.w"], grads[f"conv{i}.b"] = conv2d_backward(x, params[f"conv{i}.w"], g)
        elif kind == "dense":
            gflat = g.reshape(-1)
            grads["dense.w"] = np.outer(cache, gflat)
            grads["dense.b"] = gflat.copy()
            grads["latent"] = params["dense.w"] @ gflat
    return {k: grads[k] for k in arch.param_shapes()}

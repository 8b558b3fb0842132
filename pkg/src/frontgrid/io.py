"""On-disk artefacts: PGM/PPM images, CSV iteration logs, JSON checkpoints, output-dir locks."""
from __future__ import annotations

import base64
import json
import math
import os
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from .mesh import Mesh
from .optimize import AdamState, IterationLog, RunState

LOG_COLUMNS = ("iter", "power_w", "efficiency_pct", "loss", "grad_norm", "newton_iters", "wall_s")
CHECKPOINT_FORMAT = "frontgrid-checkpoint"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


# ---------------------------------------------------------------- images

def _quantise(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=float)
    if img.size and (img.min() < 0 or img.max() > 1):
        raise ValueError("image values must lie in [0, 1]")
    return np.rint(img * 65535).astype(">u2")


def write_density_pgm(path, img: np.ndarray) -> None:
    """16-bit binary PGM of a (ny, nx) field, row 0 = lowest y; the file's top row is max y."""
    q = _quantise(img)[::-1]
    h, w = q.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
        fh.write(q.tobytes())


def _read_header(data: bytes, magic: bytes):
    tokens, pos = [], 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while not data[end:end + 1].isspace():
            end += 1
        tokens.append(data[pos:end])
        pos = end
    if tokens[0] != magic:
        raise ValueError(f"not a {magic.decode()} file")
    return int(tokens[1]), int(tokens[2]), int(tokens[3]), pos + 1


def read_density_pgm(path) -> np.ndarray:
    """Inverse of :func:`write_density_pgm` (quantised values in [0, 1])."""
    data = Path(path).read_bytes()
    w, h, maxval, off = _read_header(data, b"P5")
    q = np.frombuffer(data, dtype=">u2", count=w * h, offset=off).reshape(h, w)
    return q[::-1].astype(float) / maxval


def busbar_pixels(mesh: Mesh) -> np.ndarray:
    """(ny, nx) mask of elements with a boundary edge lying on the busbar."""
    nx, ny = mesh.grid.nx, mesh.grid.ny
    bus = np.zeros(mesh.n_nodes, bool)
    bus[mesh.dirichlet] = True
    mask = np.zeros(nx * ny, bool)
    c = mesh.conn
    j, i = np.divmod(mesh.active, nx)
    on = ((bus[c[:, 0]] & bus[c[:, 1]] & (j == 0))
          | (bus[c[:, 1]] & bus[c[:, 2]] & (i == nx - 1))
          | (bus[c[:, 2]] & bus[c[:, 3]] & (j == ny - 1))
          | (bus[c[:, 3]] & bus[c[:, 0]] & (i == 0)))
    mask[mesh.active[on]] = True
    return mask.reshape(ny, nx)


def write_overlay_ppm(path, img: np.ndarray, bus_mask: np.ndarray) -> None:
    """16-bit binary PPM: grayscale design with busbar pixels pure red."""
    q = _quantise(img)
    rgb = np.repeat(q[:, :, None], 3, axis=2)
    rgb[bus_mask] = np.array([65535, 0, 0], dtype=">u2")
    rgb = rgb[::-1]
    h, w = q.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n65535\n".encode("ascii"))
        fh.write(np.ascontiguousarray(rgb).tobytes())


def read_ppm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    w, h, maxval, off = _read_header(data, b"P6")
    q = np.frombuffer(data, dtype=">u2", count=w * h * 3, offset=off).reshape(h, w, 3)
    return q[::-1].astype(np.int64)


# ---------------------------------------------------------------- logs

def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    v = float(v)
    return "nan" if math.isnan(v) else format(v, ".17g")


def append_log(path, row: IterationLog) -> None:
    path = Path(path)
    new = not path.exists() or path.stat().st_size == 0
    with open(path, "a") as fh:
        if new:
            fh.write(",".join(LOG_COLUMNS) + "\n")
        fh.write(",".join(_fmt(v) for v in (row.iteration, row.power_w, row.efficiency_pct, row.loss,
                                           row.grad_norm, row.newton_iters, row.wall_s)) + "\n")
        fh.flush()


def read_log(path) -> list[dict]:
    lines = Path(path).read_text().splitlines()
    header = lines[0].split(",")
    return [dict(zip(header, (float(v) for v in ln.split(",")))) for ln in lines[1:]]


# ---------------------------------------------------------------- checkpoints

def _encode(a: np.ndarray) -> dict:
    a = np.ascontiguousarray(a, dtype="<f8")
    return {"shape": list(a.shape), "data": base64.b64encode(a.tobytes()).decode("ascii")}


def _decode(block: dict, name: str) -> np.ndarray:
    try:
        shape = tuple(int(s) for s in block["shape"])
        raw = base64.b64decode(block["data"].encode("ascii"), validate=True)
        a = np.frombuffer(raw, dtype="<f8").astype(float)
        return a.reshape(shape)
    except (KeyError, ValueError, TypeError) as exc:
        raise CheckpointError(f"checkpoint block {name!r} is malformed: {exc}") from None


def _blocks(d: dict | None):
    return None if d is None else {k: _encode(v) for k, v in d.items()}


def checkpoint_dict(state: RunState, config: dict) -> dict:
    a = state.adam
    return {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "encoding": "float64-le-base64",
        "config": config,
        "pipeline": state.pipeline,
        "iteration": state.iteration,
        "p_ref": state.p_ref,
        "failures": state.failures,
        "best": {"efficiency": state.best_efficiency if math.isfinite(state.best_efficiency) else None,
                 "iteration": state.best_iteration},
        "params": _blocks(state.params),
        "best_params": _blocks(state.best_params),
        "adam": {"lr": a.lr, "beta1": a.beta1, "beta2": a.beta2, "eps": a.eps, "step": a.step,
                 "m": _blocks(a.m), "v": _blocks(a.v)},
    }


def checkpoint_save(path, state: RunState, config: dict) -> None:
    text = json.dumps(checkpoint_dict(state, config), indent=1)
    tmp = Path(str(path) + ".tmp")
    tmp.write_text(text + "\n")
    os.replace(tmp, path)


def checkpoint_load(path, expected_shapes: dict | None = None) -> tuple[RunState, dict]:
    """Read a checkpoint; returns the run state and the echoed config tree.

    ``expected_shapes`` (block name -> shape) is checked when given.
    """
    try:
        d = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: not valid JSON ({exc})") from None
    if d.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    if d.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {d.get('version')!r}")

    def blocks(src, what):
        if src is None:
            return None
        out = {k: _decode(v, f"{what}.{k}") for k, v in src.items()}
        if expected_shapes is not None and out:
            if set(out) != set(expected_shapes):
                bad = sorted(set(out) ^ set(expected_shapes))
                raise CheckpointError(f"{path}: {what} blocks do not match architecture: {bad}")
            for k, a in out.items():
                if a.shape != tuple(expected_shapes[k]):
                    raise CheckpointError(
                        f"{path}: block {what}.{k} has shape {a.shape}, expected {tuple(expected_shapes[k])}")
        return out

    try:
        ad = d["adam"]
        adam = AdamState(lr=ad["lr"], beta1=ad["beta1"], beta2=ad["beta2"], eps=ad["eps"], step=ad["step"],
                         m=blocks(ad["m"], "adam.m"), v=blocks(ad["v"], "adam.v"))
        best = d["best"]
        state = RunState(pipeline=d["pipeline"], iteration=d["iteration"], params=blocks(d["params"], "params"),
                         adam=adam, p_ref=d["p_ref"],
                         best_efficiency=-math.inf if best["efficiency"] is None else best["efficiency"],
                         best_iteration=best["iteration"], best_params=blocks(d["best_params"], "best_params"),
                         failures=d.get("failures", 0))
    except KeyError as exc:
        raise CheckpointError(f"{path}: missing field {exc}") from None
    return state, d["config"]


# ---------------------------------------------------------------- output directory

@contextmanager
def output_lock(directory):
    """Exclusive ownership of an output directory for one run."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lock = directory / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise RuntimeError(f"output directory {directory} is in use (remove {lock} if stale)") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield directory
    finally:
        lock.unlink(missing_ok=True)

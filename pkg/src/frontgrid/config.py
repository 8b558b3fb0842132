"""Experiment configuration: JSON key/value tree, validated against the module contracts.

Minimal example::

    {"grid": {"nx": 100, "ny": 100},
     "busbar": {"segments": [{"edge": "left", "start": 0.0065, "length": 0.002}]}}

Everything else falls back to defaults (cell parameters of a 1.5 cm thin-film
cell, filter radius 1.5 elements, direct pipeline).
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import cnn
from .mesh import BusbarSpec, ConfigError, GridSpec, Segment, ShapeMask, build_grid, resolve_busbar
from .optimize import Problem, RunConfig, default_arch
from .physics import CellParams, SolveOptions

BUSBAR_WIDTH = 0.002

# the four square-cell layouts plus the triangle used by `compare`
PRESETS = ("edge-centered", "full-edge", "two-opposite-edges", "corner")


def preset_segments(name: str, lx: float, ly: float, width: float = BUSBAR_WIDTH) -> tuple[Segment, ...]:
    if name == "edge-centered":
        return (Segment("left", 0.5 * ly - 0.5 * width, width),)
    if name == "full-edge":
        return (Segment("left", 0.0, ly),)
    if name == "two-opposite-edges":
        return (Segment("left", 0.5 * ly - 0.5 * width, width),
                Segment("right", 0.5 * ly - 0.5 * width, width))
    if name == "corner":
        return (Segment("left", 0.0, width), Segment("bottom", 0.0, width))
    raise ConfigError(f"busbar.preset: unknown preset {name!r} (choose from {PRESETS})")


@dataclass
class ExperimentConfig:
    grid: GridSpec
    busbar: BusbarSpec
    shape: ShapeMask = field(default_factory=ShapeMask)
    physics: CellParams = field(default_factory=CellParams)
    filter_radius: float = 1.5
    solver: SolveOptions = field(default_factory=SolveOptions)
    run: RunConfig = field(default_factory=RunConfig)
    arch: dict = field(default_factory=dict)
    output: str = "out"
    busbar_preset: str | None = None

    def build_problem(self) -> Problem:
        mesh = resolve_busbar(build_grid(self.grid, self.shape), self.busbar)
        return Problem.build(mesh, self.physics, self.filter_radius, self.solver)

    def build_arch(self) -> cnn.CnnArch:
        kw = dict(self.arch)
        for k in ("channels", "upsample_after"):
            if k in kw:
                kw[k] = tuple(kw[k])
        if "upsample_after" in kw:
            return cnn.CnnArch(out_shape=(self.grid.ny, self.grid.nx), **kw)
        return default_arch(self.grid.ny, self.grid.nx, **kw)

    def to_dict(self) -> dict:
        """Fully resolved configuration, suitable for :func:`parse_config`."""
        shape = {"kind": self.shape.kind}
        if self.shape.kind == "custom-bitmap":
            bm = np.asarray(self.shape.bitmap, bool)[::-1]
            shape["bitmap"] = ["".join("1" if v else "0" for v in row) for row in bm]
        return {
            "grid": dataclasses.asdict(self.grid),
            "shape": shape,
            "busbar": {"voltage": self.busbar.voltage,
                       "segments": [dataclasses.asdict(s) for s in self.busbar.segments]},
            "physics": dataclasses.asdict(self.physics),
            "filter": {"radius": self.filter_radius},
            "solver": dataclasses.asdict(self.solver),
            "run": dataclasses.asdict(self.run),
            "arch": {k: list(v) if isinstance(v, tuple) else v for k, v in self.arch.items()},
            "output": self.output,
        }


_SECTIONS = {"grid", "shape", "busbar", "physics", "filter", "solver", "run", "arch", "output"}
_ARCH_KEYS = {"latent_size", "channels", "upsample_after", "dense_channels", "kernel",
              "leaky_slope", "norm_eps"}


def _fields(cls) -> set:
    return {f.name for f in dataclasses.fields(cls)}


def _check_keys(obj, allowed: set, where: str, required: set = frozenset()):
    if not isinstance(obj, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(obj).__name__}")
    unknown = sorted(set(obj) - allowed)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")
    missing = sorted(required - set(obj))
    if missing:
        raise ConfigError(f"{where}: missing required key(s) {', '.join(missing)}")


def _build(cls, obj: dict, where: str, types: dict | None = None):
    _check_keys(obj, _fields(cls), where)
    for k, v in obj.items():
        expect = (types or {}).get(k)
        if expect is int and (isinstance(v, bool) or not isinstance(v, int)):
            raise ConfigError(f"{where}.{k}: expected an integer, got {v!r}")
        if expect is float and (isinstance(v, bool) or not isinstance(v, (int, float))):
            raise ConfigError(f"{where}.{k}: expected a number, got {v!r}")
    try:
        return cls(**obj)
    except ConfigError as exc:
        raise ConfigError(f"{where}: {exc}") from None
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def parse_config(data: dict, source: str = "<config>") -> ExperimentConfig:
    """Validate a config tree; every error names the offending key."""
    _check_keys(data, _SECTIONS, source, required={"grid", "busbar"})
    grid = _build(GridSpec, data["grid"], f"{source}: grid",
                  {"nx": int, "ny": int, "lx": float, "ly": float})

    shape_in = data.get("shape", {"kind": "full-square"})
    if isinstance(shape_in, str):
        shape_in = {"kind": shape_in}
    _check_keys(shape_in, {"kind", "bitmap"}, f"{source}: shape")
    bitmap = None
    if "bitmap" in shape_in:
        rows = shape_in["bitmap"]
        try:
            bitmap = np.array([[c == "1" for c in row] for row in rows], bool)[::-1]
        except TypeError:
            raise ConfigError(f"{source}: shape.bitmap must be a list of '0'/'1' strings") from None
    try:
        shape = ShapeMask(shape_in.get("kind", "full-square"), bitmap)
        shape.active(grid.nx, grid.ny)
    except ConfigError as exc:
        raise ConfigError(f"{source}: {exc}") from None

    bus_in = data["busbar"]
    _check_keys(bus_in, {"voltage", "segments", "preset", "width"}, f"{source}: busbar")
    voltage = bus_in.get("voltage", 0.5)
    if isinstance(voltage, bool) or not isinstance(voltage, (int, float)):
        raise ConfigError(f"{source}: busbar.voltage must be a number")
    preset = bus_in.get("preset")
    if ("segments" in bus_in) == (preset is not None):
        raise ConfigError(f"{source}: busbar needs exactly one of 'segments' or 'preset'")
    try:
        if preset is not None:
            segs = preset_segments(preset, grid.lx, grid.ly, bus_in.get("width", BUSBAR_WIDTH))
        else:
            if not isinstance(bus_in["segments"], list):
                raise ConfigError("segments must be a list")
            segs = tuple(_build(Segment, s, f"segments[{i}]", {"start": float, "length": float})
                         for i, s in enumerate(bus_in["segments"]))
        busbar = BusbarSpec(segs, float(voltage))
    except ConfigError as exc:
        raise ConfigError(f"{source}: busbar: {exc}") from None

    physics = _build(CellParams, data.get("physics", {}), f"{source}: physics")
    filt = data.get("filter", {})
    _check_keys(filt, {"radius"}, f"{source}: filter")
    radius = filt.get("radius", 1.5)
    if isinstance(radius, bool) or not isinstance(radius, (int, float)) or radius < 0:
        raise ConfigError(f"{source}: filter.radius must be a number >= 0")
    solver = _build(SolveOptions, data.get("solver", {}), f"{source}: solver",
                    {"newton_max_iter": int, "max_halvings": int})
    run = _build(RunConfig, data.get("run", {}), f"{source}: run", {"max_iters": int, "seed": int})
    arch = data.get("arch", {})
    _check_keys(arch, _ARCH_KEYS, f"{source}: arch")
    output = data.get("output", "out")
    if not isinstance(output, str):
        raise ConfigError(f"{source}: output must be a path string")
    cfg = ExperimentConfig(grid, busbar, shape, physics, float(radius), solver, run, dict(arch), output,
                           busbar_preset=preset)
    # surface mesh/busbar/arch problems at load time
    try:
        resolve_busbar(build_grid(grid, shape), busbar)
        if run.pipeline == "solarnet" or arch:
            cfg.build_arch()
    except ConfigError as exc:
        raise ConfigError(f"{source}: {exc}") from None
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return parse_config(data, str(path))


def comparison_variants(cfg: ExperimentConfig) -> dict:
    """Four square busbar layouts and a triangular cell, all sharing cfg's grid and physics."""
    out = {}
    square = ShapeMask("full-square")
    v = cfg.busbar.voltage
    for name in PRESETS:
        segs = preset_segments(name, cfg.grid.lx, cfg.grid.ly)
        out[f"square/{name}"] = dataclasses.replace(cfg, shape=square, busbar=BusbarSpec(segs, v),
                                                    busbar_preset=name)
    segs = preset_segments("edge-centered", cfg.grid.lx, cfg.grid.ly)
    out["triangle/edge-centered"] = dataclasses.replace(
        cfg, shape=ShapeMask("lower-left-triangle"), busbar=BusbarSpec(segs, v), busbar_preset="edge-centered")
    return out

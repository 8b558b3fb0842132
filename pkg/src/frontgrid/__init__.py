"""Topology optimisation of solar-cell front metallization."""
from .cnn import CnnArch
from .config import ExperimentConfig, load_config, parse_config
from .filters import FilterOperator, build_filter
from .mesh import BusbarSpec, ConfigError, GridSpec, Mesh, Segment, ShapeMask, build_grid, resolve_busbar
from .optimize import Problem, RunConfig, run_direct, run_solarnet
from .physics import CellParams, SolveOptions, SolveResult, newton_solve

__version__ = "0.1.0"

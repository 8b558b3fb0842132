"""Structured quad grids, shape masks and busbar resolution."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

EDGES = ("left", "right", "bottom", "top")
SHAPES = ("full-square", "lower-left-triangle", "custom-bitmap")


class ConfigError(ValueError):
    """Invalid geometry, busbar or parameter configuration."""


@dataclass(frozen=True)
class GridSpec:
    nx: int
    ny: int
    lx: float = 0.015
    ly: float = 0.015

    def __post_init__(self):
        if int(self.nx) != self.nx or int(self.ny) != self.ny:
            raise ConfigError("grid: nx and ny must be integers")
        if self.nx < 2 or self.ny < 2:
            raise ConfigError(f"grid: nx, ny must be >= 2 (got {self.nx}, {self.ny})")
        if not (self.lx > 0 and self.ly > 0):
            raise ConfigError("grid: lx and ly must be positive")

    @property
    def hx(self) -> float:
        return self.lx / self.nx

    @property
    def hy(self) -> float:
        return self.ly / self.ny


@dataclass(frozen=True)
class ShapeMask:
    kind: str = "full-square"
    bitmap: np.ndarray | None = None  # (ny, nx) bool, row j = y index

    def __post_init__(self):
        if self.kind not in SHAPES:
            raise ConfigError(f"shape: unknown kind {self.kind!r}")
        if self.kind == "custom-bitmap" and self.bitmap is None:
            raise ConfigError("shape: custom-bitmap requires a bitmap")

    def active(self, nx: int, ny: int) -> np.ndarray:
        """Boolean (ny, nx) array of active elements."""
        if self.kind == "full-square":
            act = np.ones((ny, nx), dtype=bool)
        elif self.kind == "lower-left-triangle":
            j, i = np.mgrid[0:ny, 0:nx]
            act = i + j <= nx - 1
        else:
            act = np.asarray(self.bitmap, dtype=bool)
            if act.shape != (ny, nx):
                raise ConfigError(
                    f"shape: bitmap shape {act.shape} does not match grid ({ny}, {nx})")
        if not act.any():
            raise ConfigError("shape: mask has no active elements")
        return act


@dataclass(frozen=True)
class Segment:
    edge: str
    start: float
    length: float

    def __post_init__(self):
        if self.edge not in EDGES:
            raise ConfigError(f"busbar: unknown edge {self.edge!r}")
        if self.length <= 0:
            raise ConfigError("busbar: segment length must be positive")
        if self.start < 0:
            raise ConfigError("busbar: segment start must be >= 0")


@dataclass(frozen=True)
class BusbarSpec:
    segments: tuple[Segment, ...]
    voltage: float = 0.5

    def __post_init__(self):
        if not self.segments:
            raise ConfigError("busbar: at least one segment required")
        if not self.voltage > 0:
            raise ConfigError(f"busbar: voltage must be positive (got {self.voltage})")


@dataclass(frozen=True, eq=False)
class Mesh:
    grid: GridSpec
    active_mask: np.ndarray        # (ny, nx) bool
    active: np.ndarray             # flat element ids e = j*nx + i of active elements
    conn: np.ndarray               # (n_active, 4) node ids, counter-clockwise from lower-left
    coords: np.ndarray             # (n_nodes, 2) coordinates of every grid node
    used: np.ndarray               # sorted ids of nodes touching an active element
    area: np.ndarray               # per active element, m^2
    dirichlet: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    free: np.ndarray | None = None
    v_bus: float | None = None

    @property
    def n_nodes(self) -> int:
        return self.coords.shape[0]

    @property
    def n_elements(self) -> int:
        return self.active.size

    @property
    def cell_area(self) -> float:
        return float(self.area.sum())

    @property
    def has_busbar(self) -> bool:
        return self.dirichlet.size > 0

    def to_image(self, values: np.ndarray, fill: float = 0.0) -> np.ndarray:
        """Scatter per-active-element values into a (ny, nx) array."""
        img = np.full(self.grid.nx * self.grid.ny, fill, dtype=float)
        img[self.active] = values
        return img.reshape(self.grid.ny, self.grid.nx)

    def from_image(self, img: np.ndarray) -> np.ndarray:
        """Gather per-active-element values from a (ny, nx) array."""
        return np.asarray(img, dtype=float).reshape(-1)[self.active]


def build_grid(spec: GridSpec, mask: ShapeMask | None = None) -> Mesh:
    """Uniform bilinear-quad mesh over the active part of the grid."""
    mask = mask or ShapeMask()
    nx, ny = spec.nx, spec.ny
    act = mask.active(nx, ny)
    active = np.flatnonzero(act.reshape(-1))
    j, i = np.divmod(active, nx)
    n0 = j * (nx + 1) + i
    conn = np.stack([n0, n0 + 1, n0 + nx + 2, n0 + nx + 1], axis=1)
    jj, ii = np.divmod(np.arange((nx + 1) * (ny + 1)), nx + 1)
    coords = np.stack([ii * spec.hx, jj * spec.hy], axis=1)
    used = np.unique(conn)
    area = np.full(active.size, spec.hx * spec.hy)
    return Mesh(spec, act, active, conn, coords, used, area, free=used.copy())


def _edge_nodes(grid: GridSpec, edge: str) -> tuple[np.ndarray, float]:
    """Node ids along an edge, ordered by increasing along-edge coordinate, and spacing."""
    nx, ny = grid.nx, grid.ny
    if edge == "left":
        return np.arange(ny + 1) * (nx + 1), grid.hy
    if edge == "right":
        return np.arange(ny + 1) * (nx + 1) + nx, grid.hy
    if edge == "bottom":
        return np.arange(nx + 1), grid.hx
    return ny * (nx + 1) + np.arange(nx + 1), grid.hx


def segment_nodes(grid: GridSpec, seg: Segment) -> np.ndarray:
    """Nodes covered by one busbar segment after snapping it to whole elements.

    The element count is round(length / h), at least 1; the snapped segment is
    centred on the requested one (half-up rounding of the first node index).
    """
    nodes, h = _edge_nodes(grid, seg.edge)
    n_el_edge = nodes.size - 1
    extent = n_el_edge * h
    if seg.start + seg.length > extent * (1 + 1e-9):
        raise ConfigError(
            f"busbar: segment on {seg.edge} edge [{seg.start}, {seg.start + seg.length}] "
            f"exceeds edge length {extent}")
    n = max(1, int(np.floor(seg.length / h + 0.5)))
    n = min(n, n_el_edge)
    centre = (seg.start + 0.5 * seg.length) / h
    first = int(np.floor(centre - 0.5 * n + 0.5))
    first = min(max(first, 0), n_el_edge - n)
    return nodes[first:first + n + 1]


def resolve_busbar(mesh: Mesh, bus: BusbarSpec) -> Mesh:
    """Return a copy of ``mesh`` with Dirichlet nodes set from ``bus``."""
    sel = np.unique(np.concatenate([segment_nodes(mesh.grid, s) for s in bus.segments]))
    on_mesh = np.isin(sel, mesh.used)
    if not on_mesh.all():
        raise ConfigError(
            f"busbar: {int((~on_mesh).sum())} busbar node(s) touch no active element")
    if sel.size == 0:
        raise ConfigError("busbar: resolved node set is empty")
    free = np.setdiff1d(mesh.used, sel, assume_unique=True)
    return Mesh(mesh.grid, mesh.active_mask, mesh.active, mesh.conn, mesh.coords,
                mesh.used, mesh.area, dirichlet=sel, free=free, v_bus=float(bus.voltage))


def filter_neighborhoods(mesh: Mesh, radius: float):
    """Cone-weight neighbour table over active elements.

    Returns ``(rows, cols, weights)`` indexing active elements (positions in
    ``mesh.active``); a pair is included when the centre distance in element
    units is strictly below ``radius``, with weight ``radius - dist``.
    """
    if radius < 0:
        raise ConfigError("filter radius must be >= 0")
    nx, ny = mesh.grid.nx, mesh.grid.ny
    pos = np.full(nx * ny, -1, dtype=np.int64)
    pos[mesh.active] = np.arange(mesh.n_elements)
    j, i = np.divmod(mesh.active, nx)
    reach = int(np.ceil(radius))
    rows, cols, wts = [], [], []
    for dj in range(-reach, reach + 1):
        for di in range(-reach, reach + 1):
            d = np.hypot(di, dj)
            if d >= radius:
                continue
            ii, jj = i + di, j + dj
            ok = (ii >= 0) & (ii < nx) & (jj >= 0) & (jj < ny)
            nb = np.full(i.size, -1, dtype=np.int64)
            nb[ok] = pos[jj[ok] * nx + ii[ok]]
            keep = nb >= 0
            rows.append(np.flatnonzero(keep))
            cols.append(nb[keep])
            wts.append(np.full(int(keep.sum()), radius - d))
    if not rows:
        empty = np.zeros(0, dtype=np.int64)
        return empty, empty, np.zeros(0)
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    wts = np.concatenate(wts)
    order = np.lexsort((cols, rows))
    return rows[order], cols[order], wts[order]

import numpy as np
import pytest

from frontgrid.mesh import BusbarSpec, GridSpec, Segment, ShapeMask, build_grid, resolve_busbar
from frontgrid.physics import CellParams


def edge_centred(lx=0.015, width=0.002, v=0.5, edge="left"):
    return BusbarSpec((Segment(edge, 0.5 * lx - 0.5 * width, width),), v)


def make_mesh(n, busbar=None, shape="full-square", lx=0.015):
    m = build_grid(GridSpec(n, n, lx, lx), ShapeMask(shape))
    return resolve_busbar(m, busbar or edge_centred(lx))


@pytest.fixture
def params():
    return CellParams()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)

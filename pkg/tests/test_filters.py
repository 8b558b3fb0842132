import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from frontgrid.filters import build_filter
from frontgrid.mesh import GridSpec, ShapeMask, build_grid

SELF_WEIGHT = 1.5 / (1.5 + 4 * 0.5 + 4 * (1.5 - np.sqrt(2)))


def test_small_radius_is_identity():
    m = build_grid(GridSpec(6, 6))
    F = build_filter(m, 0.5)
    np.testing.assert_array_equal(F.matrix.toarray(), np.eye(36))


def test_rows_sum_to_one_and_nonnegative():
    m = build_grid(GridSpec(9, 9), ShapeMask("lower-left-triangle"))
    F = build_filter(m, 1.5)
    np.testing.assert_allclose(np.asarray(F.matrix.sum(axis=1)).ravel(), 1.0, atol=1e-12)
    assert F.matrix.data.min() >= 0


def test_interior_self_weight():
    m = build_grid(GridSpec(5, 5))
    F = build_filter(m, 1.5)
    assert SELF_WEIGHT == pytest.approx(0.3903053, abs=1e-7)
    assert F.matrix[12, 12] == pytest.approx(SELF_WEIGHT, rel=1e-14)


def test_masked_boundary_rows_bruteforce():
    m = build_grid(GridSpec(5, 5), ShapeMask("lower-left-triangle"))
    F = build_filter(m, 1.5).matrix.toarray()
    cent = np.array([divmod(e, 5)[::-1] for e in m.active], float)
    d = np.linalg.norm(cent[:, None] - cent[None], axis=-1)
    W = np.maximum(0, 1.5 - d)
    W /= W.sum(axis=1, keepdims=True)
    np.testing.assert_allclose(F, W, atol=1e-15)


def test_uniform_field_is_preserved():
    m = build_grid(GridSpec(8, 8), ShapeMask("lower-left-triangle"))
    F = build_filter(m, 1.5)
    np.testing.assert_allclose(F.apply(np.full(m.n_elements, 0.3)), 0.3, rtol=1e-14)


def test_delta_response():
    m = build_grid(GridSpec(5, 5))
    F = build_filter(m, 1.5)
    x = np.zeros(25)
    x[12] = 1.0
    y = m.to_image(F.apply(x))
    assert y[2, 2] == pytest.approx(SELF_WEIGHT, rel=1e-14)
    # edge neighbours of the centre are interior elements with the full rowsum
    assert y[2, 1] == pytest.approx(0.5 * SELF_WEIGHT / 1.5, rel=1e-14)
    assert y[0, 0] == 0.0


def test_adjoint_identity(rng):
    m = build_grid(GridSpec(11, 11), ShapeMask("lower-left-triangle"))
    F = build_filter(m, 1.5)
    for _ in range(100):
        x = rng.standard_normal(m.n_elements)
        y = rng.standard_normal(m.n_elements)
        a = F.apply(x) @ y
        b = x @ F.adjoint_apply(y)
        assert abs(a - b) <= 1e-13 * max(abs(a), 1.0)


MESH7 = build_grid(GridSpec(7, 7))


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, 49, elements=st.floats(0, 1)), st.floats(0, 3))
def test_bounds_preserved(x, r):
    m = MESH7
    y = build_filter(m, r).apply(x)
    assert y.min() >= x.min() - 1e-15
    assert y.max() <= x.max() + 1e-15


def test_linearity(rng):
    m = build_grid(GridSpec(10, 10))
    F = build_filter(m, 2.0)
    x, y = rng.random(100), rng.random(100)
    np.testing.assert_allclose(F.apply(2.5 * x - 0.7 * y), 2.5 * F.apply(x) - 0.7 * F.apply(y),
                               rtol=1e-13, atol=1e-15)

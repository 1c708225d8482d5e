import logging

import numpy as np
import pytest

from app.errors.errors import ConfigError, DimensionMismatch
from app.models.model import (
    CylinderFunctional,
    SymMatrix,
    TimeGrid,
    UncertaintySet,
    extreme_points,
    g_eval,
    g_eval_packed,
    sym_inner,
    sym_pack,
)


def create_test_matrices(dim: int, count: int, seed: int = 0):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((count, dim, dim))
    return [SymMatrix.from_dense(m + m.T) for m in a]


@pytest.mark.parametrize("a, expected", [(2.0, 1.0), (-2.0, -0.25), (0.0, 0.0)])
def test_g_eval_scalar(scalar_set, a, expected):
    assert g_eval(a, scalar_set) == pytest.approx(expected)


def test_g_eval_diagonal_box(box_set):
    assert g_eval(np.diag([1.0, -1.0]), box_set) == pytest.approx(0.5 * (1.0 - 0.25))


def test_g_eval_attained_at_extreme_points(box_set):
    for A in create_test_matrices(2, 20):
        brute = max(0.5 * A.inner(gamma) for gamma in extreme_points(box_set))
        assert g_eval(A, box_set) == pytest.approx(brute)


def test_g_is_monotone_and_sublinear(box_set):
    rng = np.random.default_rng(1)
    pairs = zip(create_test_matrices(2, 30, seed=2), create_test_matrices(2, 30, seed=3))
    for A, B in pairs:
        assert g_eval(A + B, box_set) <= g_eval(A, box_set) + g_eval(B, box_set) + 1e-12
        c = float(rng.uniform(0.1, 5.0))
        assert g_eval(A * c, box_set) == pytest.approx(c * g_eval(A, box_set))
        # adding a positive semidefinite matrix never lowers G
        p = rng.standard_normal((2, 2))
        assert g_eval(A + SymMatrix.from_dense(p @ p.T), box_set) >= g_eval(A, box_set) - 1e-12


def test_sym_inner_is_trace_product():
    A, B = create_test_matrices(3, 2, seed=4)
    assert sym_inner(A.packed, B.packed, 3) == pytest.approx(np.trace(A.dense() @ B.dense()))


def test_g_eval_packed_batches(box_set):
    packed = sym_pack(np.stack([np.diag([1.0, 1.0]), np.diag([-1.0, -1.0])]))
    np.testing.assert_allclose(g_eval_packed(packed, box_set), [1.0, -0.25])


def test_g_eval_dimension_mismatch(scalar_set):
    with pytest.raises(DimensionMismatch):
        g_eval(np.eye(2), scalar_set)


@pytest.mark.parametrize("lo, hi", [(0.0, 1.0), (1.0, 0.5), (0.5, np.inf)])
def test_uncertainty_set_rejects_bad_bounds(lo, hi):
    with pytest.raises(ConfigError):
        UncertaintySet.scalar(lo, hi)


def test_scalar_set_requires_dim_one():
    with pytest.raises(ConfigError):
        UncertaintySet(2, 0.25, 1.0)


def test_uncertainty_contains(box_set):
    inside = sym_pack(np.diag([0.5, 1.0]))
    outside = sym_pack(np.array([[0.5, 0.1], [0.1, 1.0]]))
    assert box_set.contains(inside)
    assert not box_set.contains(outside)


def test_time_grid_snaps_with_warning(caplog):
    grid = TimeGrid(1.0, 10)
    with caplog.at_level(logging.WARNING):
        assert grid.index_of(0.33) == 3
    assert "snapped" in caplog.text
    assert grid.index_of(0.5) == 5
    with pytest.raises(ConfigError):
        grid.index_of(1.5)


def test_cylinder_functional_evaluates_at_its_times():
    grid = TimeGrid(1.0, 4)
    functional = CylinderFunctional((0.5, 1.0), lambda y: y[:, 1, 0] - y[:, 0, 0], np.inf, 2.0)
    path = np.arange(5, dtype=float)[None, :, None] ** 2
    np.testing.assert_allclose(functional.evaluate_on(path, grid), [16.0 - 4.0])


@pytest.mark.parametrize("times", [(), (0.0, 1.0), (0.6, 0.4)])
def test_cylinder_functional_rejects_bad_times(times):
    with pytest.raises(ConfigError):
        CylinderFunctional(times, lambda y: y[:, 0, 0], 1.0, 1.0)


def test_cylinder_functional_times_collapse_on_coarse_grid():
    functional = CylinderFunctional((0.5, 0.55), lambda y: y[:, 0, 0], np.inf, 1.0)
    with pytest.raises(ConfigError):
        functional.time_indices(TimeGrid(1.0, 2))


def test_spot_check_flags_wrong_bound(caplog):
    functional = CylinderFunctional((1.0,), lambda y: y[:, 0, 0] ** 2, 1.0, 1.0, name="square")
    with caplog.at_level(logging.WARNING):
        observed_bound, observed_lip = functional.spot_check(1)
    assert observed_bound > 1.0
    assert "exceeds declared bound" in caplog.text

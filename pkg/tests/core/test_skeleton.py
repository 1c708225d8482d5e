import math

import numpy as np
import pytest

from app.core.skeleton import (
    FlowMap,
    IntegralMap,
    PathTarget,
    TerminalTarget,
    rate_J,
    skeleton_euler,
    skeleton_ode,
)
from app.errors.errors import ConfigError, DimensionMismatch, DivergenceError
from app.models.builtins import BuiltinKind, build
from app.models.flow import FlowCoefficients, FlowSpec, SkeletonPair
from app.models.model import TimeGrid


def create_test_flow(name: str = "linear", dim: int = 1, **params):
    return build(BuiltinKind.FLOW, name, params, dim=dim)


@pytest.mark.parametrize("g, expected", [(1.0, 0.5), (0.5, 1.0), (0.25, 2.0)])
def test_rate_J_for_constant_pair(scalar_set, unit_grid, g, expected):
    assert rate_J(SkeletonPair.constant(unit_grid, [1.0], [g]), scalar_set) == pytest.approx(expected)


def test_rate_J_is_infinite_outside_sigma(scalar_set, unit_grid):
    assert rate_J(SkeletonPair.constant(unit_grid, [1.0], [0.1]), scalar_set) == math.inf
    assert rate_J(SkeletonPair.constant(unit_grid, [0.0], [2.0]), scalar_set) == math.inf


def test_rate_J_dimension_mismatch(box_set, unit_grid):
    with pytest.raises(DimensionMismatch):
        rate_J(SkeletonPair.constant(unit_grid, [1.0], [1.0]), box_set)


def test_pair_rejects_wrong_step_count(unit_grid):
    with pytest.raises(DimensionMismatch):
        SkeletonPair(unit_grid, np.zeros((10, 1)), np.zeros((10, 1)))


def test_skeleton_ode_matches_closed_form(unit_grid):
    pair = SkeletonPair.constant(unit_grid, [1.0], [1.0])
    psi = skeleton_ode(create_test_flow(), pair, np.array([[0.0], [2.0]]))
    t = unit_grid.times
    np.testing.assert_allclose(psi[0, :, 0], 1.0 - np.exp(-t), atol=1e-8)
    np.testing.assert_allclose(psi[1, :, 0], 1.0 + np.exp(-t), atol=1e-8)


def test_skeleton_ode_follows_quadratic_variation_drift(unit_grid):
    pair = SkeletonPair.constant(unit_grid, [0.0], [1.0])
    psi = skeleton_ode(create_test_flow("ou_qv_drift", c=0.5), pair, np.zeros((1, 1)))
    np.testing.assert_allclose(psi[0, :, 0], 0.5 * (1.0 - np.exp(-unit_grid.times)), atol=1e-8)


def test_skeleton_ode_reports_divergence():
    grid = TimeGrid(1.0, 10)
    coefficients = FlowCoefficients(
        b=lambda x: np.exp(x ** 2),
        sigma=lambda x: np.ones(x.shape + (1,)),
        h=lambda x: np.zeros(x.shape + (1,)),
        state_dim=1,
        noise_dim=1,
    )
    flow_spec = FlowSpec(coefficients, lipschitz=1.0, name="blowup")
    with pytest.raises(DivergenceError, match="x=\\[5.0\\]"):
        skeleton_ode(flow_spec, SkeletonPair.constant(grid, [0.0], [1.0]), np.array([[5.0]]))


def test_euler_skeleton_converges(unit_grid):
    rng = np.random.default_rng(0)
    pair = SkeletonPair.from_diagonal(unit_grid, rng.standard_normal((unit_grid.n_steps, 1)), np.full((unit_grid.n_steps, 1), 0.5))
    flow_spec = create_test_flow("ou_qv_drift")
    x0 = np.linspace(-1.0, 1.0, 5)[:, None]
    reference = skeleton_ode(flow_spec, pair, x0)
    errors = [np.max(np.abs(skeleton_euler(flow_spec, pair, x0, N) - reference)) for N in (2, 5, 10, 25)]
    assert all(b < a for a, b in zip(errors, errors[1:]))
    assert errors[-1] < 0.05


def test_euler_skeleton_is_exact_at_time_zero(unit_grid):
    pair = SkeletonPair.constant(unit_grid, [1.0], [1.0])
    x0 = np.array([[0.3]])
    np.testing.assert_allclose(skeleton_euler(create_test_flow(), pair, x0, 4)[:, 0], x0)
    with pytest.raises(ConfigError):
        skeleton_euler(create_test_flow(), pair, x0, 0)


def test_integral_map_is_cumulative_f():
    grid = TimeGrid(1.0, 4)
    skeleton_map = IntegralMap(1, x0=np.array([1.0]))
    f_dot = np.array([[[1.0], [2.0], [0.0], [-1.0]]])
    psi = skeleton_map(f_dot, np.ones_like(f_dot), grid)
    np.testing.assert_allclose(psi[0, :, 0], [1.0, 1.25, 1.75, 1.75, 1.5])


def test_flow_map_agrees_with_skeleton_ode(unit_grid):
    flow_spec = create_test_flow("ou_qv_drift")
    pair = SkeletonPair.constant(unit_grid, [0.7], [0.5])
    psi = FlowMap(flow_spec, np.array([0.2]))(pair.f_dot[None], pair.g_dot[None], unit_grid)[0]
    np.testing.assert_allclose(psi, skeleton_ode(flow_spec, pair, np.array([[0.2]]))[0], atol=1e-12)


def test_flow_map_warm_start_recovers_forcing():
    grid = TimeGrid(1.0, 400)
    flow_spec = create_test_flow()
    pair = SkeletonPair.constant(grid, [1.0], [1.0])
    path = skeleton_ode(flow_spec, pair, np.zeros((1, 1)))[0]
    f_dot = FlowMap(flow_spec, np.zeros(1)).warm_start(path, grid, pair.g_diag)
    np.testing.assert_allclose(f_dot, 1.0, atol=0.01)


def test_targets_measure_distance(unit_grid):
    path = np.linspace(0.0, 1.0, unit_grid.n_steps + 1)[:, None]
    target = PathTarget(path)
    np.testing.assert_allclose(target.distance2(path[None]), [0.0])
    assert target.sup_distance(path + 0.1) == pytest.approx(0.1)
    terminal = TerminalTarget(np.array([1.0]))
    np.testing.assert_allclose(terminal.reference_path(unit_grid, np.zeros(1)), path)
    assert terminal.distance2(path * 0.5) == pytest.approx(0.25)
    with pytest.raises(DimensionMismatch):
        target.reference_path(TimeGrid(1.0, 10), np.zeros(1))

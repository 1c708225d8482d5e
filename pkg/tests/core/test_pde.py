import numpy as np
import pytest

from app.core.paths import map_blocks, mean_and_se
from app.core.pde import (
    BoundaryPolicy,
    PdeGrid,
    cylinder_expectation,
    extract_feedback,
    solve_chain,
    solve_gheat,
    worst_case_policy,
)
from app.errors.errors import CflViolation, ConfigError, NumericalFailure, UnsupportedConfiguration
from app.models.builtins import BuiltinKind, build
from app.models.controls import ControlPolicy
from app.models.model import TimeGrid, UncertaintySet


def create_test_functional(name: str, dim: int = 1, horizon: float = 1.0, **params):
    return build(BuiltinKind.FUNCTIONAL, name, params, horizon=horizon, dim=dim)


@pytest.mark.parametrize("name, expected, tolerance", [("x2", 1.0, 0.005), ("neg_x2", -0.25, 0.005 * 0.25), ("x", 0.0, 1e-6)])
def test_g_normal_moments(scalar_set, name, expected, tolerance):
    grid = PdeGrid.build(scalar_set, 1.0, dx=0.02)
    value = cylinder_expectation(create_test_functional(name), scalar_set, TimeGrid(1.0, 10), grid)
    assert value == pytest.approx(expected, abs=tolerance)


def test_box_moments_add_per_axis(box_set):
    grid = PdeGrid.build(box_set, 1.0, dx=0.1)
    value = cylinder_expectation(create_test_functional("x2", dim=2), box_set, TimeGrid(1.0, 10), grid)
    assert value == pytest.approx(2.0, rel=0.01)


def test_solve_gheat_keeps_knot_snapshots(scalar_set):
    grid = PdeGrid.build(scalar_set, 1.0, dx=0.05)
    solution = solve_gheat(lambda x: x[..., 0] ** 2, scalar_set, grid, (0.0, 1.0), knots=[0.25, 0.5])
    np.testing.assert_allclose(solution.times, [0.0, 0.25, 0.5, 1.0])
    assert solution.at_origin(2) == pytest.approx(0.5, rel=1e-3)


def test_cfl_violation_is_rejected(scalar_set):
    grid = PdeGrid((-1.0,), (1.0,), (40,), dt=0.01)
    with pytest.raises(CflViolation):
        solve_gheat(lambda x: x[..., 0], scalar_set, grid, (0.0, 1.0))


def test_lattice_budget(box_set):
    functional = create_test_functional("increment", dim=2)
    with pytest.raises(UnsupportedConfiguration):
        solve_chain(functional, box_set, TimeGrid(1.0, 10), PdeGrid.build(box_set, 1.0, dx=0.2))


def test_matches_dynamic_programming(scalar_set, dp_oracle):
    functional = create_test_functional("min_x2_c", c=4.0)
    grid = PdeGrid.build(scalar_set, 1.0, dx=0.02, boundary=BoundaryPolicy.CLAMP)
    value = cylinder_expectation(functional, scalar_set, TimeGrid(1.0, 10), grid)
    assert value == pytest.approx(dp_oracle(functional, scalar_set, n_steps=32), rel=0.02)


def test_two_time_chain_matches_dynamic_programming(scalar_set, dp_oracle):
    functional = create_test_functional("increment_min_sq", c=1.0)
    grid = PdeGrid.build(scalar_set, 1.0, dx=0.05)
    value = cylinder_expectation(functional, scalar_set, TimeGrid(1.0, 10), grid)
    oracle = dp_oracle(functional, scalar_set, x_max=4.0, n_x=321, n_sigma=8)
    assert value == pytest.approx(oracle, rel=0.02)


def test_chain_propagates_earlier_observation(scalar_set):
    grid = PdeGrid.build(scalar_set, 1.0, dx=0.05)
    value = cylinder_expectation(create_test_functional("first"), scalar_set, TimeGrid(1.0, 10), grid)
    assert value == pytest.approx(0.0, abs=1e-9)


def test_exponential_chain_gives_log_moment(scalar_set):
    grid = PdeGrid.build(scalar_set, 1.0, dx=0.02)
    value = cylinder_expectation(create_test_functional("x"), scalar_set, TimeGrid(1.0, 10), grid, exponential=True)
    assert value == pytest.approx(0.5 * scalar_set.sigma_hi2, rel=0.01)


def test_comparison_principle(scalar_set):
    grid = PdeGrid.build(scalar_set, 1.0, dx=0.05, boundary=BoundaryPolicy.CLAMP)
    lower = solve_gheat(lambda x: np.minimum(x[..., 0] ** 2, 1.0), scalar_set, grid, (0.0, 1.0))
    upper = solve_gheat(lambda x: np.minimum(x[..., 0] ** 2, 2.0), scalar_set, grid, (0.0, 1.0))
    assert np.all(lower.values <= upper.values + 1e-12)


def test_refine_keeps_cfl_ratio(scalar_set):
    grid = PdeGrid.build(scalar_set, 1.0, dx=0.1)
    fine = grid.refine()
    fine.check_cfl(scalar_set)
    np.testing.assert_allclose(scalar_set.sigma_hi2 * fine.dt / fine.dx ** 2, scalar_set.sigma_hi2 * grid.dt / grid.dx ** 2)


def test_feedback_needs_exponential_chain(scalar_set):
    grid = PdeGrid.build(scalar_set, 1.0, dx=0.1)
    chain = solve_chain(create_test_functional("min_x2_c"), scalar_set, TimeGrid(1.0, 10), grid)
    with pytest.raises(ConfigError):
        extract_feedback(chain)


def test_constant_terminal_is_preserved(scalar_set):
    grid = PdeGrid.build(scalar_set, 1.0, dx=0.1)
    solution = solve_gheat(lambda x: np.full(x.shape[:-1], 2.5), scalar_set, grid, (0.0, 1.0), knots=[0.5])
    np.testing.assert_allclose(solution.values, 2.5, rtol=0, atol=1e-12)


def test_sum_of_terminals_is_subadditive(scalar_set):
    grid = PdeGrid.build(scalar_set, 1.0, dx=0.05, boundary=BoundaryPolicy.CLAMP)

    def phi(x):
        return np.minimum(x[..., 0] ** 2, 1.0)

    def psi(x):
        return -np.abs(x[..., 0] - 0.3)

    both = solve_gheat(lambda x: phi(x) + psi(x), scalar_set, grid, (0.0, 1.0))
    separate = solve_gheat(phi, scalar_set, grid, (0.0, 1.0)).values + solve_gheat(psi, scalar_set, grid, (0.0, 1.0)).values
    assert np.all(both.values <= separate + 1e-10)
    assert both.at_origin(0) <= separate[0][grid.origin] + 1e-10


def test_scheme_converges_under_refinement(scalar_set):
    # exp is convex, so the exact value at the origin is exp(sigma_hi^2 T / 2)
    exact = np.exp(0.5 * scalar_set.sigma_hi2)
    coarse = PdeGrid.build(scalar_set, 1.0, dx=0.1)
    errors = []
    for grid in (coarse, coarse.refine(), coarse.refine().refine()):
        value = solve_gheat(lambda x: np.exp(x[..., 0]), scalar_set, grid, (0.0, 1.0)).at_origin(0)
        errors.append(abs(value - exact))
    assert errors[0] / errors[1] >= 1.5
    assert errors[1] / errors[2] >= 1.5


def test_feedback_of_constant_terminal_is_zero(scalar_set, unit_grid):
    grid = PdeGrid.build(scalar_set, 1.0, dx=0.1)
    chain = solve_chain(create_test_functional("constant", c=2.0), scalar_set, unit_grid, grid, exponential=True, shift=2.0)
    feedback = extract_feedback(chain)
    assert feedback.bound == 0.0
    path = np.zeros((3, unit_grid.n_steps + 1, 1))
    np.testing.assert_array_equal(feedback(10, unit_grid.times[10], path), 0.0)


def test_feedback_of_linear_terminal_is_flat(scalar_set):
    time_grid = TimeGrid(1.0, 10)
    grid = PdeGrid.build(scalar_set, 1.0, dx=0.05)
    feedback = extract_feedback(solve_chain(create_test_functional("x"), scalar_set, time_grid, grid, exponential=True))
    inner = np.abs(grid.nodes[0]) <= 2.0
    read = feedback.table.tables[0][:-1, inner, 0]
    assert np.ptp(read) <= 1e-3
    np.testing.assert_allclose(read, 1.0, atol=1e-3)
    assert np.isfinite(feedback.bound)


def test_nonpositive_value_function_is_a_numerical_failure(scalar_set):
    grid = PdeGrid.build(scalar_set, 1.0, dx=0.1)
    chain = solve_chain(create_test_functional("min_x2_c"), scalar_set, TimeGrid(1.0, 10), grid, exponential=True, shift=4.0)
    chain.legs[0].solution.values[3, 5] = -1e-3
    with pytest.raises(NumericalFailure, match="<= 0"):
        extract_feedback(chain)


def test_worst_case_policy_is_sigma_hi_for_convex_terminal(scalar_set):
    time_grid = TimeGrid(1.0, 10)
    chain = solve_chain(create_test_functional("x2"), scalar_set, time_grid, PdeGrid.build(scalar_set, 1.0, dx=0.1))
    policy = worst_case_policy(chain)
    path = np.zeros((4, time_grid.n_steps + 1, 1))
    path[:, :, 0] = np.linspace(-1.0, 1.0, 4)[:, None]
    for k in range(time_grid.n_steps):
        np.testing.assert_allclose(policy.at(k, time_grid.times[k], path), scalar_set.sigma_hi)


def create_test_sandwich(S, functional, grid, n_paths, seed):
    chain = solve_chain(functional, S, grid, PdeGrid.build(S, grid.horizon, dx=0.02))
    value = chain.origin_value()
    policies = ControlPolicy.extreme_family(S, grid.n_steps) + [
        ControlPolicy.constant([0.75], grid.n_steps),
        worst_case_policy(chain),
    ]
    rows = []
    for policy in policies:
        samples = np.concatenate(map_blocks(lambda bundle, _: functional.evaluate_on(bundle.B, grid), S, grid, policy, n_paths, seed))
        rows.append(mean_and_se(samples))
    return value, rows


def test_representation_sandwich(scalar_set):
    value, rows = create_test_sandwich(scalar_set, create_test_functional("abs"), TimeGrid(1.0, 50), 20000, seed=7)
    for mean, se in rows:
        assert mean <= value + 3.0 * se + 0.005 * value
    assert max(mean for mean, _ in rows) >= 0.98 * value - 3.0 * max(se for _, se in rows)


@pytest.mark.slow
def test_representation_sandwich_at_scale():
    S = UncertaintySet.scalar(0.25, 1.0)
    value, rows = create_test_sandwich(S, create_test_functional("abs"), TimeGrid(1.0, 100), 100000, seed=8)
    for mean, se in rows:
        assert mean <= value + 3.0 * se + 0.005 * value
    assert max(mean for mean, _ in rows) >= 0.98 * value

import numpy as np
import pytest

from app.core.paths import (
    BLOCK_SIZE,
    compensator_path,
    drift_shift,
    girsanov_density,
    h_functional,
    mean_and_se,
    simulate,
    simulate_shifted,
    stochastic_integral,
)
from app.errors.errors import ControlViolation, DimensionMismatch
from app.models.controls import ControlPolicy, DriftControl
from app.models.model import TimeGrid


def create_test_random_policy(S, grid, seed: int = 0):
    rng = np.random.default_rng(seed)
    return ControlPolicy.open_loop(rng.uniform(S.sigma_lo, S.sigma_hi, size=(grid.n_steps, S.dim)), name="random")


def test_simulation_is_independent_of_worker_count(scalar_set):
    grid = TimeGrid(1.0, 8)
    policy = create_test_random_policy(scalar_set, grid)
    n_paths = BLOCK_SIZE + 100
    one = simulate(scalar_set, grid, policy, n_paths, seed=42, workers=1)
    many = simulate(scalar_set, grid, policy, n_paths, seed=42, workers=4)
    np.testing.assert_array_equal(one.B, many.B)
    np.testing.assert_array_equal(one.QV, many.QV)


def test_prefix_of_paths_does_not_depend_on_path_count(scalar_set):
    grid = TimeGrid(1.0, 4)
    policy = ControlPolicy.constant([1.0], grid.n_steps)
    small = simulate(scalar_set, grid, policy, 10, seed=3)
    large = simulate(scalar_set, grid, policy, 500, seed=3)
    np.testing.assert_array_equal(small.B, large.B[:10])


def test_zero_paths_gives_empty_bundle(scalar_set, unit_grid):
    bundle = simulate(scalar_set, unit_grid, ControlPolicy.constant([1.0], unit_grid.n_steps), 0, seed=1)
    assert bundle.n_paths == 0
    assert bundle.B.shape == (0, unit_grid.n_steps + 1, 1)


def test_quadratic_variation_stays_in_sigma_band(box_set):
    grid = TimeGrid(2.0, 40)
    policy = ControlPolicy.markov(lambda t, x: np.where(x > 0, 1.0, 0.5), dim=2, name="bang")
    bundle = simulate(box_set, grid, policy, 1000, seed=5)
    qv_diag = bundle.QV[:, :, [0, 2]]
    t = grid.times[None, :, None]
    assert np.all(qv_diag >= box_set.sigma_lo2 * t * (1 - 1e-12))
    assert np.all(qv_diag <= box_set.sigma_hi2 * t * (1 + 1e-12))
    np.testing.assert_array_equal(bundle.QV[:, :, 1], 0.0)


def test_constant_extreme_policy_gives_exact_quadratic_variation(scalar_set, unit_grid):
    policy = ControlPolicy.constant([scalar_set.sigma_hi], unit_grid.n_steps)
    bundle = simulate(scalar_set, unit_grid, policy, 200, seed=9)
    np.testing.assert_allclose(bundle.QV[:, -1, 0], scalar_set.sigma_hi2 * unit_grid.horizon, rtol=1e-12)


def test_policy_outside_gamma_is_rejected(scalar_set):
    grid = TimeGrid(1.0, 4)
    policy = ControlPolicy.constant([1.5], grid.n_steps)
    with pytest.raises(ControlViolation, match="step 0, path 0"):
        simulate(scalar_set, grid, policy, 10, seed=0)


def test_policy_dimension_mismatch(box_set, unit_grid):
    with pytest.raises(DimensionMismatch):
        simulate(box_set, unit_grid, ControlPolicy.constant([1.0], unit_grid.n_steps), 10, seed=0)


def test_compensator_increments_are_nonnegative(box_set):
    grid = TimeGrid(1.0, 20)
    rng = np.random.default_rng(17)
    bundle = simulate(box_set, grid, create_test_random_policy(box_set, grid, seed=1), 10000, seed=2)
    eta_sym = rng.standard_normal((grid.n_steps, box_set.packed_dim)) * 3.0
    M = compensator_path(eta_sym, bundle)
    assert np.min(np.diff(M, axis=1)) >= -1e-12
    # feedback form, a different symmetric matrix per path and step
    def feedback(k, t, path):
        return np.concatenate([path[:, k], np.sin(path[:, k, :1])], axis=-1)

    M = compensator_path(feedback, bundle)
    assert np.min(np.diff(M, axis=1)) >= -1e-12


def test_h_functional_and_integral_for_constant_drift(scalar_set, unit_grid):
    policy = ControlPolicy.constant([0.5], unit_grid.n_steps)
    bundle = simulate(scalar_set, unit_grid, policy, 100, seed=4)
    eta = DriftControl.constant([0.8], unit_grid.n_steps)
    np.testing.assert_allclose(h_functional(eta, bundle), 0.5 * 0.64 * 0.25, rtol=1e-12)
    np.testing.assert_allclose(stochastic_integral(eta, bundle), 0.8 * bundle.B[:, -1], atol=1e-12)


def test_drift_shift_adds_drift_times_quadratic_variation(scalar_set, unit_grid):
    bundle = simulate(scalar_set, unit_grid, create_test_random_policy(scalar_set, unit_grid), 50, seed=6)
    assert drift_shift(bundle, DriftControl.zero(1, unit_grid.n_steps)) is bundle
    shifted = drift_shift(bundle, DriftControl.constant([0.3], unit_grid.n_steps))
    np.testing.assert_allclose(shifted.B, bundle.B + 0.3 * bundle.QV, atol=1e-12)


def test_drift_shift_and_h_commute_with_path_order(scalar_set, unit_grid):
    bundle = simulate(scalar_set, unit_grid, create_test_random_policy(scalar_set, unit_grid, seed=2), 64, seed=13)
    eta = DriftControl.markov(lambda t, x: np.tanh(x), dim=1, bound=1.0)
    order = np.random.default_rng(5).permutation(bundle.n_paths)
    shifted = drift_shift(bundle, eta)
    reordered = drift_shift(bundle.take(order), eta)
    np.testing.assert_allclose(reordered.B, shifted.B[order], rtol=0, atol=1e-14)
    np.testing.assert_allclose(h_functional(eta, reordered), h_functional(eta, shifted)[order], rtol=0, atol=1e-14)


def test_joint_simulation_matches_drift_shift(scalar_set, unit_grid):
    policy = create_test_random_policy(scalar_set, unit_grid, seed=8)
    eta = DriftControl.random_family(1, unit_grid, count=1, bound=1.0, seed=8)[0]
    bundle, shifted = simulate_shifted(scalar_set, unit_grid, policy, eta, 300, seed=12)
    np.testing.assert_allclose(shifted.B, drift_shift(bundle, eta).B, atol=1e-12)


@pytest.mark.parametrize(
    "eta",
    [
        DriftControl.constant([0.5], 20),
        DriftControl.random_family(1, TimeGrid(1.0, 20), count=1, bound=1.0, seed=3)[0],
        DriftControl.markov(lambda t, x: np.tanh(x), dim=1, bound=1.0),
    ],
)
def test_girsanov_density_has_unit_mean(scalar_set, eta):
    grid = TimeGrid(1.0, 20)
    bundle = simulate(scalar_set, grid, ControlPolicy.constant([0.8], grid.n_steps), 20000, seed=21)
    mean, se = mean_and_se(girsanov_density(eta, bundle))
    assert abs(mean - 1.0) <= 3.0 * se


@pytest.mark.slow
def test_girsanov_density_has_unit_mean_at_scale(scalar_set):
    grid = TimeGrid(1.0, 50)
    bundle = simulate(scalar_set, grid, ControlPolicy.constant([1.0], grid.n_steps), 100000, seed=22)
    eta = DriftControl.markov(lambda t, x: np.clip(x, -1.0, 1.0), dim=1, bound=1.0)
    mean, se = mean_and_se(girsanov_density(eta, bundle))
    assert abs(mean - 1.0) <= 3.0 * se

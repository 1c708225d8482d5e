import json

import numpy as np
import pytest
from click.testing import CliRunner

from app.models.model import CylinderFunctional, TimeGrid, UncertaintySet


def pytest_addoption(parser):
    parser.addoption("--run-slow", action="store_true", default=False, help="run desk-scale tests")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: desk-scale runs with 10^5 paths or more")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--run-slow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --run-slow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


def g_expectation_dp(
    functional: CylinderFunctional,
    S: UncertaintySet,
    n_steps: int = 16,
    x_max: float = 6.0,
    n_x: int = None,
    n_sigma: int = 64,
    n_quad: int = 12,
) -> float:
    """Brute-force dynamic programming for E^G of a 1-d cylinder functional.

    Each step takes the max over a 64-point volatility grid of a Gauss-Hermite
    expectation, with linear interpolation on a uniform lattice (clamped at the
    edges). Legs are chained through the diagonal like the PDE solver.
    """
    n = functional.n_times
    n_x = n_x or (481 if n == 1 else 241)
    xs = np.linspace(-x_max, x_max, n_x)
    dx = xs[1] - xs[0]
    z, w = np.polynomial.hermite_e.hermegauss(n_quad)
    w = w / w.sum()
    sigmas = np.linspace(S.sigma_lo, S.sigma_hi, n_sigma)
    times = (0.0,) + functional.times

    mesh = np.stack(np.meshgrid(*([xs] * n), indexing="ij"), axis=-1)
    v = functional(mesh.reshape(-1, n, 1)).reshape((n_x,) * n)
    for leg in range(n, 0, -1):
        h = (times[leg] - times[leg - 1]) / n_steps
        for _ in range(n_steps):
            best = np.full(v.shape, -np.inf)
            for sigma in sigmas:
                pos = np.clip((xs[:, None] + sigma * np.sqrt(h) * z[None, :] + x_max) / dx, 0, n_x - 1)
                lo = np.minimum(np.floor(pos).astype(int), n_x - 2)
                frac = pos - lo
                expected = (v[..., lo] * (1.0 - frac) + v[..., lo + 1] * frac) @ w
                best = np.maximum(best, expected)
            v = best
        if leg > 1:
            v = np.array(np.diagonal(v, axis1=-2, axis2=-1))
    return float(v[n_x // 2])


@pytest.fixture
def dp_oracle():
    return g_expectation_dp


@pytest.fixture
def scalar_set():
    return UncertaintySet.scalar(0.25, 1.0)


@pytest.fixture
def box_set():
    return UncertaintySet.box(2, 0.25, 1.0)


@pytest.fixture
def unit_grid():
    return TimeGrid(1.0, 50)


@pytest.fixture
def runner():
    return CliRunner(mix_stderr=False)


@pytest.fixture
def write_config(tmp_path):
    def _write(payload: dict, name: str = "experiment.json"):
        path = tmp_path / name
        path.write_text(json.dumps(payload))
        return path
    return _write

# skeleton.py
"""Skeleton flows Psi(f, g) and their rate J(f, g)."""
import logging
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from ..errors.errors import ConfigError, DimensionMismatch, DivergenceError
from ..models.flow import FlowCoefficients, FlowSpec, SkeletonPair
from ..models.model import TimeGrid, UncertaintySet, diagonal_positions, packed_size, sym_inner

logger = logging.getLogger(__name__)

SIGMA_TOL = 1e-9


def rate_J_arrays(f_dot: np.ndarray, g_diag: np.ndarray, dt: float, S: UncertaintySet) -> np.ndarray:
    """Batched J over (..., n_steps, d) step derivatives; +inf outside the box."""
    inside = np.all((g_diag >= S.sigma_lo2 - SIGMA_TOL) & (g_diag <= S.sigma_hi2 + SIGMA_TOL), axis=(-2, -1))
    safe = np.clip(g_diag, S.sigma_lo2, S.sigma_hi2)
    value = 0.5 * np.sum(f_dot * f_dot / safe, axis=(-2, -1)) * dt
    return np.where(inside, value, np.inf)


def rate_J(pair: SkeletonPair, S: UncertaintySet) -> float:
    """1/2 sum_k (f'_k, g'_k^{-1} f'_k) dt, or +inf when some g'_k is outside Sigma."""
    if pair.dim != S.dim:
        raise DimensionMismatch(f"pair has dimension {pair.dim}, uncertainty set {S.dim}")
    if not pair.in_sigma(S, SIGMA_TOL):
        return float("inf")
    return float(rate_J_arrays(pair.f_dot, pair.g_diag, pair.grid.dt, S))


def as_lattice(x0: np.ndarray, state_dim: int) -> np.ndarray:
    x0 = np.atleast_2d(np.asarray(x0, dtype=float))
    if x0.shape[-1] != state_dim:
        raise DimensionMismatch(f"initial points have dimension {x0.shape[-1]}, flow has {state_dim}")
    return x0


def check_finite(x: np.ndarray, x0: np.ndarray, t: float):
    bad = ~np.all(np.isfinite(x.reshape(x.shape[0], -1)), axis=-1)
    if np.any(bad):
        row = int(np.flatnonzero(bad)[0])
        raise DivergenceError(f"non-finite state from x={np.round(x0[row % len(x0)], 6).tolist()} at t={t:.6g}")


def integrate_rk4(
    coefficients: FlowCoefficients,
    x0: np.ndarray,
    f_dot: np.ndarray,
    g_dot: np.ndarray,
    grid: TimeGrid,
) -> np.ndarray:
    """Classical RK4 for x' = b(x) + sigma(x) f'_k + h(x) . g'_k with forcing
    frozen on each grid step. x0 is (B, p), forcing (B, n_steps, .); returns
    (B, n_steps + 1, p)."""
    n, dt = grid.n_steps, grid.dt
    times = grid.times
    out = np.empty((x0.shape[0], n + 1, x0.shape[-1]))
    out[:, 0] = x0
    x = x0
    for k in range(n):
        fk, gk = f_dot[:, k], g_dot[:, k]
        k1 = coefficients.drift(x, fk, gk)
        k2 = coefficients.drift(x + 0.5 * dt * k1, fk, gk)
        k3 = coefficients.drift(x + 0.5 * dt * k2, fk, gk)
        k4 = coefficients.drift(x + dt * k3, fk, gk)
        x = x + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        check_finite(x, x0, times[k + 1])
        out[:, k + 1] = x
    return out


def skeleton_ode(flow_spec: FlowSpec, pair: SkeletonPair, x0: np.ndarray) -> np.ndarray:
    """Psi(f, g)(x, t) on the pair's grid for every lattice point; (n_x, n_steps + 1, p)."""
    coefficients = flow_spec.coefficients
    if pair.dim != coefficients.noise_dim:
        raise DimensionMismatch(f"pair has dimension {pair.dim}, flow noise has {coefficients.noise_dim}")
    x0 = as_lattice(x0, coefficients.state_dim)
    n_x = x0.shape[0]
    f_dot = np.broadcast_to(pair.f_dot, (n_x,) + pair.f_dot.shape)
    g_dot = np.broadcast_to(pair.g_dot, (n_x,) + pair.g_dot.shape)
    return integrate_rk4(coefficients, x0, f_dot, g_dot, pair.grid)


def interpolate_cumulative(cumulative: np.ndarray, grid: TimeGrid, t: np.ndarray) -> np.ndarray:
    """Piecewise-linear values of a cumulative grid array (n_steps + 1, .) at times t."""
    position = np.asarray(t, dtype=float) / grid.dt
    idx = np.clip(np.floor(position + 1e-9).astype(int), 0, grid.n_steps - 1)
    w = (position - idx)[:, None]
    return cumulative[idx] + w * (cumulative[idx + 1] - cumulative[idx])


def skeleton_euler(flow_spec: FlowSpec, pair: SkeletonPair, x0: np.ndarray, N: int) -> np.ndarray:
    """Psi^(N): coefficients frozen at Psi^(N)(x, jT/N) on [jT/N, (j+1)T/N).
    Returned on the pair's grid, (n_x, n_steps + 1, p)."""
    if N < 1:
        raise ConfigError(f"N must be at least 1, got {N}")
    coefficients = flow_spec.coefficients
    if pair.dim != coefficients.noise_dim:
        raise DimensionMismatch(f"pair has dimension {pair.dim}, flow noise has {coefficients.noise_dim}")
    x0 = as_lattice(x0, coefficients.state_dim)
    grid = pair.grid
    d = pair.dim
    horizon = grid.horizon
    s = np.linspace(0.0, horizon, N + 1)
    F, G = pair.f, pair.g
    F_s, G_s = interpolate_cumulative(F, grid, s), interpolate_cumulative(G, grid, s)

    def advance(x, dt, dF, dG):
        return (
            x
            + coefficients.b(x) * dt[..., None]
            + np.einsum("...pd,...d->...p", coefficients.sigma(x), dF)
            + sym_inner(coefficients.h(x), dG[..., None, :], d)
        )

    knots = np.empty((N + 1,) + x0.shape)
    knots[0] = x0
    for j in range(N):
        knots[j + 1] = advance(knots[j], np.asarray(s[j + 1] - s[j]), F_s[j + 1] - F_s[j], G_s[j + 1] - G_s[j])
        check_finite(knots[j + 1], x0, s[j + 1])

    t = grid.times
    j = np.clip(np.floor(t * N / horizon + 1e-9).astype(int), 0, N - 1)
    frozen = knots[j]  # (n_steps + 1, n_x, p)
    out = advance(frozen, (t - s[j])[:, None], (F - F_s[j])[:, None, :], (G - G_s[j])[:, None, :])
    return np.moveaxis(out, 0, 1)


class IntegralMap:
    """Psi(f, g) = x0 + f: the map behind Z^eps = sqrt(eps) B."""

    name = "integral"

    def __init__(self, dim: int, x0: Optional[np.ndarray] = None):
        self.state_dim = dim
        self.noise_dim = dim
        self.x0 = np.zeros(dim) if x0 is None else np.asarray(x0, dtype=float).reshape(dim)

    def __call__(self, f_dot: np.ndarray, g_dot: np.ndarray, grid: TimeGrid) -> np.ndarray:
        zeros = np.zeros(f_dot.shape[:-2] + (1, self.state_dim))
        return self.x0 + np.concatenate([zeros, np.cumsum(f_dot * grid.dt, axis=-2)], axis=-2)

    def warm_start(self, path: np.ndarray, grid: TimeGrid, g_diag: np.ndarray) -> np.ndarray:
        return np.diff(path, axis=0) / grid.dt


class FlowMap:
    """Psi(f, g) from the skeleton ODE of a flow, started at x0."""

    def __init__(self, flow_spec: FlowSpec, x0: np.ndarray):
        self.flow_spec = flow_spec
        self.name = f"flow[{flow_spec.name}]"
        self.state_dim = flow_spec.state_dim
        self.noise_dim = flow_spec.noise_dim
        self.x0 = np.asarray(x0, dtype=float).reshape(self.state_dim)

    def __call__(self, f_dot: np.ndarray, g_dot: np.ndarray, grid: TimeGrid) -> np.ndarray:
        batch = f_dot.shape[:-2]
        f_flat = f_dot.reshape((-1,) + f_dot.shape[-2:])
        g_flat = g_dot.reshape((-1,) + g_dot.shape[-2:])
        x0 = np.broadcast_to(self.x0, (f_flat.shape[0], self.state_dim))
        out = integrate_rk4(self.flow_spec.coefficients, x0, f_flat, g_flat, grid)
        return out.reshape(batch + out.shape[1:])

    def warm_start(self, path: np.ndarray, grid: TimeGrid, g_diag: np.ndarray) -> np.ndarray:
        """f' = sigma(y)^+ (y' - b(y) - h(y) . g') at left points."""
        coefficients = self.flow_spec.coefficients
        d = self.noise_dim
        y = path[:-1]
        y_dot = np.diff(path, axis=0) / grid.dt
        g_dot = np.zeros((grid.n_steps, packed_size(d)))
        g_dot[:, diagonal_positions(d)] = g_diag
        residual = y_dot - coefficients.b(y) - sym_inner(coefficients.h(y), g_dot[:, None, :], d)
        return np.einsum("kdp,kp->kd", np.linalg.pinv(coefficients.sigma(y)), residual)


SkeletonMap = Union[IntegralMap, FlowMap]


@dataclass(frozen=True, eq=False)
class PathTarget:
    """Whole-path target y on the grid, (n_steps + 1, p)."""

    path: np.ndarray

    def distance2(self, psi: np.ndarray) -> np.ndarray:
        return np.mean(np.sum((psi[..., 1:, :] - self.path[1:]) ** 2, axis=-1), axis=-1)

    def sup_distance(self, psi: np.ndarray) -> np.ndarray:
        return np.max(np.linalg.norm(psi - self.path, axis=-1), axis=-1)

    def reference_path(self, grid: TimeGrid, x0: np.ndarray) -> np.ndarray:
        if self.path.shape[0] != grid.n_steps + 1:
            raise DimensionMismatch(f"target has {self.path.shape[0]} points, grid has {grid.n_steps + 1}")
        return self.path


@dataclass(frozen=True, eq=False)
class TerminalTarget:
    """Terminal-state target Psi(f, g)(T) = y."""

    value: np.ndarray

    def distance2(self, psi: np.ndarray) -> np.ndarray:
        return np.sum((psi[..., -1, :] - self.value) ** 2, axis=-1)

    def sup_distance(self, psi: np.ndarray) -> np.ndarray:
        return np.linalg.norm(psi[..., -1, :] - self.value, axis=-1)

    def reference_path(self, grid: TimeGrid, x0: np.ndarray) -> np.ndarray:
        w = (grid.times / grid.horizon)[:, None]
        return (1.0 - w) * np.asarray(x0, dtype=float) + w * np.asarray(self.value, dtype=float)

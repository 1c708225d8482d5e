# paths.py
"""Controlled simulation of G-Brownian motion under P_theta.

Paths are generated in fixed blocks of BLOCK_SIZE. Block b draws its normals
from a Philox counter-based generator keyed by (seed, b), path-major, so path i
only depends on (seed, i, step) and never on how blocks are spread over workers.
"""
import logging
from dataclasses import dataclass
from typing import Callable, List, Optional, Tuple, TypeVar, Union

import numpy as np

from ..errors.errors import DimensionMismatch
from ..models.controls import ControlPolicy, DriftControl, DriftKind
from ..models.model import (
    TimeGrid,
    UncertaintySet,
    diagonal_positions,
    g_eval_packed,
    sym_inner,
    sym_unpack,
)
from ..session import get_pool

logger = logging.getLogger(__name__)

BLOCK_SIZE = 4096
SEED_MASK = (1 << 64) - 1

T = TypeVar("T")


@dataclass(frozen=True, eq=False)
class PathBundle:
    grid: TimeGrid
    uncertainty: UncertaintySet
    B: np.ndarray  # (n_paths, n_steps + 1, d)
    QV: np.ndarray  # (n_paths, n_steps + 1, d(d+1)/2), packed upper triangle
    seed: int

    @property
    def n_paths(self) -> int:
        return self.B.shape[0]

    @property
    def dim(self) -> int:
        return self.uncertainty.dim

    @property
    def dB(self) -> np.ndarray:
        return np.diff(self.B, axis=1)

    @property
    def dQV(self) -> np.ndarray:
        return np.diff(self.QV, axis=1)

    def with_states(self, states: np.ndarray) -> "PathBundle":
        return PathBundle(self.grid, self.uncertainty, states, self.QV, self.seed)

    def take(self, order: np.ndarray) -> "PathBundle":
        return PathBundle(self.grid, self.uncertainty, self.B[order], self.QV[order], self.seed)

    @classmethod
    def empty(cls, grid: TimeGrid, S: UncertaintySet, seed: int) -> "PathBundle":
        return cls(
            grid, S,
            np.zeros((0, grid.n_steps + 1, S.dim)),
            np.zeros((0, grid.n_steps + 1, S.packed_dim)),
            seed,
        )

    @classmethod
    def concat(cls, bundles: List["PathBundle"]) -> "PathBundle":
        first = bundles[0]
        return cls(
            first.grid, first.uncertainty,
            np.concatenate([b.B for b in bundles], axis=0),
            np.concatenate([b.QV for b in bundles], axis=0),
            first.seed,
        )


@dataclass(frozen=True, eq=False)
class GirsanovAccumulator:
    log_density: np.ndarray  # (n_paths, n_steps + 1), log E_t^eta
    h: np.ndarray  # (n_paths, n_steps + 1), H_t^G(eta)

    @property
    def density(self) -> np.ndarray:
        return np.exp(self.log_density[:, -1])


def block_generator(seed: int, block: int) -> np.random.Generator:
    key = (int(seed) & SEED_MASK) | (int(block) << 64)
    return np.random.Generator(np.random.Philox(key=key))


def _check_dimensions(S: UncertaintySet, policy: Optional[ControlPolicy] = None, eta: Optional[DriftControl] = None):
    if policy is not None and policy.dim != S.dim:
        raise DimensionMismatch(f"policy {policy.name} has dimension {policy.dim}, expected {S.dim}")
    if eta is not None and eta.dim != S.dim:
        raise DimensionMismatch(f"drift {eta.name} has dimension {eta.dim}, expected {S.dim}")


def _simulate_block(
    S: UncertaintySet,
    grid: TimeGrid,
    policy: ControlPolicy,
    eta: Optional[DriftControl],
    n_paths: int,
    seed: int,
    block: int,
) -> Tuple[PathBundle, Optional[PathBundle]]:
    start = block * BLOCK_SIZE
    count = min(BLOCK_SIZE, n_paths - start)
    d, n = S.dim, grid.n_steps
    xi = block_generator(seed, block).standard_normal((count, n, d))
    times = grid.times
    dt = grid.dt
    sqrt_dt = np.sqrt(dt)
    diag_pos = diagonal_positions(d)

    B = np.zeros((count, n + 1, d))
    QV = np.zeros((count, n + 1, S.packed_dim))
    shifted = np.zeros_like(B) if eta is not None else None
    # feedback volatility reads the shifted path when a drift is applied
    observed = shifted if eta is not None else B

    for k in range(n):
        theta = policy.at(k, times[k], observed)
        policy.check(theta, S, k, offset=start)
        dq = np.clip(theta * theta * dt, S.sigma_lo2 * dt, S.sigma_hi2 * dt)
        dB = theta * xi[:, k] * sqrt_dt
        B[:, k + 1] = B[:, k] + dB
        QV[:, k + 1] = QV[:, k]
        QV[:, k + 1, diag_pos] += dq
        if eta is not None:
            drift = eta.at(k, times[k], shifted)
            shifted[:, k + 1] = shifted[:, k] + dB + dq * drift

    bundle = PathBundle(grid, S, B, QV, seed)
    return bundle, (bundle.with_states(shifted) if eta is not None else None)


def map_blocks(
    fn: Callable[[PathBundle, Optional[PathBundle]], T],
    S: UncertaintySet,
    grid: TimeGrid,
    policy: ControlPolicy,
    n_paths: int,
    seed: int,
    eta: Optional[DriftControl] = None,
    workers: Optional[int] = None,
) -> List[T]:
    """Simulate block by block and apply fn to each block; results in block order."""
    _check_dimensions(S, policy, eta)
    n_blocks = -(-n_paths // BLOCK_SIZE)

    def task(block: int) -> T:
        return fn(*_simulate_block(S, grid, policy, eta, n_paths, seed, block))

    if n_blocks <= 1 or workers == 1:
        return [task(block) for block in range(n_blocks)]
    with get_pool(workers) as pool:
        return list(pool.map(task, range(n_blocks)))


def simulate(
    S: UncertaintySet,
    grid: TimeGrid,
    policy: ControlPolicy,
    n_paths: int,
    seed: int,
    workers: Optional[int] = None,
) -> PathBundle:
    """Euler scheme B_{k+1} = B_k + theta_k xi_k sqrt(dt), <B>_{k+1} = <B>_k + theta_k theta_k^T dt."""
    if n_paths == 0:
        _check_dimensions(S, policy)
        return PathBundle.empty(grid, S, seed)
    bundles = map_blocks(lambda bundle, _: bundle, S, grid, policy, n_paths, seed, workers=workers)
    return PathBundle.concat(bundles)


def simulate_shifted(
    S: UncertaintySet,
    grid: TimeGrid,
    policy: ControlPolicy,
    eta: DriftControl,
    n_paths: int,
    seed: int,
    workers: Optional[int] = None,
) -> Tuple[PathBundle, PathBundle]:
    """Joint simulation of (B, <B>) and B^eta; feedback controls read B^eta."""
    if n_paths == 0:
        _check_dimensions(S, policy, eta)
        empty = PathBundle.empty(grid, S, seed)
        return empty, empty
    pairs = map_blocks(lambda bundle, shifted: (bundle, shifted), S, grid, policy, n_paths, seed, eta, workers)
    return (
        PathBundle.concat([pair[0] for pair in pairs]),
        PathBundle.concat([pair[1] for pair in pairs]),
    )


def drift_shift(bundle: PathBundle, eta: DriftControl) -> PathBundle:
    """B^eta_{k+1} = B^eta_k + dB_k + d<B>_k eta(t_k, B^eta_k)."""
    _check_dimensions(bundle.uncertainty, eta=eta)
    if eta.kind == DriftKind.DETERMINISTIC and not np.any(eta.steps):
        return bundle
    times = bundle.grid.times
    dB = bundle.dB
    dQV = sym_unpack(bundle.dQV, bundle.dim)
    shifted = np.zeros_like(bundle.B)
    for k in range(bundle.grid.n_steps):
        drift = eta.at(k, times[k], shifted)
        shifted[:, k + 1] = shifted[:, k] + dB[:, k] + np.einsum("nij,nj->ni", dQV[:, k], drift)
    return bundle.with_states(shifted)


def _eta_along(eta: DriftControl, bundle: PathBundle) -> np.ndarray:
    _check_dimensions(bundle.uncertainty, eta=eta)
    times = bundle.grid.times
    if eta.kind == DriftKind.DETERMINISTIC:
        return np.broadcast_to(eta.steps[None], (bundle.n_paths,) + eta.steps.shape)
    values = np.empty((bundle.n_paths, bundle.grid.n_steps, bundle.dim))
    for k in range(bundle.grid.n_steps):
        values[:, k] = eta.at(k, times[k], bundle.B)
    return values


def _quadratic_increments(eta_values: np.ndarray, bundle: PathBundle) -> np.ndarray:
    dQV = sym_unpack(bundle.dQV, bundle.dim)
    return 0.5 * np.einsum("nki,nkij,nkj->nk", eta_values, dQV, eta_values)


def h_functional(eta: DriftControl, bundle: PathBundle) -> np.ndarray:
    """H_T^G(eta) per path, with eta evaluated along bundle.B."""
    if bundle.n_paths == 0:
        return np.zeros(0)
    return np.sum(_quadratic_increments(_eta_along(eta, bundle), bundle), axis=1)


def stochastic_integral(eta: DriftControl, bundle: PathBundle, along: Optional[PathBundle] = None) -> np.ndarray:
    """Left-point sum_k eta(t_k) . dB_k, eta evaluated along `along` (default: bundle)."""
    source = along if along is not None else bundle
    if bundle.n_paths == 0:
        return np.zeros(0)
    return np.einsum("nki,nki->n", _eta_along(eta, source), bundle.dB)


def girsanov_accumulator(eta: DriftControl, bundle: PathBundle) -> GirsanovAccumulator:
    values = _eta_along(eta, bundle)
    h_steps = _quadratic_increments(values, bundle)
    log_steps = np.einsum("nki,nki->nk", values, bundle.dB) - h_steps
    zeros = np.zeros((bundle.n_paths, 1))
    return GirsanovAccumulator(
        log_density=np.concatenate([zeros, np.cumsum(log_steps, axis=1)], axis=1),
        h=np.concatenate([zeros, np.cumsum(h_steps, axis=1)], axis=1),
    )


def girsanov_density(eta: DriftControl, bundle: PathBundle) -> np.ndarray:
    """E_T^eta per path, accumulated in log space."""
    return girsanov_accumulator(eta, bundle).density


SymProcess = Union[np.ndarray, Callable[[int, float, np.ndarray], np.ndarray]]


def compensator_path(eta_sym: SymProcess, bundle: PathBundle) -> np.ndarray:
    """M_{t_k} = sum_{j<k} [2 G(eta_j) dt - (eta_j, d<B>_j)] per path.

    eta_sym is packed symmetric per step: (n_steps, m), (n_paths, n_steps, m)
    or a feedback (k, t_k, path) -> (n_paths, m).
    """
    S = bundle.uncertainty
    n, n_steps = bundle.n_paths, bundle.grid.n_steps
    if callable(eta_sym):
        times = bundle.grid.times
        values = np.stack([np.broadcast_to(eta_sym(k, times[k], bundle.B), (n, S.packed_dim)) for k in range(n_steps)], axis=1)
    else:
        values = np.broadcast_to(np.asarray(eta_sym, dtype=float), (n, n_steps, S.packed_dim))
    increments = 2.0 * g_eval_packed(values, S) * bundle.grid.dt - sym_inner(values, bundle.dQV, S.dim)
    return np.concatenate([np.zeros((n, 1)), np.cumsum(increments, axis=1)], axis=1)


def mean_and_se(values: np.ndarray) -> Tuple[float, float]:
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        return float("nan"), float("nan")
    se = float(np.std(values, ddof=1) / np.sqrt(values.size)) if values.size > 1 else 0.0
    return float(np.mean(values)), se

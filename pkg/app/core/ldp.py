# ldp.py
"""Rate functions, small-noise G-SDE flows, capacities and their eps-asymptotics."""
import logging
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import stats

from ..errors.errors import ConfigError, DimensionMismatch, InsufficientPoints
from ..models.controls import ControlPolicy
from ..models.flow import FlowCoefficients, FlowSpec, SkeletonPair
from ..models.model import TimeGrid, UncertaintySet, diagonal_positions, sym_inner
from ..session import get_pool
from .optimize import OptimizerConfig, OptimizeResult, best_of, box_projection, minimize_box, multi_start
from .paths import PathBundle, map_blocks, mean_and_se
from .pde import BoundaryPolicy, PdeGrid, solve_gheat
from .skeleton import (
    PathTarget,
    SkeletonMap,
    TerminalTarget,
    check_finite,
    as_lattice,
    rate_J,
    rate_J_arrays,
    skeleton_euler,
    skeleton_ode,
)

logger = logging.getLogger(__name__)

DEFAULT_PENALTIES = (1e1, 1e3, 1e5)
FEASIBILITY_TOL = 1e-3

Event = Callable[[np.ndarray], np.ndarray]
QvFunctional = Callable[[np.ndarray], np.ndarray]
Target = Union[PathTarget, TerminalTarget]


@dataclass
class RateResult:
    value: float
    argmin: SkeletonPair
    objective: float
    distance: float
    iterations: int
    converged: bool
    gradient_norm: float
    starts: List[Tuple[float, float, bool]] = field(default_factory=list)  # (J, objective, converged)
    trace: List[float] = field(default_factory=list)


def _split(z: np.ndarray, n: int, d: int) -> Tuple[np.ndarray, np.ndarray]:
    f_dot = z[..., : n * d].reshape(z.shape[:-1] + (n, d))
    g_diag = z[..., n * d:].reshape(z.shape[:-1] + (n, d))
    return f_dot, g_diag


def _packed(g_diag: np.ndarray, d: int) -> np.ndarray:
    out = np.zeros(g_diag.shape[:-1] + (d * (d + 1) // 2,))
    out[..., diagonal_positions(d)] = g_diag
    return out


def rate_I(
    target: Target,
    skeleton_map: SkeletonMap,
    S: UncertaintySet,
    grid: TimeGrid,
    config: OptimizerConfig = OptimizerConfig(),
    penalties: Sequence[float] = DEFAULT_PENALTIES,
    feasibility_tol: float = FEASIBILITY_TOL,
    seed: int = 0,
    extra_starts: Sequence[SkeletonPair] = (),
    workers: Optional[int] = None,
) -> RateResult:
    """inf J(f, g) subject to Psi(f, g) = target, by penalized L-BFGS-B over the box.

    Each start runs through the penalty continuation; starts are warm-started
    from f' solving the skeleton equation along the target's reference path.
    """
    d, n = S.dim, grid.n_steps
    if skeleton_map.noise_dim != d:
        raise DimensionMismatch(f"map noise dimension {skeleton_map.noise_dim} does not match {d}")
    lo = np.concatenate([np.full(n * d, -np.inf), np.full(n * d, S.sigma_lo2)])
    hi = np.concatenate([np.full(n * d, np.inf), np.full(n * d, S.sigma_hi2)])
    box = box_projection(lo, hi)

    def objective(penalty: float):
        def f(z):
            f_dot, g_diag = _split(z, n, d)
            # difference stencils may step past the box; J stays finite there
            g_diag = np.clip(g_diag, S.sigma_lo2, S.sigma_hi2)
            psi = skeleton_map(f_dot, _packed(g_diag, d), grid)
            return rate_J_arrays(f_dot, g_diag, grid.dt, S) + penalty * target.distance2(psi)
        return f

    reference = target.reference_path(grid, skeleton_map.x0)
    rng = np.random.default_rng(seed)
    g_starts = [np.full((n, d), S.sigma_hi2), np.full((n, d), S.sigma_lo2), np.full((n, d), 0.5 * (S.sigma_lo2 + S.sigma_hi2))]
    while len(g_starts) < config.n_starts:
        g_starts.append(rng.uniform(S.sigma_lo2, S.sigma_hi2, size=(n, d)))
    starts = [np.concatenate([skeleton_map.warm_start(reference, grid, g).ravel(), g.ravel()]) for g in g_starts[: config.n_starts]]
    starts += [np.concatenate([pair.f_dot.ravel(), pair.g_diag.ravel()]) for pair in extra_starts]

    def solve(z0: np.ndarray) -> OptimizeResult:
        iterations, trace, result = 0, [], None
        for penalty in penalties:
            result = minimize_box(objective(penalty), z0, box, config)
            iterations += result.iterations
            trace.extend(result.trace)
            z0 = result.x
        result.iterations, result.trace = iterations, trace
        return result

    if workers == 1:
        results = [solve(z0) for z0 in starts]
    else:
        with get_pool(workers) as pool:
            results = list(pool.map(solve, starts))

    summaries = []
    for result in results:
        f_dot, g_diag = _split(result.x, n, d)
        summaries.append((float(rate_J_arrays(f_dot, g_diag, grid.dt, S)), result.value, result.converged))
    best = best_of(results)
    f_dot, g_diag = _split(best.x, n, d)
    pair = SkeletonPair.from_diagonal(grid, f_dot, g_diag)
    psi = skeleton_map(f_dot[None], _packed(g_diag, d)[None], grid)[0]
    distance = float(target.sup_distance(psi))
    converged = bool(best.converged and distance <= feasibility_tol)
    value = rate_J(pair, S)
    if not converged:
        logger.warning(
            "rate_I on %s not converged: distance %.3g, projected gradient %.3g", skeleton_map.name, distance, best.gradient_norm
        )
    logger.info("rate_I on %s: J = %.6g over %d starts", skeleton_map.name, value, len(results))
    return RateResult(value, pair, best.value, distance, best.iterations, converged, best.gradient_norm, summaries, best.trace)


def integral_rate(target: Target, S: UncertaintySet, grid: TimeGrid, x0: np.ndarray) -> float:
    """Closed form of I under the integral map: g' = sigma_hi^2 everywhere, so
    I(y) = 1/(2 sigma_hi^2) int |y'|^2 dt, the straight line for terminal targets."""
    path = target.reference_path(grid, x0)
    velocity = np.diff(path, axis=0) / grid.dt
    return float(0.5 * np.sum(velocity ** 2) * grid.dt / S.sigma_hi2)


@dataclass(frozen=True, eq=False)
class FlowPaths:
    grid: TimeGrid
    x0: np.ndarray  # (n_x, p)
    X: np.ndarray  # (n_paths, n_x, n_steps + 1, p)


def euler_flow(coefficients: FlowCoefficients, eps: float, bundle: PathBundle, x0: np.ndarray) -> np.ndarray:
    """X_{k+1} = X_k + b(X_k)dt + sqrt(eps) sigma(X_k)dB_k + h(X_k).d<B>_k; (n_paths, n_x, n_steps + 1, p)."""
    n, dt = bundle.grid.n_steps, bundle.grid.dt
    d = bundle.dim
    if coefficients.noise_dim != d:
        raise DimensionMismatch(f"flow noise dimension {coefficients.noise_dim} does not match {d}")
    times = bundle.grid.times
    dB, dQV = bundle.dB, bundle.dQV
    scale = np.sqrt(eps)
    x = np.broadcast_to(x0, (bundle.n_paths,) + x0.shape).copy()
    out = np.empty((bundle.n_paths, x0.shape[0], n + 1, x0.shape[-1]))
    out[:, :, 0] = x
    for k in range(n):
        x = (
            x
            + coefficients.b(x) * dt
            + scale * np.einsum("nxpd,nd->nxp", coefficients.sigma(x), dB[:, k])
            + sym_inner(coefficients.h(x), dQV[:, k][:, None, None, :], d)
        )
        check_finite(np.moveaxis(x, 1, 0), x0, times[k + 1])
        out[:, :, k + 1] = x
    return out


def gsde_solve(
    flow_spec: FlowSpec,
    S: UncertaintySet,
    grid: TimeGrid,
    policy: ControlPolicy,
    x0: np.ndarray,
    n_paths: int,
    seed: int,
    workers: Optional[int] = None,
) -> FlowPaths:
    x0 = as_lattice(x0, flow_spec.state_dim)
    coefficients = flow_spec.at_eps()
    blocks = map_blocks(
        lambda bundle, _: euler_flow(coefficients, flow_spec.eps, bundle, x0), S, grid, policy, n_paths, seed, workers=workers
    )
    X = np.concatenate(blocks) if blocks else np.zeros((0, x0.shape[0], grid.n_steps + 1, x0.shape[-1]))
    return FlowPaths(grid, x0, X)


@dataclass(frozen=True)
class PolicyFrequency:
    policy: str
    frequency: float
    se: float
    hits: int
    censored: bool


@dataclass(frozen=True)
class CapacityEstimate:
    value: float
    se: float
    policy: str
    censored: bool
    n_paths: int
    per_policy: Tuple[PolicyFrequency, ...]


def capacity_estimate(
    event: Event,
    flow_spec: FlowSpec,
    S: UncertaintySet,
    grid: TimeGrid,
    policies: Sequence[ControlPolicy],
    n_paths: int,
    seed: int,
    x0: Optional[np.ndarray] = None,
    workers: Optional[int] = None,
) -> CapacityEstimate:
    """max over policies of the event frequency along X(x0, .); blocks are streamed.

    Zero hits are censored to 1/(2 n_paths) and flagged.
    """
    if n_paths < 1:
        raise ConfigError("capacity estimation needs at least one path")
    x0 = as_lattice(np.zeros(flow_spec.state_dim) if x0 is None else x0, flow_spec.state_dim)[:1]
    coefficients = flow_spec.at_eps()

    def block_hits(bundle, _):
        return int(np.count_nonzero(event(euler_flow(coefficients, flow_spec.eps, bundle, x0)[:, 0])))

    rows = []
    for policy in policies:
        hits = sum(map_blocks(block_hits, S, grid, policy, n_paths, seed, workers=workers))
        censored = hits == 0
        frequency = hits / n_paths if not censored else 0.5 / n_paths
        se = float(np.sqrt(frequency * (1.0 - frequency) / n_paths))
        if censored:
            logger.warning("event has no hits under %s with %d paths (eps=%g); censored at %.3g", policy.name, n_paths, flow_spec.eps, frequency)
        rows.append(PolicyFrequency(policy.name, frequency, se, hits, censored))

    observed = [row for row in rows if not row.censored]
    best = max(observed or rows, key=lambda row: row.frequency)
    return CapacityEstimate(best.frequency, best.se, best.policy, best.censored, n_paths, tuple(rows))


@dataclass(frozen=True)
class SlopeReport:
    eps: Tuple[float, ...]
    capacities: Tuple[CapacityEstimate, ...]
    used: Tuple[float, ...]
    slope: float
    intercept: float
    stderr: float
    reference: Optional[float]
    relative_deviation: Optional[float]


def fit_slope(eps_list: Sequence[float], capacities: Sequence[CapacityEstimate], reference: Optional[float] = None) -> SlopeReport:
    """Least squares of log c against 1/eps over the uncensored points."""
    if len(eps_list) < 3:
        raise InsufficientPoints(f"need at least 3 eps values, got {len(eps_list)}")
    used = []
    for eps, capacity in zip(eps_list, capacities):
        if capacity.censored:
            logger.warning("dropping eps=%g: no hits under any policy (MC floor)", eps)
            continue
        used.append((eps, capacity.value))
    if len(used) < 2:
        raise InsufficientPoints(f"only {len(used)} eps values left after dropping censored capacities")
    x = np.array([1.0 / eps for eps, _ in used])
    y = np.log([c for _, c in used])
    fit = stats.linregress(x, y)
    deviation = None
    if reference is not None and reference != 0:
        deviation = float(abs(fit.slope - reference) / abs(reference))
    return SlopeReport(
        tuple(eps_list), tuple(capacities), tuple(eps for eps, _ in used),
        float(fit.slope), float(fit.intercept), float(fit.stderr), reference, deviation,
    )


def ldp_slope(
    event: Event,
    flow_spec: FlowSpec,
    S: UncertaintySet,
    grid: TimeGrid,
    policies: Sequence[ControlPolicy],
    eps_list: Sequence[float],
    n_paths: int,
    seed: int,
    rate: Optional[float] = None,
    x0: Optional[np.ndarray] = None,
    workers: Optional[int] = None,
) -> SlopeReport:
    """Capacity per eps and the fitted slope, compared with -rate when given."""
    if len(eps_list) < 3:
        raise InsufficientPoints(f"need at least 3 eps values, got {len(eps_list)}")
    capacities = []
    for eps in eps_list:
        capacity = capacity_estimate(event, flow_spec.with_eps(eps), S, grid, policies, n_paths, seed, x0, workers)
        logger.info("eps=%g: capacity %.4g (%s)", eps, capacity.value, capacity.policy)
        capacities.append(capacity)
    return fit_slope(eps_list, capacities, -rate if rate is not None else None)


@dataclass(frozen=True)
class QvResult:
    mc_sup: float
    mc_se: float
    mc_policy: str
    det_sup: float
    det_argmax: np.ndarray  # g' diagonal, (n_steps, d)
    per_policy: Tuple[Tuple[str, float, float], ...]


def worst_case_qv(
    upsilon: QvFunctional,
    S: UncertaintySet,
    grid: TimeGrid,
    policies: Sequence[ControlPolicy],
    n_paths: int,
    seed: int,
    config: OptimizerConfig = OptimizerConfig(),
    workers: Optional[int] = None,
) -> QvResult:
    """E^G(Upsilon(<B>)) twice: MC over policies and sup over deterministic g in A.

    `upsilon` maps packed quadratic-variation paths (..., n_steps + 1, m) to (...).
    """
    d, n = S.dim, grid.n_steps
    per_policy = []
    for policy in policies:
        values = np.concatenate(map_blocks(lambda bundle, _: upsilon(bundle.QV), S, grid, policy, n_paths, seed, workers=workers))
        mean, se = mean_and_se(values)
        per_policy.append((policy.name, mean, se))
    mc_best = max(per_policy, key=lambda row: row[1])

    def negative(z):
        g_dot = _packed(z.reshape(z.shape[:-1] + (n, d)), d)
        zeros = np.zeros(g_dot.shape[:-2] + (1, g_dot.shape[-1]))
        return -upsilon(np.concatenate([zeros, np.cumsum(g_dot * grid.dt, axis=-2)], axis=-2))

    rng = np.random.default_rng(seed)
    starts = [np.full(n * d, S.sigma_hi2), np.full(n * d, S.sigma_lo2), np.full(n * d, 0.5 * (S.sigma_lo2 + S.sigma_hi2))]
    while len(starts) < config.n_starts:
        starts.append(rng.uniform(S.sigma_lo2, S.sigma_hi2, size=n * d))
    box = box_projection(np.full(n * d, S.sigma_lo2), np.full(n * d, S.sigma_hi2))
    best = best_of(multi_start(negative, starts[: config.n_starts], box, config, workers))
    return QvResult(
        mc_best[1], mc_best[2], mc_best[0], -best.value, best.x.reshape(n, d), tuple(per_policy)
    )


@dataclass(frozen=True)
class LaplaceRow:
    eps: float
    lhs: float
    rhs: float
    deviation: float


def laplace_principle(
    phi: Callable[[np.ndarray], np.ndarray],
    bound: float,
    eps_list: Sequence[float],
    S: UncertaintySet,
    horizon: float,
    dx: float = 0.01,
    half_width: float = 3.0,
    boundary: BoundaryPolicy = BoundaryPolicy.CLAMP,
) -> List[LaplaceRow]:
    """eps log E^G(exp(phi(sqrt(eps) B_T) / eps)) against sup_y {phi(y) - I(y)}.

    sqrt(eps) B_T has the law of B_{eps T}, so the left side is one G-heat solve
    over [0, eps T]; I(y) = sum_i y_i^2 / (2 sigma_hi^2 T).
    """
    rows = []
    for eps in sorted(eps_list, reverse=True):
        grid = PdeGrid.build(S, eps * horizon, dx, half_width=half_width, boundary=boundary)
        solution = solve_gheat(lambda x: np.exp((phi(x) - bound) / eps), S, grid, (0.0, eps * horizon))
        lhs = bound + eps * float(np.log(solution.at_origin(0)))
        mesh = grid.mesh()
        rhs = float(np.max(phi(mesh) - np.sum(mesh ** 2, axis=-1) / (2.0 * S.sigma_hi2 * horizon)))
        rows.append(LaplaceRow(float(eps), lhs, rhs, abs(lhs - rhs)))
        logger.info("laplace eps=%g: lhs %.6g, rhs %.6g", eps, lhs, rhs)
    return rows


def flow_distance(psi1: np.ndarray, psi2: np.ndarray, x0: np.ndarray, n_max: int = 16) -> float:
    """rho = sum_N 2^-N min(||psi1 - psi2||_N, 1), ||.||_N the sup over |x| <= N
    on the lattice and over all grid times."""
    x0 = np.atleast_2d(x0)
    if psi1.shape != psi2.shape or psi1.shape[0] != x0.shape[0]:
        raise DimensionMismatch(f"flows {psi1.shape} and {psi2.shape} on {x0.shape[0]} points")
    radius = np.linalg.norm(x0, axis=-1)
    gap = np.max(np.linalg.norm(psi1 - psi2, axis=-1), axis=-1)  # per lattice point
    total = 0.0
    for N in range(1, n_max + 1):
        inside = radius <= N
        seminorm = float(np.max(gap[inside])) if np.any(inside) else 0.0
        total += 2.0 ** -N * min(seminorm, 1.0)
    return total


@dataclass(frozen=True)
class SkeletonErrorRow:
    N: int
    sup_error: float
    rho: float


def sample_pairs(
    grid: TimeGrid, S: UncertaintySet, count: int, h_radius: float, pieces: int = 8, seed: int = 0
) -> List[SkeletonPair]:
    """Pairs with ||f||_H <= h_radius; g' runs over the box corners, then random box paths."""
    rng = np.random.default_rng(seed)
    d, n = S.dim, grid.n_steps
    pieces = max(1, min(pieces, n))
    owner = np.minimum((np.arange(n) * pieces) // n, pieces - 1)
    corners = [np.full(d, v) for v in (S.sigma_lo2, S.sigma_hi2)]
    pairs = []
    for i in range(count):
        f_dot = rng.standard_normal((pieces, d))[owner]
        norm = np.sqrt(np.sum(f_dot ** 2) * grid.dt)
        f_dot *= h_radius * rng.uniform(0.5, 1.0) / max(norm, 1e-12)
        if i < len(corners):
            g_diag = np.tile(corners[i], (n, 1))
        else:
            g_diag = rng.uniform(S.sigma_lo2, S.sigma_hi2, size=(pieces, d))[owner]
        pairs.append(SkeletonPair.from_diagonal(grid, f_dot, g_diag))
    return pairs


def skeleton_convergence(
    flow_spec: FlowSpec, pairs: Sequence[SkeletonPair], x0: np.ndarray, N_list: Sequence[int]
) -> List[SkeletonErrorRow]:
    """sup over sampled pairs of |Psi^(N) - Psi| and of rho, per N."""
    flow_spec.check_lipschitz()
    references = [skeleton_ode(flow_spec, pair, x0) for pair in pairs]
    rows = []
    for N in N_list:
        sup_error, rho = 0.0, 0.0
        for pair, reference in zip(pairs, references):
            approx = skeleton_euler(flow_spec, pair, x0, N)
            sup_error = max(sup_error, float(np.max(np.abs(approx - reference))))
            rho = max(rho, flow_distance(approx, reference, x0))
        rows.append(SkeletonErrorRow(int(N), sup_error, rho))
        logger.info("Euler skeleton N=%d: sup error %.3g", N, sup_error)
    return rows


@dataclass(frozen=True)
class FlowMomentReport:
    constant: float
    per_policy: Tuple[Tuple[str, float], ...]
    n_paths: int


def flow_moment(
    flow_spec: FlowSpec,
    S: UncertaintySet,
    grid: TimeGrid,
    policies: Sequence[ControlPolicy],
    points: np.ndarray,
    n_paths: int,
    seed: int,
    workers: Optional[int] = None,
) -> FlowMomentReport:
    """C = max over point pairs, times and policies of E|X(x,t) - X(y,t)|^2 / |x - y|^2."""
    points = as_lattice(points, flow_spec.state_dim)
    if points.shape[0] < 2:
        raise ConfigError("flow moment needs at least two initial points")
    i, j = np.triu_indices(points.shape[0], k=1)
    scale = np.sum((points[i] - points[j]) ** 2, axis=-1)
    if np.any(scale == 0):
        raise ConfigError("flow moment initial points must be distinct")
    per_policy = []
    for policy in policies:
        X = gsde_solve(flow_spec, S, grid, policy, points, n_paths, seed, workers).X
        moment = np.mean(np.sum((X[:, i] - X[:, j]) ** 2, axis=-1), axis=0)  # (pairs, n_steps + 1)
        per_policy.append((policy.name, float(np.max(moment / scale[:, None]))))
    return FlowMomentReport(max(c for _, c in per_policy), tuple(per_policy), n_paths)

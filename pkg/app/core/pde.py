# pde.py
"""Nested G-heat equations for cylinder functionals.

Each leg l of Phi = phi(B_{t_1}, ..., B_{t_n}) is solved backward on
[t_{l-1}, t_l] with the explicit monotone scheme

    v(t - dt, x) = v(t, x) + dt * G(D^2_h v(t, x)),

applied on the last d axes of the value array. Earlier positions x_1..x_{l-1}
ride along as batch axes on the same lattice as x, and leg l takes its terminal
data from the diagonal x_l = x of leg l + 1.
"""
import logging
from dataclasses import dataclass
from enum import Enum
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np

from ..errors.errors import (
    CflViolation,
    ConfigError,
    DimensionMismatch,
    NumericalFailure,
    UnsupportedConfiguration,
)
from ..models.controls import ControlPolicy, DriftControl, DriftKind, PolicyKind, nearest_nodes
from ..models.model import CylinderFunctional, TimeGrid, UncertaintySet, g_diag

logger = logging.getLogger(__name__)

MAX_LATTICE_DIM = 3
DEFAULT_DX = 0.05
DEFAULT_CFL = 0.5
TAIL_WIDTH = 6.0

Terminal = Union[Callable[[np.ndarray], np.ndarray], np.ndarray]


class BoundaryPolicy(str, Enum):
    LINEAR_EXTRAPOLATION = "linear_extrapolation"
    CLAMP = "clamp"


@dataclass(frozen=True)
class PdeGrid:
    x_lo: Tuple[float, ...]
    x_hi: Tuple[float, ...]
    n_cells: Tuple[int, ...]
    dt: float
    boundary: BoundaryPolicy = BoundaryPolicy.LINEAR_EXTRAPOLATION

    def __post_init__(self):
        if not (len(self.x_lo) == len(self.x_hi) == len(self.n_cells)):
            raise DimensionMismatch("x_lo, x_hi and n_cells must have one entry per axis")
        if any(n < 2 for n in self.n_cells):
            raise ConfigError(f"need at least 2 cells per axis, got {self.n_cells}")
        if any(hi <= lo for lo, hi in zip(self.x_lo, self.x_hi)):
            raise ConfigError(f"empty spatial domain [{self.x_lo}, {self.x_hi}]")
        if not self.dt > 0:
            raise ConfigError(f"time step must be positive, got {self.dt}")

    @classmethod
    def build(
        cls,
        S: UncertaintySet,
        horizon: float,
        dx: float = DEFAULT_DX,
        cfl: float = DEFAULT_CFL,
        drift_bound: float = 0.0,
        half_width: Optional[float] = None,
        boundary: BoundaryPolicy = BoundaryPolicy.LINEAR_EXTRAPOLATION,
    ) -> "PdeGrid":
        """Symmetric lattice over +-(6 sigma_hi sqrt(T) + |eta| sigma_hi^2 T) with
        the origin on a node, and the largest dt allowed by `cfl`."""
        if not 0 < cfl <= 1:
            raise CflViolation(f"cfl factor must lie in (0, 1], got {cfl}")
        half = half_width or TAIL_WIDTH * S.sigma_hi * np.sqrt(horizon) + drift_bound * S.sigma_hi2 * horizon
        n_half = int(np.ceil(half / dx))
        edge = n_half * dx
        return cls(
            x_lo=(-edge,) * S.dim,
            x_hi=(edge,) * S.dim,
            n_cells=(2 * n_half,) * S.dim,
            dt=cfl * dx * dx / (S.sigma_hi2 * S.dim),
            boundary=boundary,
        )

    @property
    def dim(self) -> int:
        return len(self.n_cells)

    @property
    def dx(self) -> np.ndarray:
        return (np.asarray(self.x_hi) - np.asarray(self.x_lo)) / np.asarray(self.n_cells)

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(n + 1 for n in self.n_cells)

    @property
    def nodes(self) -> Tuple[np.ndarray, ...]:
        out = []
        for lo, hi, n in zip(self.x_lo, self.x_hi, self.n_cells):
            axis = np.linspace(lo, hi, n + 1)
            nearest = int(np.argmin(np.abs(axis)))
            if abs(axis[nearest]) < 1e-12 * (hi - lo):
                axis[nearest] = 0.0
            out.append(axis)
        return tuple(out)

    @property
    def origin(self) -> Tuple[int, ...]:
        return tuple(int(np.argmin(np.abs(axis))) for axis in self.nodes)

    def mesh(self) -> np.ndarray:
        """Lattice points, shape (*shape, d)."""
        return np.stack(np.meshgrid(*self.nodes, indexing="ij"), axis=-1)

    def check_cfl(self, S: UncertaintySet):
        if S.dim != self.dim:
            raise DimensionMismatch(f"lattice has {self.dim} axes, uncertainty set has dimension {S.dim}")
        ratios = S.sigma_hi2 * self.dt / self.dx ** 2
        if np.any(ratios > 0.5 + 1e-12) or np.sum(ratios) > 1.0 + 1e-12:
            raise CflViolation(
                f"sigma_hi^2 dt / dx^2 = {np.round(ratios, 6).tolist()} (need <= 0.5 per axis, <= 1 summed)"
            )

    def refine(self) -> "PdeGrid":
        """Halve dx and quarter dt; keeps the CFL ratios."""
        return PdeGrid(self.x_lo, self.x_hi, tuple(2 * n for n in self.n_cells), self.dt / 4, self.boundary)


def _axis_view(v: np.ndarray, axis: int) -> np.ndarray:
    return np.moveaxis(v, axis, 0)


def _apply_boundary(v: np.ndarray, grid: PdeGrid):
    for i in range(grid.dim):
        w = _axis_view(v, v.ndim - grid.dim + i)
        if grid.boundary == BoundaryPolicy.LINEAR_EXTRAPOLATION:
            w[0] = 2.0 * w[1] - w[2]
            w[-1] = 2.0 * w[-2] - w[-3]
        else:
            w[0] = w[1]
            w[-1] = w[-2]


def second_differences(v: np.ndarray, grid: PdeGrid) -> np.ndarray:
    """Centered second differences along each spatial axis, (*v.shape, d); zero on edges."""
    out = np.zeros(v.shape + (grid.dim,))
    dx = grid.dx
    for i in range(grid.dim):
        axis = v.ndim - grid.dim + i
        target = _axis_view(out[..., i], axis)
        target[1:-1] = _axis_view(np.diff(v, n=2, axis=axis), axis) / dx[i] ** 2
    return out


def flux_argmax(v: np.ndarray, grid: PdeGrid) -> np.ndarray:
    """Per-axis sign of D^2_h v (True where sigma_hi attains G); edges copy their neighbours."""
    convex = second_differences(v, grid) >= 0.0
    for i in range(grid.dim):
        w = _axis_view(convex[..., i], v.ndim - grid.dim + i)
        w[0] = w[1]
        w[-1] = w[-2]
    return convex


def gheat_step(v: np.ndarray, S: UncertaintySet, grid: PdeGrid, dt: float) -> np.ndarray:
    v_new = v + dt * g_diag(second_differences(v, grid), S)
    _apply_boundary(v_new, grid)
    return v_new


@dataclass(frozen=True, eq=False)
class GridFunction:
    """Snapshots of v at increasing knot times; values are (n_knots, *batch, *lattice)."""

    grid: PdeGrid
    times: np.ndarray
    values: np.ndarray
    convex: np.ndarray  # (n_knots, *batch, *lattice, d)

    def at_origin(self, index: int = 0) -> np.ndarray:
        return self.values[index][(Ellipsis,) + self.grid.origin]


def solve_gheat(
    terminal: Terminal,
    S: UncertaintySet,
    grid: PdeGrid,
    t_span: Tuple[float, float],
    knots: Optional[Sequence[float]] = None,
) -> GridFunction:
    """Solve d_t v + G(D^2 v) = 0 backward from v(t_span[1]) = terminal.

    `terminal` is either a callable on lattice points (..., d) -> (...) or an
    array whose last d axes are the lattice. Snapshots are kept at every knot;
    sub-steps are aligned so each knot is hit exactly.
    """
    grid.check_cfl(S)
    t0, t1 = float(t_span[0]), float(t_span[1])
    if t1 < t0:
        raise ConfigError(f"t_span must be increasing, got {t_span}")
    knot_times = np.unique(np.concatenate([[t0, t1], np.asarray(knots if knots is not None else [], dtype=float)]))
    knot_times = knot_times[(knot_times >= t0) & (knot_times <= t1)]

    v = np.asarray(terminal(grid.mesh()) if callable(terminal) else terminal, dtype=float).copy()
    if v.shape[v.ndim - grid.dim:] != grid.shape:
        raise DimensionMismatch(f"terminal shape {v.shape} does not end with lattice shape {grid.shape}")

    snapshots = [v]
    convex = [flux_argmax(v, grid)]
    for a, b in zip(knot_times[-2::-1], knot_times[:0:-1]):
        n_sub = max(1, int(np.ceil((b - a) / grid.dt - 1e-9)))
        h = (b - a) / n_sub
        for _ in range(n_sub):
            v = gheat_step(v, S, grid, h)
        if not np.all(np.isfinite(v)):
            raise NumericalFailure(f"non-finite value function at t={a:.6g}")
        snapshots.append(v)
        convex.append(flux_argmax(v, grid))
    logger.debug("solved G-heat leg [%.4g, %.4g] with %d knots", t0, t1, len(knot_times))
    return GridFunction(grid, knot_times, np.stack(snapshots[::-1]), np.stack(convex[::-1]))


@dataclass(frozen=True, eq=False)
class ValueLeg:
    leg: int  # 1-based
    k_start: int
    k_end: int
    solution: GridFunction

    @property
    def values(self) -> np.ndarray:
        return self.solution.values


@dataclass(frozen=True, eq=False)
class ValueChain:
    functional: CylinderFunctional
    uncertainty: UncertaintySet
    time_grid: TimeGrid
    grid: PdeGrid
    legs: Tuple[ValueLeg, ...]  # ascending in leg index
    exponential: bool
    shift: float = 0.0

    @property
    def boundaries(self) -> Tuple[int, ...]:
        return tuple(leg.k_end for leg in self.legs)

    def check_positive(self):
        for leg in self.legs:
            low = float(np.min(leg.values))
            if not low > 0:
                raise NumericalFailure(
                    f"value function of leg {leg.leg} reaches {low:.3g} <= 0; "
                    "check CFL and boundary settings"
                )

    def origin_value(self) -> float:
        v = float(self.legs[0].solution.at_origin(0))
        if not self.exponential:
            return v
        if not v > 0:
            raise NumericalFailure(f"nonpositive value {v:.3g} at the origin")
        return self.shift + float(np.log(v))


def lattice_terminal(functional: CylinderFunctional, grid: PdeGrid) -> np.ndarray:
    """phi on the product lattice (x_1, ..., x_n), shape lattice_shape * n."""
    n, d = functional.n_times, grid.dim
    axes = [axis for _ in range(n) for axis in grid.nodes]
    mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    return functional(mesh.reshape(-1, n, d)).reshape(mesh.shape[:-1])


def solve_chain(
    functional: CylinderFunctional,
    S: UncertaintySet,
    time_grid: TimeGrid,
    grid: PdeGrid,
    exponential: bool = False,
    shift: float = 0.0,
) -> ValueChain:
    """Solve all legs backward; terminal data is phi, or exp(phi - shift)."""
    n, d = functional.n_times, S.dim
    if n * d > MAX_LATTICE_DIM:
        raise UnsupportedConfiguration(
            f"{n} observation times in dimension {d} need a {n * d}-dimensional lattice (max {MAX_LATTICE_DIM})"
        )
    if grid.dim != d:
        raise DimensionMismatch(f"lattice has {grid.dim} axes, uncertainty set has dimension {d}")
    indices = functional.time_indices(time_grid)
    bounds = [0] + indices
    times = time_grid.times

    values = lattice_terminal(functional, grid)
    if exponential:
        values = np.exp(values - shift)

    legs: List[ValueLeg] = []
    for l in range(n, 0, -1):
        k_lo, k_hi = bounds[l - 1], bounds[l]
        solution = solve_gheat(values, S, grid, (times[k_lo], times[k_hi]), knots=times[k_lo:k_hi + 1])
        legs.append(ValueLeg(l, k_lo, k_hi, solution))
        if l > 1:
            # n > 1 implies d == 1 under the lattice budget
            values = np.array(np.diagonal(solution.values[0], axis1=-2, axis2=-1))
    logger.info(
        "solved %d-leg chain for %s on %s lattice", n, functional.name, "x".join(str(s) for s in grid.shape)
    )
    return ValueChain(functional, S, time_grid, grid, tuple(legs[::-1]), exponential, shift)


def cylinder_expectation(
    functional: CylinderFunctional,
    S: UncertaintySet,
    time_grid: TimeGrid,
    grid: Optional[PdeGrid] = None,
    exponential: bool = False,
) -> float:
    """v_1(0, 0): E^G(Phi), or log E^G(exp(Phi)) when `exponential`."""
    grid = grid or PdeGrid.build(S, time_grid.horizon)
    shift = functional.bound if exponential and functional.bounded else 0.0
    return solve_chain(functional, S, time_grid, grid, exponential, shift).origin_value()


@dataclass(frozen=True, eq=False)
class ChainTable:
    """Per-step lattice tables along the legs of a chain, evaluated on a path.

    Leg l covers steps k_{l-1} <= k < k_l and is indexed by the path at the
    earlier leg ends and by its current position; later steps return `fill`.
    Only knots k_{l-1}..k_l - 1 of a leg's table are read: at k_l the next leg
    (or `fill`) takes over.
    """

    nodes: Tuple[np.ndarray, ...]
    boundaries: Tuple[int, ...]
    tables: Tuple[np.ndarray, ...]  # per leg: (n_knots, *prefix, *lattice, d)
    dim: int
    fill: float = 0.0

    def __call__(self, k: int, t: float, path: np.ndarray) -> np.ndarray:
        start = 0
        for leg, end in enumerate(self.boundaries):
            if start <= k < end:
                coords = [path[:, j] for j in self.boundaries[:leg]] + [path[:, k]]
                idx = nearest_nodes(self.nodes * (leg + 1), np.concatenate(coords, axis=-1))
                return self.tables[leg][(k - start,) + idx]
            start = end
        return np.full((path.shape[0], self.dim), self.fill)


@dataclass(frozen=True, eq=False)
class FeedbackControl:
    """Lattice tables U_l = grad_x log v_l, zero from each leg's end on."""

    table: ChainTable
    bound: float

    @property
    def dim(self) -> int:
        return self.table.dim

    def __call__(self, k: int, t: float, path: np.ndarray) -> np.ndarray:
        return self.table(k, t, path)

    def as_drift(self, name: str = "eta_tilde") -> DriftControl:
        return DriftControl(DriftKind.MARKOV_FEEDBACK, self.dim, self.bound, name, feedback=self.table)


def _log_gradient(values: np.ndarray, grid: PdeGrid) -> np.ndarray:
    log_v = np.log(values)
    first = log_v.ndim - grid.dim
    grads = np.gradient(log_v, *grid.dx, axis=tuple(range(first, log_v.ndim)), edge_order=1)
    if grid.dim == 1:
        grads = [grads]
    return np.stack(grads, axis=-1)


def extract_feedback(chain: ValueChain) -> FeedbackControl:
    """Centered differences of log v in x (one-sided on lattice edges)."""
    if not chain.exponential:
        raise ConfigError("feedback extraction needs a chain solved with exponential terminal data")
    chain.check_positive()
    tables = tuple(_log_gradient(leg.values, chain.grid) for leg in chain.legs)
    # the knot at each leg end is never looked up
    bound = max(float(np.max(np.abs(table[:-1]), initial=0.0)) for table in tables)
    if not np.isfinite(bound):
        raise NumericalFailure("feedback table is not finite")
    logger.info("extracted feedback for %s, sup |U| = %.4g", chain.functional.name, bound)
    table = ChainTable(chain.grid.nodes, chain.boundaries, tables, chain.grid.dim)
    return FeedbackControl(table, bound)


def worst_case_policy(chain: ValueChain, name: Optional[str] = None) -> ControlPolicy:
    """Volatility feedback attaining G in the scheme flux at every lattice node."""
    S = chain.uncertainty
    tables = tuple(np.where(leg.solution.convex, S.sigma_hi, S.sigma_lo) for leg in chain.legs)
    table = ChainTable(chain.grid.nodes, chain.boundaries, tables, S.dim, fill=S.sigma_hi)
    label = name or f"worst_case[{chain.functional.name}{',exp' if chain.exponential else ''}]"
    return ControlPolicy(PolicyKind.MARKOV_FEEDBACK, S.dim, label, feedback=table)

# optimize.py
"""Box-constrained minimization with finite-difference gradients.

Objectives are batched: they map an (m, n) array of parameter vectors to (m,)
values, so a full central-difference gradient is a single call. The search is
scipy's L-BFGS-B, which projects every step onto the box.
"""
import logging
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np
from scipy.optimize import Bounds, minimize

from ..session import get_pool

logger = logging.getLogger(__name__)

Objective = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class OptimizerConfig:
    max_iter: int = 400
    gradient_tol: float = 1e-6
    value_tol: float = 1e-12
    fd_step: float = 1e-6
    max_line_search: int = 40
    memory: int = 20
    n_starts: int = 8


@dataclass
class OptimizeResult:
    x: np.ndarray
    value: float
    iterations: int
    converged: bool
    gradient_norm: float
    trace: List[float] = field(default_factory=list)


@dataclass(frozen=True)
class Box:
    """Componentwise bounds; infinite entries leave a coordinate free."""

    lo: np.ndarray
    hi: np.ndarray

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return np.clip(x, self.lo, self.hi)

    @property
    def bounds(self) -> Bounds:
        return Bounds(self.lo, self.hi)


def box_projection(lo: np.ndarray, hi: np.ndarray) -> Box:
    return Box(np.asarray(lo, dtype=float), np.asarray(hi, dtype=float))


def evaluate(f: Objective, x: np.ndarray) -> float:
    return float(f(x[None, :])[0])


def fd_gradient(f: Objective, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central differences, all 2n evaluations in one batched call."""
    n = x.size
    offsets = h * np.eye(n)
    values = f(np.concatenate([x + offsets, x - offsets], axis=0))
    return (values[:n] - values[n:]) / (2.0 * h)


def projected_gradient_norm(x: np.ndarray, g: np.ndarray, box: Box) -> float:
    return float(np.linalg.norm(x - box(x - g)))


def minimize_box(f: Objective, x0: np.ndarray, box: Box, config: OptimizerConfig = OptimizerConfig()) -> OptimizeResult:
    """L-BFGS-B from box(x0); the projected gradient norm decides convergence."""
    x0 = box(np.asarray(x0, dtype=float))
    trace = [evaluate(f, x0)]

    def record(xk):
        trace.append(evaluate(f, xk))

    result = minimize(
        lambda x: evaluate(f, x),
        x0,
        jac=lambda x: fd_gradient(f, x, config.fd_step),
        method="L-BFGS-B",
        bounds=box.bounds,
        callback=record,
        options={
            "maxiter": config.max_iter,
            "gtol": config.gradient_tol,
            "ftol": config.value_tol,
            "maxls": config.max_line_search,
            "maxcor": config.memory,
        },
    )
    x = box(result.x)
    value = evaluate(f, x)
    pg_norm = projected_gradient_norm(x, fd_gradient(f, x, config.fd_step), box)
    converged = pg_norm <= config.gradient_tol or (bool(result.success) and pg_norm <= np.sqrt(config.gradient_tol))
    logger.debug("L-BFGS-B stopped after %d iterations: %s (projected gradient %.3g)", result.nit, result.message, pg_norm)
    return OptimizeResult(x, value, int(result.nit), converged, pg_norm, trace)


def multi_start(
    f: Objective,
    starts: Sequence[np.ndarray],
    box: Box,
    config: OptimizerConfig = OptimizerConfig(),
    workers: Optional[int] = None,
) -> List[OptimizeResult]:
    """Independent runs, returned in start order."""
    if workers == 1 or len(starts) <= 1:
        return [minimize_box(f, x0, box, config) for x0 in starts]
    with get_pool(workers) as pool:
        return list(pool.map(lambda x0: minimize_box(f, x0, box, config), starts))


def best_of(results: Sequence[OptimizeResult]) -> OptimizeResult:
    finite = [r for r in results if np.isfinite(r.value)]
    return min(finite or results, key=lambda r: r.value)

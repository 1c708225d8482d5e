# controls.py
from dataclasses import dataclass
from enum import Enum
from itertools import product
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from ..errors.errors import ConfigError, ControlViolation, DimensionMismatch
from .model import TimeGrid, UncertaintySet

# feedback(k, t_k, path) -> (n_paths, d); path is (n_paths, n_steps + 1, d)
# and only path[:, :k + 1] may be read.
Feedback = Callable[[int, float, np.ndarray], np.ndarray]

BOUND_TOL = 1e-12


class PolicyKind(str, Enum):
    OPEN_LOOP = "open_loop"
    MARKOV_FEEDBACK = "markov_feedback"


class DriftKind(str, Enum):
    DETERMINISTIC = "deterministic"
    MARKOV_FEEDBACK = "markov_feedback"


@dataclass(frozen=True, eq=False)
class LatticeTable:
    """Per-step values on a uniform product lattice with nearest-node lookup."""

    nodes: Tuple[np.ndarray, ...]
    values: np.ndarray  # (n_steps + 1, *lattice_shape, d_out)

    def __post_init__(self):
        shape = tuple(len(axis) for axis in self.nodes)
        if self.values.shape[1:-1] != shape:
            raise DimensionMismatch(
                f"table shape {self.values.shape} does not match lattice {shape}"
            )

    def indices(self, coords: np.ndarray) -> Tuple[np.ndarray, ...]:
        return nearest_nodes(self.nodes, coords)

    def lookup(self, k: int, coords: np.ndarray) -> np.ndarray:
        return self.values[(k,) + self.indices(coords)]


def nearest_nodes(nodes: Sequence[np.ndarray], coords: np.ndarray) -> Tuple[np.ndarray, ...]:
    """Nearest lattice index per axis, clamped at the lattice edges."""
    coords = np.atleast_2d(coords)
    out = []
    for axis, grid in enumerate(nodes):
        step = grid[1] - grid[0] if len(grid) > 1 else 1.0
        idx = np.rint((coords[:, axis] - grid[0]) / step).astype(np.int64)
        out.append(np.clip(idx, 0, len(grid) - 1))
    return tuple(out)


@dataclass(frozen=True, eq=False)
class ControlPolicy:
    """Volatility control theta in Gamma, stored as per-axis volatilities (the
    square roots of a diagonal element of Sigma)."""

    kind: PolicyKind
    dim: int
    name: str
    steps: Optional[np.ndarray] = None  # (n_steps, d)
    feedback: Optional[Feedback] = None

    def __post_init__(self):
        if self.kind == PolicyKind.OPEN_LOOP and self.steps is None:
            raise ConfigError("open-loop policy needs per-step volatilities")
        if self.kind == PolicyKind.MARKOV_FEEDBACK and self.feedback is None:
            raise ConfigError("feedback policy needs a feedback function")

    @classmethod
    def constant(cls, theta: Sequence[float], n_steps: int, name: Optional[str] = None):
        theta = np.atleast_1d(np.asarray(theta, dtype=float))
        steps = np.broadcast_to(theta, (n_steps, theta.size)).copy()
        label = name or "theta=" + ",".join(f"{v:g}" for v in theta)
        return cls(PolicyKind.OPEN_LOOP, theta.size, label, steps=steps)

    @classmethod
    def open_loop(cls, steps: np.ndarray, name: str = "open_loop"):
        steps = np.asarray(steps, dtype=float)
        if steps.ndim == 1:
            steps = steps[:, None]
        return cls(PolicyKind.OPEN_LOOP, steps.shape[1], name, steps=steps)

    @classmethod
    def markov(cls, fn: Callable[[float, np.ndarray], np.ndarray], dim: int, name: str = "markov"):
        """Feedback theta(t, x) on the current state."""
        return cls(PolicyKind.MARKOV_FEEDBACK, dim, name, feedback=lambda k, t, path: fn(t, path[:, k]))

    @classmethod
    def from_table(cls, table: LatticeTable, name: str = "table"):
        return cls(
            PolicyKind.MARKOV_FEEDBACK, table.values.shape[-1], name,
            feedback=lambda k, t, path: table.lookup(k, path[:, k]),
        )

    @classmethod
    def extreme_family(cls, S: UncertaintySet, n_steps: int) -> List["ControlPolicy"]:
        corners = product((S.sigma_lo, S.sigma_hi), repeat=S.dim)
        return [cls.constant(corner, n_steps) for corner in corners]

    def at(self, k: int, t: float, path: np.ndarray) -> np.ndarray:
        n_paths = path.shape[0]
        if self.kind == PolicyKind.OPEN_LOOP:
            return np.broadcast_to(self.steps[k], (n_paths, self.dim))
        theta = np.asarray(self.feedback(k, t, path), dtype=float)
        return np.broadcast_to(theta, (n_paths, self.dim))

    def check(self, theta: np.ndarray, S: UncertaintySet, k: int, offset: int = 0):
        """Raise unless theta theta^T lies in Sigma on every path."""
        variance = theta * theta
        bad = ~np.all(
            np.isfinite(variance)
            & (variance >= S.sigma_lo2 * (1 - 1e-9))
            & (variance <= S.sigma_hi2 * (1 + 1e-9)),
            axis=-1,
        )
        if np.any(bad):
            path = offset + int(np.flatnonzero(bad)[0])
            raise ControlViolation(
                f"policy {self.name}: theta theta^T outside Sigma at step {k}, path {path}"
            )


@dataclass(frozen=True, eq=False)
class DriftControl:
    """Bounded drift control eta, left-point on the time grid."""

    kind: DriftKind
    dim: int
    bound: float
    name: str = "eta"
    steps: Optional[np.ndarray] = None  # (n_steps, d)
    feedback: Optional[Feedback] = None

    def __post_init__(self):
        if not np.isfinite(self.bound) or self.bound < 0:
            raise ControlViolation(f"drift {self.name}: bound must be finite, got {self.bound}")
        if self.kind == DriftKind.DETERMINISTIC:
            if self.steps is None:
                raise ConfigError("deterministic drift needs per-step values")
            if np.max(np.abs(self.steps), initial=0.0) > self.bound * (1 + BOUND_TOL):
                raise ControlViolation(f"drift {self.name} exceeds its bound {self.bound}")
        elif self.feedback is None:
            raise ConfigError("feedback drift needs a feedback function")

    @classmethod
    def zero(cls, dim: int, n_steps: int):
        return cls(DriftKind.DETERMINISTIC, dim, 0.0, "zero", steps=np.zeros((n_steps, dim)))

    @classmethod
    def constant(cls, value: Sequence[float], n_steps: int, name: Optional[str] = None):
        value = np.atleast_1d(np.asarray(value, dtype=float))
        steps = np.broadcast_to(value, (n_steps, value.size)).copy()
        label = name or "eta=" + ",".join(f"{v:g}" for v in value)
        return cls(DriftKind.DETERMINISTIC, value.size, float(np.max(np.abs(value))), label, steps=steps)

    @classmethod
    def deterministic(cls, steps: np.ndarray, bound: Optional[float] = None, name: str = "eta"):
        steps = np.asarray(steps, dtype=float)
        if steps.ndim == 1:
            steps = steps[:, None]
        if bound is None:
            bound = float(np.max(np.abs(steps), initial=0.0))
        return cls(DriftKind.DETERMINISTIC, steps.shape[1], bound, name, steps=steps)

    @classmethod
    def markov(cls, fn: Callable[[float, np.ndarray], np.ndarray], dim: int, bound: float, name: str = "markov"):
        """Feedback eta(t, x) on the current (shifted) state."""
        return cls(
            DriftKind.MARKOV_FEEDBACK, dim, bound, name,
            feedback=lambda k, t, path: fn(t, path[:, k]),
        )

    @classmethod
    def random_family(cls, dim: int, grid: TimeGrid, count: int, bound: float, pieces: int = 4, seed: int = 0):
        """Random piecewise-constant deterministic drifts with |eta| <= bound."""
        rng = np.random.default_rng(seed)
        pieces = max(1, min(pieces, grid.n_steps))
        owner = np.minimum((np.arange(grid.n_steps) * pieces) // grid.n_steps, pieces - 1)
        controls = []
        for i in range(count):
            levels = rng.uniform(-bound, bound, size=(pieces, dim))
            controls.append(cls.deterministic(levels[owner], bound=bound, name=f"random_{i:03d}"))
        return controls

    def scaled(self, c: float) -> "DriftControl":
        if self.kind == DriftKind.DETERMINISTIC:
            return DriftControl.deterministic(c * self.steps, abs(c) * self.bound, f"{c:g}*{self.name}")
        feedback = self.feedback
        return DriftControl(
            DriftKind.MARKOV_FEEDBACK, self.dim, abs(c) * self.bound, f"{c:g}*{self.name}",
            feedback=lambda k, t, path: c * np.asarray(feedback(k, t, path)),
        )

    def at(self, k: int, t: float, path: np.ndarray) -> np.ndarray:
        n_paths = path.shape[0]
        if self.kind == DriftKind.DETERMINISTIC:
            return np.broadcast_to(self.steps[k], (n_paths, self.dim))
        eta = np.broadcast_to(np.asarray(self.feedback(k, t, path), dtype=float), (n_paths, self.dim))
        over = np.max(np.abs(eta), axis=-1) > self.bound * (1 + BOUND_TOL) + BOUND_TOL
        if np.any(over) or not np.all(np.isfinite(eta)):
            path_index = int(np.flatnonzero(over | ~np.all(np.isfinite(eta), axis=-1))[0])
            raise ControlViolation(
                f"drift {self.name} exceeds bound {self.bound} at step {k}, path {path_index}"
            )
        return eta

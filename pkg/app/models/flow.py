# flow.py
import logging
from dataclasses import dataclass, replace
from typing import Callable, Optional, Sequence, Tuple

import numpy as np

from ..errors.errors import ConfigError, DimensionMismatch
from .model import TimeGrid, UncertaintySet, diagonal_positions, packed_size, sym_inner

logger = logging.getLogger(__name__)

# b: (..., p) -> (..., p); sigma: (..., p) -> (..., p, d); h: (..., p) -> (..., p, m)
# with h[..., j, :] the packed symmetric matrix paired with d<B> in component j.
Coefficient = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True, eq=False)
class SkeletonPair:
    """(f, g) in H x A through their step derivatives on a grid.

    f_dot is (n_steps, d); g_dot is (n_steps, m), packed symmetric per step.
    """

    grid: TimeGrid
    f_dot: np.ndarray
    g_dot: np.ndarray

    def __post_init__(self):
        f_dot = np.asarray(self.f_dot, dtype=float)
        g_dot = np.asarray(self.g_dot, dtype=float)
        if f_dot.ndim == 1:
            f_dot = f_dot[:, None]
        if g_dot.ndim == 1:
            g_dot = g_dot[:, None]
        n = self.grid.n_steps
        if f_dot.shape[0] != n or g_dot.shape[0] != n:
            raise DimensionMismatch(f"pair needs {n} steps, got {f_dot.shape[0]} and {g_dot.shape[0]}")
        if g_dot.shape[1] != packed_size(f_dot.shape[1]):
            raise DimensionMismatch(f"g_dot width {g_dot.shape[1]} does not match dimension {f_dot.shape[1]}")
        object.__setattr__(self, "f_dot", f_dot)
        object.__setattr__(self, "g_dot", g_dot)

    @classmethod
    def from_diagonal(cls, grid: TimeGrid, f_dot: np.ndarray, g_diag: np.ndarray) -> "SkeletonPair":
        f_dot = np.asarray(f_dot, dtype=float).reshape(grid.n_steps, -1)
        d = f_dot.shape[1]
        g_dot = np.zeros((grid.n_steps, packed_size(d)))
        g_dot[:, diagonal_positions(d)] = np.asarray(g_diag, dtype=float).reshape(grid.n_steps, d)
        return cls(grid, f_dot, g_dot)

    @classmethod
    def constant(cls, grid: TimeGrid, f_dot: Sequence[float], g_diag: Sequence[float]) -> "SkeletonPair":
        f_dot = np.atleast_1d(np.asarray(f_dot, dtype=float))
        g_diag = np.atleast_1d(np.asarray(g_diag, dtype=float))
        n = grid.n_steps
        return cls.from_diagonal(grid, np.tile(f_dot, (n, 1)), np.tile(g_diag, (n, 1)))

    @property
    def dim(self) -> int:
        return self.f_dot.shape[1]

    @property
    def g_diag(self) -> np.ndarray:
        return self.g_dot[:, diagonal_positions(self.dim)]

    @property
    def f(self) -> np.ndarray:
        return np.concatenate([np.zeros((1, self.dim)), np.cumsum(self.f_dot * self.grid.dt, axis=0)])

    @property
    def g(self) -> np.ndarray:
        return np.concatenate([np.zeros((1, self.g_dot.shape[1])), np.cumsum(self.g_dot * self.grid.dt, axis=0)])

    def h_norm(self) -> float:
        """||f||_H."""
        return float(np.sqrt(np.sum(self.f_dot ** 2) * self.grid.dt))

    def in_sigma(self, S: UncertaintySet, tol: float = 1e-9) -> bool:
        return bool(np.all(S.contains(self.g_dot, tol)))

    def scaled(self, c: float) -> "SkeletonPair":
        return SkeletonPair(self.grid, c * self.f_dot, self.g_dot)

    def refine(self, factor: int = 2) -> "SkeletonPair":
        """Same (f, g) on a grid with `factor` times more steps."""
        return SkeletonPair(
            self.grid.refine(factor), np.repeat(self.f_dot, factor, axis=0), np.repeat(self.g_dot, factor, axis=0)
        )


@dataclass(frozen=True, eq=False)
class FlowCoefficients:
    b: Coefficient
    sigma: Coefficient
    h: Coefficient
    state_dim: int
    noise_dim: int

    def drift(self, x: np.ndarray, f_dot: np.ndarray, g_dot: np.ndarray) -> np.ndarray:
        """b(x) + sigma(x) f' + h(x) . g' for batched x (..., p), f' (..., d), g' (..., m)."""
        return (
            self.b(x)
            + np.einsum("...pd,...d->...p", self.sigma(x), f_dot)
            + sym_inner(self.h(x), g_dot[..., None, :], self.noise_dim)
        )


@dataclass(frozen=True, eq=False)
class FlowSpec:
    """dX = b^eps(X)dt + sqrt(eps) sigma^eps(X)dB + h^eps(X)d<B>.

    `family(eps)` gives the perturbed coefficients; without it the limit
    coefficients are used at every eps.
    """

    coefficients: FlowCoefficients
    lipschitz: float
    eps: float = 0.0
    family: Optional[Callable[[float], FlowCoefficients]] = None
    name: str = "flow"

    def __post_init__(self):
        if self.eps < 0:
            raise ConfigError(f"noise scale must be non-negative, got {self.eps}")

    @property
    def state_dim(self) -> int:
        return self.coefficients.state_dim

    @property
    def noise_dim(self) -> int:
        return self.coefficients.noise_dim

    def at_eps(self) -> FlowCoefficients:
        if self.family is None or self.eps == 0:
            return self.coefficients
        return self.family(self.eps)

    def with_eps(self, eps: float) -> "FlowSpec":
        return replace(self, eps=float(eps))

    def check_lipschitz(
        self, radius: float = 3.0, n_samples: int = 256, seed: int = 0, coefficients: Optional[FlowCoefficients] = None
    ) -> float:
        """Largest sampled difference quotient of (b, sigma, h) on |x| <= radius."""
        coefficients = coefficients or self.at_eps()
        rng = np.random.default_rng(seed)
        x = rng.uniform(-radius, radius, size=(n_samples, self.state_dim))
        y = x + 0.05 * rng.standard_normal(x.shape)
        dist = np.linalg.norm(x - y, axis=-1)
        observed = 0.0
        for fn in (coefficients.b, coefficients.sigma, coefficients.h):
            diff = (fn(x) - fn(y)).reshape(n_samples, -1)
            observed = max(observed, float(np.max(np.linalg.norm(diff, axis=-1) / np.maximum(dist, 1e-300))))
        if observed > self.lipschitz * (1 + 1e-9):
            logger.warning(
                "flow %s: sampled Lipschitz quotient %.4g exceeds declared %.4g", self.name, observed, self.lipschitz
            )
        return observed

    def check_uniform_convergence(
        self, eps_list: Sequence[float], radius: float = 3.0, n_samples: int = 256, seed: int = 0
    ) -> Tuple[float, ...]:
        """Sampled sup-distance of the eps-coefficients to the limit, per eps."""
        if self.family is None:
            return tuple(0.0 for _ in eps_list)
        rng = np.random.default_rng(seed)
        x = rng.uniform(-radius, radius, size=(n_samples, self.state_dim))
        limit = self.coefficients
        distances = []
        for eps in eps_list:
            coefficients = self.family(eps)
            sup = 0.0
            for fn, fn0 in ((coefficients.b, limit.b), (coefficients.sigma, limit.sigma), (coefficients.h, limit.h)):
                sup = max(sup, float(np.max(np.abs(fn(x) - fn0(x)))))
            distances.append(sup)
        order = np.argsort(eps_list)
        if np.any(np.diff(np.asarray(distances)[order]) < -1e-12):
            logger.warning("flow %s: coefficient distance does not shrink with eps: %s", self.name, distances)
        return tuple(distances)

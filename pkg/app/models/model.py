# model.py
import logging
from dataclasses import dataclass
from enum import Enum
from itertools import product
from typing import Callable, List, Sequence, Tuple, Union

import numpy as np

from ..errors.errors import ConfigError, DimensionMismatch

logger = logging.getLogger(__name__)

SIGMA_TOL = 1e-9


class SigmaStructure(str, Enum):
    SCALAR_1D = "scalar_1d"
    DIAGONAL_BOX = "diagonal_box"


def packed_size(dim: int) -> int:
    return dim * (dim + 1) // 2


def _upper_indices(dim: int) -> Tuple[np.ndarray, np.ndarray]:
    return np.triu_indices(dim)


def diagonal_positions(dim: int) -> np.ndarray:
    """Positions of the diagonal entries inside a packed upper triangle."""
    rows, cols = _upper_indices(dim)
    return np.flatnonzero(rows == cols)


def inner_weights(dim: int) -> np.ndarray:
    # off-diagonal entries appear twice in (A, B) = sum_ij a_ij b_ij
    rows, cols = _upper_indices(dim)
    return np.where(rows == cols, 1.0, 2.0)


def sym_pack(dense: np.ndarray) -> np.ndarray:
    dense = np.asarray(dense, dtype=float)
    dim = dense.shape[-1]
    if dense.shape[-2] != dim:
        raise DimensionMismatch(f"expected square matrices, got shape {dense.shape}")
    rows, cols = _upper_indices(dim)
    return dense[..., rows, cols]


def sym_unpack(packed: np.ndarray, dim: int) -> np.ndarray:
    packed = np.asarray(packed, dtype=float)
    if packed.shape[-1] != packed_size(dim):
        raise DimensionMismatch(
            f"packed length {packed.shape[-1]} does not match dimension {dim}"
        )
    rows, cols = _upper_indices(dim)
    dense = np.zeros(packed.shape[:-1] + (dim, dim))
    dense[..., rows, cols] = packed
    dense[..., cols, rows] = packed
    return dense


def sym_inner(a_packed: np.ndarray, b_packed: np.ndarray, dim: int) -> np.ndarray:
    return np.sum(np.asarray(a_packed) * np.asarray(b_packed) * inner_weights(dim), axis=-1)


@dataclass(frozen=True, eq=False)
class SymMatrix:
    """Symmetric d x d matrix stored as its packed upper triangle."""

    dim: int
    packed: np.ndarray

    def __post_init__(self):
        packed = np.asarray(self.packed, dtype=float).reshape(-1)
        if packed.size != packed_size(self.dim):
            raise DimensionMismatch(
                f"packed length {packed.size} does not match dimension {self.dim}"
            )
        object.__setattr__(self, "packed", packed)

    @classmethod
    def from_dense(cls, dense) -> "SymMatrix":
        dense = np.atleast_2d(np.asarray(dense, dtype=float))
        return cls(dense.shape[0], sym_pack(dense))

    @classmethod
    def diag(cls, values: Sequence[float]) -> "SymMatrix":
        return cls.from_dense(np.diag(np.asarray(values, dtype=float)))

    @classmethod
    def zeros(cls, dim: int) -> "SymMatrix":
        return cls(dim, np.zeros(packed_size(dim)))

    def dense(self) -> np.ndarray:
        return sym_unpack(self.packed, self.dim)

    def diagonal(self) -> np.ndarray:
        return self.packed[diagonal_positions(self.dim)]

    def inner(self, other: "SymMatrix") -> float:
        if other.dim != self.dim:
            raise DimensionMismatch(f"dimensions {self.dim} and {other.dim} differ")
        return float(sym_inner(self.packed, other.packed, self.dim))

    def __add__(self, other: "SymMatrix") -> "SymMatrix":
        if other.dim != self.dim:
            raise DimensionMismatch(f"dimensions {self.dim} and {other.dim} differ")
        return SymMatrix(self.dim, self.packed + other.packed)

    def __sub__(self, other: "SymMatrix") -> "SymMatrix":
        return self + (-1.0) * other

    def __mul__(self, scalar: float) -> "SymMatrix":
        return SymMatrix(self.dim, float(scalar) * self.packed)

    __rmul__ = __mul__

    def __repr__(self):
        return f"SymMatrix(dim={self.dim}, dense={self.dense().tolist()})"


@dataclass(frozen=True)
class UncertaintySet:
    """Covariance uncertainty set Sigma.

    sigma_lo2 and sigma_hi2 bound the covariance matrix itself (variance scale),
    i.e. they play the role of the lower/upper bounds in
    sigma_lo2 * I <= sigma <= sigma_hi2 * I.
    """

    dim: int
    sigma_lo2: float
    sigma_hi2: float
    structure: SigmaStructure = SigmaStructure.SCALAR_1D

    def __post_init__(self):
        if self.dim < 1:
            raise ConfigError(f"dimension must be positive, got {self.dim}")
        if self.structure == SigmaStructure.SCALAR_1D and self.dim != 1:
            raise ConfigError("scalar_1d uncertainty requires dim == 1")
        if not (0.0 < self.sigma_lo2 <= self.sigma_hi2 < np.inf):
            raise ConfigError(
                f"need 0 < sigma_lo2 <= sigma_hi2 < inf, got ({self.sigma_lo2}, {self.sigma_hi2})"
            )

    @classmethod
    def scalar(cls, sigma_lo2: float, sigma_hi2: float) -> "UncertaintySet":
        return cls(1, float(sigma_lo2), float(sigma_hi2), SigmaStructure.SCALAR_1D)

    @classmethod
    def box(cls, dim: int, sigma_lo2: float, sigma_hi2: float) -> "UncertaintySet":
        return cls(dim, float(sigma_lo2), float(sigma_hi2), SigmaStructure.DIAGONAL_BOX)

    @property
    def sigma_lo(self) -> float:
        return float(np.sqrt(self.sigma_lo2))

    @property
    def sigma_hi(self) -> float:
        return float(np.sqrt(self.sigma_hi2))

    @property
    def packed_dim(self) -> int:
        return packed_size(self.dim)

    def contains(self, packed: np.ndarray, tol: float = SIGMA_TOL) -> np.ndarray:
        """Membership of packed symmetric matrices (..., m) in Sigma."""
        packed = np.asarray(packed, dtype=float)
        if packed.shape[-1] != self.packed_dim:
            raise DimensionMismatch(
                f"packed length {packed.shape[-1]} does not match dimension {self.dim}"
            )
        diag_pos = diagonal_positions(self.dim)
        off_pos = np.setdiff1d(np.arange(self.packed_dim), diag_pos)
        diag = packed[..., diag_pos]
        inside = np.all(
            (diag >= self.sigma_lo2 - tol) & (diag <= self.sigma_hi2 + tol), axis=-1
        )
        if off_pos.size:
            inside &= np.all(np.abs(packed[..., off_pos]) <= tol, axis=-1)
        return inside


def g_diag(a_diag: np.ndarray, S: UncertaintySet) -> np.ndarray:
    """G evaluated from the diagonal entries (..., d) of A; Sigma is diagonal so
    off-diagonal entries never contribute."""
    a_diag = np.asarray(a_diag, dtype=float)
    if a_diag.shape[-1] != S.dim:
        raise DimensionMismatch(
            f"matrix dimension {a_diag.shape[-1]} does not match uncertainty set dimension {S.dim}"
        )
    flux = S.sigma_hi2 * np.maximum(a_diag, 0.0) - S.sigma_lo2 * np.maximum(-a_diag, 0.0)
    return 0.5 * np.sum(flux, axis=-1)


def worst_case_variance(a_diag: np.ndarray, S: UncertaintySet) -> np.ndarray:
    """Per-axis argmax of (A, sigma) over Sigma."""
    return np.where(np.asarray(a_diag) >= 0.0, S.sigma_hi2, S.sigma_lo2)


def g_eval_packed(packed: np.ndarray, S: UncertaintySet) -> np.ndarray:
    packed = np.asarray(packed, dtype=float)
    if packed.shape[-1] != S.packed_dim:
        raise DimensionMismatch(
            f"packed length {packed.shape[-1]} does not match uncertainty set dimension {S.dim}"
        )
    return g_diag(packed[..., diagonal_positions(S.dim)], S)


def g_eval(A: Union[SymMatrix, np.ndarray, float], S: UncertaintySet) -> float:
    """G(A) = 1/2 sup_{sigma in Sigma} (A, sigma)."""
    if not isinstance(A, SymMatrix):
        A = SymMatrix.from_dense(A)
    if A.dim != S.dim:
        raise DimensionMismatch(f"matrix dimension {A.dim} does not match {S.dim}")
    return float(g_diag(A.diagonal(), S))


def extreme_points(S: UncertaintySet) -> List[SymMatrix]:
    corners = product((S.sigma_lo2, S.sigma_hi2), repeat=S.dim)
    return [SymMatrix.diag(corner) for corner in corners]


@dataclass(frozen=True)
class TimeGrid:
    horizon: float
    n_steps: int

    def __post_init__(self):
        if not self.horizon > 0:
            raise ConfigError(f"horizon must be positive, got {self.horizon}")
        if self.n_steps < 1:
            raise ConfigError(f"n_steps must be positive, got {self.n_steps}")

    @property
    def dt(self) -> float:
        return self.horizon / self.n_steps

    @property
    def times(self) -> np.ndarray:
        times = np.arange(self.n_steps + 1) * self.dt
        times[-1] = self.horizon
        return times

    def index_of(self, t: float) -> int:
        """Nearest grid index; snapping is logged."""
        if t < -1e-12 or t > self.horizon * (1 + 1e-12):
            raise ConfigError(f"time {t} outside [0, {self.horizon}]")
        k = int(np.rint(t / self.dt))
        k = min(max(k, 0), self.n_steps)
        if abs(self.times[k] - t) > 1e-9 * max(self.horizon, 1.0):
            logger.warning("time %.6g snapped to grid time %.6g", t, self.times[k])
        return k

    def refine(self, factor: int = 2) -> "TimeGrid":
        return TimeGrid(self.horizon, self.n_steps * factor)


@dataclass(frozen=True, eq=False)
class CylinderFunctional:
    """Phi = phi(B_{t_1}, ..., B_{t_n}).

    phi maps an array (n_samples, n_times, d) to (n_samples,).
    """

    times: Tuple[float, ...]
    phi: Callable[[np.ndarray], np.ndarray]
    bound: float
    lipschitz: float
    name: str = "phi"

    def __post_init__(self):
        times = tuple(float(t) for t in self.times)
        if not times:
            raise ConfigError("cylinder functional needs at least one time")
        if any(t <= 0 for t in times) or any(b <= a for a, b in zip(times, times[1:])):
            raise ConfigError(f"times must be increasing in (0, T], got {times}")
        object.__setattr__(self, "times", times)

    @property
    def n_times(self) -> int:
        return len(self.times)

    @property
    def horizon(self) -> float:
        return self.times[-1]

    @property
    def bounded(self) -> bool:
        return bool(np.isfinite(self.bound))

    def __call__(self, values: np.ndarray) -> np.ndarray:
        return np.asarray(self.phi(np.asarray(values, dtype=float)), dtype=float)

    def time_indices(self, grid: TimeGrid) -> List[int]:
        indices = [grid.index_of(t) for t in self.times]
        if any(b <= a for a, b in zip(indices, indices[1:])) or indices[0] == 0:
            raise ConfigError(
                f"functional times {self.times} collapse on grid with {grid.n_steps} steps"
            )
        return indices

    def evaluate_on(self, path: np.ndarray, grid: TimeGrid) -> np.ndarray:
        """Evaluate on discrete paths (n, n_steps + 1, d)."""
        return self(path[:, self.time_indices(grid), :])

    def shifted(self, c: float) -> "CylinderFunctional":
        return CylinderFunctional(
            self.times, lambda y: self.phi(y) + c, self.bound + abs(c), self.lipschitz,
            f"{self.name}+{c:g}",
        )

    def spot_check(self, dim: int, n_samples: int = 512, scale: float = 4.0, seed: int = 0):
        """Sampled check of the declared bound and Lipschitz constant.

        Returns the observed (sup |phi|, max difference quotient).
        """
        rng = np.random.default_rng(seed)
        y = scale * rng.standard_normal((n_samples, self.n_times, dim))
        z = y + 0.1 * rng.standard_normal(y.shape)
        fy, fz = self(y), self(z)
        observed_bound = float(np.max(np.abs(fy)))
        dist = np.linalg.norm((y - z).reshape(n_samples, -1), axis=1)
        observed_lip = float(np.max(np.abs(fy - fz) / np.maximum(dist, 1e-300)))
        if observed_bound > self.bound * (1 + 1e-9):
            logger.warning(
                "functional %s exceeds declared bound: %.6g > %.6g",
                self.name, observed_bound, self.bound,
            )
        if observed_lip > self.lipschitz * (1 + 1e-9):
            logger.warning(
                "functional %s exceeds declared Lipschitz constant: %.6g > %.6g",
                self.name, observed_lip, self.lipschitz,
            )
        return observed_bound, observed_lip

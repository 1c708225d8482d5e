# builtins.py
"""Named functionals, flows, quadratic-variation functionals and events."""
from dataclasses import dataclass
from enum import Enum
from typing import Any, Callable, Dict, Mapping, Optional, Sequence, Tuple

import numpy as np

from ..errors.errors import ConfigError
from .flow import FlowCoefficients, FlowSpec
from .model import CylinderFunctional, diagonal_positions, packed_size


class BuiltinKind(str, Enum):
    FUNCTIONAL = "functional"
    FLOW = "flow"
    QV = "qv"
    EVENT = "event"


@dataclass(frozen=True)
class Builtin:
    kind: BuiltinKind
    name: str
    formula: str
    factory: Callable[..., Any]


def _terminal(values: np.ndarray) -> np.ndarray:
    # (n, n_times, d) -> last observation (n, d)
    return values[:, -1, :]


def _functional_x(horizon: float, dim: int) -> CylinderFunctional:
    return CylinderFunctional((horizon,), lambda y: np.sum(_terminal(y), axis=-1), np.inf, np.sqrt(dim), "x")


def _functional_x2(horizon: float, dim: int) -> CylinderFunctional:
    return CylinderFunctional((horizon,), lambda y: np.sum(_terminal(y) ** 2, axis=-1), np.inf, np.inf, "x2")


def _functional_neg_x2(horizon: float, dim: int) -> CylinderFunctional:
    return CylinderFunctional((horizon,), lambda y: -np.sum(_terminal(y) ** 2, axis=-1), np.inf, np.inf, "neg_x2")


def _functional_abs(horizon: float, dim: int) -> CylinderFunctional:
    return CylinderFunctional((horizon,), lambda y: np.linalg.norm(_terminal(y), axis=-1), np.inf, 1.0, "abs")


def _functional_min_x2(horizon: float, dim: int, c: float = 4.0) -> CylinderFunctional:
    return CylinderFunctional(
        (horizon,), lambda y: np.minimum(np.sum(_terminal(y) ** 2, axis=-1), c), c, 2.0 * np.sqrt(c), f"min_x2_{c:g}"
    )


def _functional_constant(horizon: float, dim: int, c: float = 1.0) -> CylinderFunctional:
    return CylinderFunctional((horizon,), lambda y: np.full(y.shape[0], float(c)), abs(c), 0.0, f"constant_{c:g}")


def _functional_first(horizon: float, dim: int) -> CylinderFunctional:
    """phi(x_1, x_2) = x_1 at (T/2, T)."""
    return CylinderFunctional((horizon / 2, horizon), lambda y: np.sum(y[:, 0, :], axis=-1), np.inf, np.sqrt(dim), "first")


def _functional_increment(horizon: float, dim: int) -> CylinderFunctional:
    return CylinderFunctional(
        (horizon / 2, horizon), lambda y: np.sum(y[:, 1, :] - y[:, 0, :], axis=-1), np.inf, 2.0 * np.sqrt(dim), "increment"
    )


def _functional_increment_min_sq(horizon: float, dim: int, c: float = 1.0) -> CylinderFunctional:
    return CylinderFunctional(
        (horizon / 2, horizon),
        lambda y: np.minimum(np.sum(y[:, 1, :] - y[:, 0, :], axis=-1), c) ** 2,
        np.inf, np.inf, f"increment_min_sq_{c:g}",
    )


def _functional_increment_min_x2(horizon: float, dim: int, c: float = 1.0) -> CylinderFunctional:
    return CylinderFunctional(
        (horizon / 2, horizon),
        lambda y: np.minimum(np.sum((y[:, 1, :] - y[:, 0, :]) ** 2, axis=-1), c),
        c, 4.0 * np.sqrt(c), f"increment_min_x2_{c:g}",
    )


def _functional_laplace_clip(horizon: float, dim: int, c: float = 1.0) -> CylinderFunctional:
    return CylinderFunctional(
        (horizon,), lambda y: np.minimum(np.linalg.norm(_terminal(y), axis=-1), c), c, 1.0, f"laplace_clip_{c:g}"
    )


def tabulated_functional(horizon: float, xs: Sequence[float], ys: Sequence[float], name: str = "tabulated") -> CylinderFunctional:
    """Piecewise-linear phi(B_T) through (xs, ys), constant beyond the table (1-d)."""
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    if xs.ndim != 1 or xs.shape != ys.shape or xs.size < 2:
        raise ConfigError("tabulated functional needs matching xs and ys with at least two points")
    if np.any(np.diff(xs) <= 0):
        raise ConfigError("tabulated xs must be strictly increasing")
    lipschitz = float(np.max(np.abs(np.diff(ys) / np.diff(xs))))
    return CylinderFunctional(
        (horizon,), lambda y: np.interp(y[:, -1, 0], xs, ys), float(np.max(np.abs(ys))), lipschitz, name
    )


def _zero_h(p: int, d: int):
    m = packed_size(d)
    return lambda x: np.zeros(x.shape[:-1] + (p, m))


def _flow_linear(dim: int, s: float = 1.0) -> FlowSpec:
    coefficients = FlowCoefficients(
        b=lambda x: -x,
        sigma=lambda x: np.broadcast_to(s * np.eye(dim), x.shape + (dim,)),
        h=_zero_h(dim, dim),
        state_dim=dim,
        noise_dim=dim,
    )
    return FlowSpec(coefficients, lipschitz=1.0, name="linear")


def _flow_identity_diffusion(dim: int) -> FlowSpec:
    coefficients = FlowCoefficients(
        b=lambda x: np.zeros_like(x),
        sigma=lambda x: np.broadcast_to(np.eye(dim), x.shape + (dim,)),
        h=_zero_h(dim, dim),
        state_dim=dim,
        noise_dim=dim,
    )
    return FlowSpec(coefficients, lipschitz=0.0, name="identity_diffusion")


def _flow_ou_qv_drift(dim: int, c: float = 0.5) -> FlowSpec:
    m = packed_size(dim)
    diag = diagonal_positions(dim)
    h_const = np.zeros((dim, m))
    h_const[np.arange(dim), diag] = c

    def coefficients_at(eps: float) -> FlowCoefficients:
        return FlowCoefficients(
            b=lambda x: -x + eps * np.sin(x),
            sigma=lambda x: np.broadcast_to(np.eye(dim), x.shape + (dim,)),
            h=lambda x: np.broadcast_to(h_const, x.shape[:-1] + (dim, m)),
            state_dim=dim,
            noise_dim=dim,
        )

    return FlowSpec(coefficients_at(0.0), lipschitz=2.0, family=coefficients_at, name="ou_qv_drift")


def _qv_trace(g: np.ndarray) -> np.ndarray:
    d = int((np.sqrt(8 * g.shape[-1] + 1) - 1) / 2)
    return np.sum(g[..., -1, diagonal_positions(d)], axis=-1)


def _qv_arctan_terminal():
    return lambda g: np.arctan(_qv_trace(g))


def _qv_neg_terminal():
    return lambda g: -_qv_trace(g)


def _qv_constant(c: float = 1.0):
    return lambda g: np.full(g.shape[:-2], float(c))


def _event_exit(a: float = 1.0):
    return lambda paths: np.max(np.linalg.norm(paths, axis=-1), axis=-1) >= a


def _event_terminal_exit(a: float = 1.0):
    return lambda paths: np.linalg.norm(paths[:, -1], axis=-1) >= a


def _event_always():
    return lambda paths: np.ones(paths.shape[0], dtype=bool)


BUILTINS: Tuple[Builtin, ...] = (
    Builtin(BuiltinKind.FUNCTIONAL, "x", "phi(B_T) = sum_i x_i", _functional_x),
    Builtin(BuiltinKind.FUNCTIONAL, "x2", "phi(B_T) = |x|^2", _functional_x2),
    Builtin(BuiltinKind.FUNCTIONAL, "neg_x2", "phi(B_T) = -|x|^2", _functional_neg_x2),
    Builtin(BuiltinKind.FUNCTIONAL, "abs", "phi(B_T) = |x|", _functional_abs),
    Builtin(BuiltinKind.FUNCTIONAL, "min_x2_c", "phi(B_T) = min(|x|^2, c), c = 4", _functional_min_x2),
    Builtin(BuiltinKind.FUNCTIONAL, "constant", "phi = c, c = 1", _functional_constant),
    Builtin(BuiltinKind.FUNCTIONAL, "first", "phi(B_{T/2}, B_T) = x_1", _functional_first),
    Builtin(BuiltinKind.FUNCTIONAL, "increment", "phi(B_{T/2}, B_T) = x_2 - x_1", _functional_increment),
    Builtin(BuiltinKind.FUNCTIONAL, "increment_min_sq", "phi(B_{T/2}, B_T) = min(x_2 - x_1, c)^2, c = 1", _functional_increment_min_sq),
    Builtin(BuiltinKind.FUNCTIONAL, "increment_min_x2", "phi(B_{T/2}, B_T) = min(|x_2 - x_1|^2, c), c = 1", _functional_increment_min_x2),
    Builtin(BuiltinKind.FUNCTIONAL, "laplace_clip", "phi(y) = min(|y|, c), c = 1", _functional_laplace_clip),
    Builtin(BuiltinKind.FLOW, "linear", "b(x) = -x, sigma = s I (s = 1), h = 0", _flow_linear),
    Builtin(BuiltinKind.FLOW, "identity_diffusion", "b = 0, sigma = I, h = 0", _flow_identity_diffusion),
    Builtin(BuiltinKind.FLOW, "ou_qv_drift", "b(x) = -x + eps sin(x), sigma = I, h = c I (c = 0.5)", _flow_ou_qv_drift),
    Builtin(BuiltinKind.QV, "arctan_terminal", "Upsilon(g) = arctan(tr g(T))", _qv_arctan_terminal),
    Builtin(BuiltinKind.QV, "neg_terminal", "Upsilon(g) = -tr g(T)", _qv_neg_terminal),
    Builtin(BuiltinKind.QV, "constant", "Upsilon(g) = c, c = 1", _qv_constant),
    Builtin(BuiltinKind.EVENT, "exit", "max_t |X_t| >= a, a = 1", _event_exit),
    Builtin(BuiltinKind.EVENT, "terminal_exit", "|X_T| >= a, a = 1", _event_terminal_exit),
    Builtin(BuiltinKind.EVENT, "always", "always true", _event_always),
)

_INDEX: Dict[Tuple[BuiltinKind, str], Builtin] = {(b.kind, b.name): b for b in BUILTINS}


def lookup(kind: BuiltinKind, name: str) -> Builtin:
    try:
        return _INDEX[(BuiltinKind(kind), name)]
    except KeyError:
        known = ", ".join(sorted(b.name for b in BUILTINS if b.kind == kind))
        raise ConfigError(f"unknown {BuiltinKind(kind).value} builtin '{name}' (known: {known})")


def build(kind: BuiltinKind, name: str, params: Optional[Mapping[str, Any]] = None, **context):
    """Instantiate a builtin; unknown parameters are a configuration error."""
    builtin = lookup(kind, name)
    try:
        return builtin.factory(**context, **dict(params or {}))
    except TypeError as exc:
        raise ConfigError(f"bad parameters for builtin '{name}': {exc}")


def list_builtins() -> str:
    lines = []
    for kind in BuiltinKind:
        lines.append(f"[{kind.value}]")
        lines.extend(f"  {b.name:<20} {b.formula}" for b in BUILTINS if b.kind == kind)
    return "\n".join(lines)

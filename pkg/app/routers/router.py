# app/routers/router.py
import logging
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence

import numpy as np

from ..errors.errors import ConfigError, InvariantViolation
from ..models.builtins import BuiltinKind, build, tabulated_functional
from ..models.controls import ControlPolicy
from ..models.flow import FlowSpec
from ..models.model import CylinderFunctional, SigmaStructure, TimeGrid, UncertaintySet
from ..core.pde import PdeGrid
from ..schemas.experiment import ExperimentConfig, ExperimentKind
from ..schemas.report import InvariantCheck, RunSummary
from ..session import runtime_settings
from .output import OutputWriter

logger = logging.getLogger(__name__)

version = "1.0"


@dataclass
class ExperimentResult:
    results: Dict[str, Any] = field(default_factory=dict)
    checks: List[InvariantCheck] = field(default_factory=list)


class RunContext:
    """Everything a handler needs, resolved from a validated config and CLI overrides."""

    def __init__(self, config: ExperimentConfig, seed: int, workers: Optional[int], output: OutputWriter):
        self.config = config
        self.seed = seed
        self.workers = workers
        self.output = output

    @property
    def tolerances(self):
        return self.config.tolerances

    @cached_property
    def uncertainty(self) -> UncertaintySet:
        cfg = self.config.uncertainty
        structure = cfg.structure or (SigmaStructure.SCALAR_1D if cfg.dim == 1 else SigmaStructure.DIAGONAL_BOX)
        return UncertaintySet(cfg.dim, cfg.sigma_lo2, cfg.sigma_hi2, structure)

    @cached_property
    def time_grid(self) -> TimeGrid:
        return TimeGrid(self.config.grid.horizon, self.config.grid.n_steps)

    def pde_grid(self, drift_bound: float = 0.0) -> PdeGrid:
        cfg = self.config.pde
        return PdeGrid.build(
            self.uncertainty, self.time_grid.horizon, cfg.dx, cfg.cfl, drift_bound, cfg.half_width, cfg.boundary
        )

    def policies(self) -> List[ControlPolicy]:
        """Volatility family from the controls section: box corners plus listed constants."""
        return list(self._control_family)

    @cached_property
    def _control_family(self) -> List[ControlPolicy]:
        cfg = self.config.controls
        S, n = self.uncertainty, self.time_grid.n_steps
        family = ControlPolicy.extreme_family(S, n) if cfg.extremes else []
        for theta in cfg.constants:
            if len(theta) != S.dim:
                raise ConfigError(f"constant volatility {theta} does not have dimension {S.dim}")
            family.append(ControlPolicy.constant(theta, n))
        if not family:
            raise ConfigError("control family is empty")
        return family

    def functional(self) -> CylinderFunctional:
        return self._functional

    @cached_property
    def _functional(self) -> CylinderFunctional:
        cfg = self.config.functional
        horizon = self.time_grid.horizon
        if cfg.table is not None:
            if self.uncertainty.dim != 1:
                raise ConfigError("tabulated functionals are one-dimensional")
            functional = tabulated_functional(horizon, cfg.table.xs, cfg.table.ys)
        else:
            functional = build(BuiltinKind.FUNCTIONAL, cfg.name, cfg.params, horizon=horizon, dim=self.uncertainty.dim)
        functional.spot_check(self.uncertainty.dim, seed=self.seed)
        return functional

    def flow(self) -> FlowSpec:
        return self._flow

    @cached_property
    def _flow(self) -> FlowSpec:
        cfg = self.config.flow
        flow_spec = build(BuiltinKind.FLOW, cfg.name, cfg.params, dim=self.uncertainty.dim)
        flow_spec.check_lipschitz(seed=self.seed)
        return flow_spec

    @cached_property
    def event(self) -> Callable[[np.ndarray], np.ndarray]:
        cfg = self.config.ldp
        return build(BuiltinKind.EVENT, cfg.event, cfg.event_params)

    @cached_property
    def qv_functional(self) -> Callable[[np.ndarray], np.ndarray]:
        cfg = self.config.qv
        return build(BuiltinKind.QV, cfg.name, cfg.params)

    @cached_property
    def laplace_functional(self) -> CylinderFunctional:
        cfg = self.config.ldp.laplace
        functional = build(BuiltinKind.FUNCTIONAL, cfg.functional, cfg.params, horizon=self.time_grid.horizon, dim=self.uncertainty.dim)
        if not functional.bounded or functional.n_times != 1:
            raise ConfigError("the Laplace check needs a bounded terminal functional")
        return functional

    def vector(self, values: Sequence[float], dim: int, label: str) -> np.ndarray:
        vector = np.asarray(values, dtype=float)
        if vector.shape != (dim,):
            raise ConfigError(f"{label} must have {dim} entries, got {list(values)}")
        return vector

    def points(self, values: Sequence[Sequence[float]]) -> np.ndarray:
        points = np.asarray(values, dtype=float)
        if points.ndim != 2 or points.shape[1] != self.uncertainty.dim:
            raise ConfigError(f"points must be a list of {self.uncertainty.dim}-vectors, got shape {points.shape}")
        return points

    def prepare(self) -> None:
        """Resolve every builtin, control family and vector the run will use, so
        configuration errors surface before the first solve or write."""
        config, kind = self.config, self.config.kind
        dim = self.uncertainty.dim
        self.time_grid
        if kind in (ExperimentKind.GEXP, ExperimentKind.VARREP):
            self.functional()
            self.pde_grid(drift_bound=config.controls.drift_bound if kind == ExperimentKind.VARREP else 0.0)
        if kind == ExperimentKind.GEXP and config.n_paths > 0:
            self.policies()
        if kind == ExperimentKind.RATE:
            cfg = config.rate
            self.vector(cfg.x0, dim, "x0")
            state_dim = self.flow().state_dim if cfg.skeleton == "flow" else dim
            if cfg.target == "linear_path":
                self.vector(cfg.velocity, state_dim, "velocity")
            else:
                self.vector(cfg.value, state_dim, "value")
        if kind == ExperimentKind.LDP:
            cfg = config.ldp
            state_dim = self.flow().state_dim
            self.vector(cfg.x0, state_dim, "x0")
            if cfg.rate is None and cfg.rate_target is not None:
                self.vector(cfg.rate_target, state_dim, "rate_target")
            self.event
            self.policies()
            if cfg.laplace is not None:
                self.laplace_functional
        if kind == ExperimentKind.FLOW:
            cfg = config.flow
            self.flow()
            self.points(cfg.x0)
            if cfg.moment_points and config.n_paths > 0:
                self.points(cfg.moment_points)
                self.policies()
        if kind == ExperimentKind.QV:
            self.qv_functional
            self.policies()


Handler = Callable[[RunContext], ExperimentResult]


class ExperimentRouter:
    def __init__(self, tags: Sequence[str] = ()):
        self.tags = list(tags)
        self.routes: Dict[ExperimentKind, Handler] = {}

    def experiment(self, kind: ExperimentKind):
        def decorator(handler: Handler) -> Handler:
            self.routes[kind] = handler
            return handler
        return decorator


class ExperimentRegistry:
    def __init__(self):
        self.routes: Dict[ExperimentKind, Handler] = {}

    def include_router(self, router: ExperimentRouter):
        for kind, handler in router.routes.items():
            if kind in self.routes:
                raise ConfigError(f"experiment kind '{kind.value}' registered twice")
            self.routes[kind] = handler

    @staticmethod
    def load(path: Path) -> ExperimentConfig:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}")
        return ExperimentConfig.model_validate_json(text)

    @staticmethod
    def output_root(path: Path, config: ExperimentConfig, out: Optional[Path]) -> Path:
        if out is not None:
            return Path(out)
        if config.output_dir is not None:
            return Path(config.output_dir)
        return runtime_settings.output_root() / Path(path).stem

    def run(
        self,
        path: Path,
        seed: Optional[int] = None,
        workers: Optional[int] = None,
        out: Optional[Path] = None,
    ) -> Path:
        """Validate and resolve the config, compute, write outputs; raises
        InvariantViolation after writing when a declared check fails."""
        config = self.load(path)
        handler = self.routes.get(config.kind)
        if handler is None:
            raise ConfigError(f"no handler registered for experiment kind '{config.kind.value}'")
        seed = config.seed if seed is None else seed
        output = OutputWriter(self.output_root(path, config, out))
        context = RunContext(config, seed, workers, output)
        context.prepare()

        logger.info("running %s experiment from %s (seed %d)", config.kind.value, path, seed)
        result = handler(context)

        summary = RunSummary(
            kind=config.kind.value,
            schema_version=config.schema_version,
            seed=seed,
            n_paths=config.n_paths,
            results=result.results,
            checks=result.checks,
            files=sorted(output.files),
            version=version,
        )
        target = output.write_json("summary.json", summary)
        failed = summary.failed()
        if failed:
            details = "; ".join(f"{c.name} (value {c.value}, limit {c.limit})" for c in failed)
            raise InvariantViolation(f"failed checks: {details}")
        logger.info("all %d checks passed, summary at %s", len(summary.checks), target)
        return target

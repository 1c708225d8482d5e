# app/schemas/experiment.py
from enum import Enum
from typing import Dict, List, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, model_validator

from ..core.pde import BoundaryPolicy
from ..models.model import SigmaStructure


class ExperimentKind(str, Enum):
    GEXP = "gexp"
    VARREP = "varrep"
    RATE = "rate"
    LDP = "ldp"
    FLOW = "flow"
    QV = "qv"


class StrictModel(BaseModel):
    model_config = ConfigDict(extra="forbid")


class UncertaintyConfig(StrictModel):
    dim: int = Field(1, ge=1)
    sigma_lo2: float = Field(gt=0)
    sigma_hi2: float = Field(gt=0)
    structure: Optional[SigmaStructure] = None

    @model_validator(mode="after")
    def check_order(self):
        if self.sigma_lo2 > self.sigma_hi2:
            raise ValueError("sigma_lo2 must not exceed sigma_hi2")
        if self.structure == SigmaStructure.SCALAR_1D and self.dim != 1:
            raise ValueError("scalar_1d uncertainty requires dim == 1")
        return self


class GridConfig(StrictModel):
    horizon: float = Field(1.0, gt=0)
    n_steps: int = Field(100, ge=1)


class PdeConfig(StrictModel):
    dx: float = Field(0.05, gt=0)
    cfl: float = Field(0.5, gt=0, le=1)
    half_width: Optional[float] = Field(None, gt=0)
    boundary: BoundaryPolicy = BoundaryPolicy.LINEAR_EXTRAPOLATION
    refinement_check: bool = False


class ControlFamilyConfig(StrictModel):
    extremes: bool = True
    constants: List[List[float]] = []
    worst_case: bool = True
    random_drifts: int = Field(100, ge=0)
    drift_bound: float = Field(1.0, ge=0)
    drift_pieces: int = Field(4, ge=1)


class TableConfig(StrictModel):
    xs: List[float]
    ys: List[float]


class FunctionalConfig(StrictModel):
    name: Optional[str] = None
    params: Dict[str, float] = {}
    table: Optional[TableConfig] = None

    @model_validator(mode="after")
    def check_source(self):
        if (self.name is None) == (self.table is None):
            raise ValueError("give exactly one of 'name' or 'table'")
        return self


class FlowConfig(StrictModel):
    name: str
    params: Dict[str, float] = {}
    x0: List[List[float]] = [[0.0]]
    n_list: List[int] = [64, 256, 1024]
    pairs: int = Field(8, ge=1)
    h_radius: float = Field(2.0, gt=0)
    min_ratio: float = Field(1.8, gt=0)
    moment_points: List[List[float]] = []
    moment_stability: float = Field(0.25, gt=0)


class RateConfig(StrictModel):
    skeleton: Literal["integral", "flow"] = "integral"
    target: Literal["linear_path", "terminal"] = "linear_path"
    velocity: List[float] = [1.0]
    value: Optional[List[float]] = None
    x0: List[float] = [0.0]
    n_starts: int = Field(8, ge=1)
    max_iter: int = Field(400, ge=1)
    penalties: List[float] = [1e1, 1e3, 1e5]
    feasibility_tol: float = Field(1e-3, gt=0)

    @model_validator(mode="after")
    def check_target(self):
        if self.target == "terminal" and self.value is None:
            raise ValueError("terminal target needs 'value'")
        return self


class LaplaceConfig(StrictModel):
    functional: str = "laplace_clip"
    params: Dict[str, float] = {}
    eps: List[float] = [0.2, 0.1, 0.05]
    dx: float = Field(0.01, gt=0)
    half_width: float = Field(3.0, gt=0)

    @model_validator(mode="after")
    def check_eps(self):
        if not self.eps or any(eps <= 0 for eps in self.eps):
            raise ValueError("laplace eps values must be positive")
        return self


class LdpConfig(StrictModel):
    event: str = "exit"
    event_params: Dict[str, float] = {}
    eps: List[float] = [0.2, 0.1, 0.05]
    rate: Optional[float] = Field(None, ge=0)
    rate_target: Optional[List[float]] = None
    x0: List[float] = [0.0]
    laplace: Optional[LaplaceConfig] = None

    @model_validator(mode="after")
    def check_eps(self):
        if any(eps <= 0 for eps in self.eps):
            raise ValueError("eps values must be positive")
        return self


class QvConfig(StrictModel):
    name: str
    params: Dict[str, float] = {}


class Tolerances(StrictModel):
    scheme: float = Field(0.01, ge=0)
    mc_confidence: float = Field(3.0, ge=0)
    gradient: float = Field(1e-6, gt=0)
    duality_gap: float = Field(0.05, ge=0)
    sandwich: float = Field(0.02, ge=0)
    qv_agreement: float = Field(0.01, ge=0)
    slope_relative: float = Field(0.15, ge=0)


_REQUIRED = {
    ExperimentKind.GEXP: ("functional",),
    ExperimentKind.VARREP: ("functional",),
    ExperimentKind.RATE: ("rate",),
    ExperimentKind.LDP: ("ldp", "flow"),
    ExperimentKind.FLOW: ("flow",),
    ExperimentKind.QV: ("qv",),
}


class ExperimentConfig(StrictModel):
    schema_version: Literal["1"]
    kind: ExperimentKind
    uncertainty: UncertaintyConfig
    grid: GridConfig = GridConfig()
    pde: PdeConfig = PdeConfig()
    controls: ControlFamilyConfig = ControlFamilyConfig()
    functional: Optional[FunctionalConfig] = None
    flow: Optional[FlowConfig] = None
    rate: Optional[RateConfig] = None
    ldp: Optional[LdpConfig] = None
    qv: Optional[QvConfig] = None
    tolerances: Tolerances = Tolerances()
    n_paths: int = Field(20000, ge=0)
    seed: int = Field(0, ge=0)
    output_dir: Optional[str] = None

    @model_validator(mode="after")
    def check_sections(self):
        missing = [name for name in _REQUIRED[self.kind] if getattr(self, name) is None]
        if missing:
            raise ValueError(f"experiment '{self.kind.value}' needs section(s): {', '.join(missing)}")
        if self.kind == ExperimentKind.RATE and self.rate.skeleton == "flow" and self.flow is None:
            raise ValueError("rate experiment with a flow skeleton needs a 'flow' section")
        return self

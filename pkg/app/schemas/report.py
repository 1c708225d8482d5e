# app/schemas/report.py
import math
from typing import Any, Dict, List, Optional

from pydantic import BaseModel, ConfigDict, field_serializer


def _finite_or_none(value: Optional[float]) -> Optional[float]:
    if value is None or not math.isfinite(value):
        return None
    return value


class InvariantCheck(BaseModel):
    name: str
    passed: bool
    value: Optional[float] = None
    limit: Optional[float] = None
    detail: str = ""

    @field_serializer("value", "limit")
    def serialize_float(self, v: Optional[float]):
        return _finite_or_none(v)


class ControlValue(BaseModel):
    control: str
    policy: str
    value: float
    se: float


class PathwiseResidual(BaseModel):
    mean: float
    se: float
    q95: float
    max: float


class DualityReport(BaseModel):
    lhs: float
    rhs_star: float
    rhs_star_policy: str
    rhs_star_se: float
    rhs_samples: List[ControlValue] = []
    gap: float
    scheme_tolerance: float
    mc_confidence: float
    feedback_bound: float
    pathwise: Optional[PathwiseResidual] = None
    checks: List[InvariantCheck] = []

    @property
    def max_sample(self) -> float:
        return max((sample.value for sample in self.rhs_samples), default=-math.inf)


class RunSummary(BaseModel):
    model_config = ConfigDict(extra="forbid")

    kind: str
    schema_version: str
    seed: int
    n_paths: int
    results: Dict[str, Any] = {}
    checks: List[InvariantCheck] = []
    files: List[str] = []
    version: str

    @property
    def passed(self) -> bool:
        return all(check.passed for check in self.checks)

    def failed(self) -> List[InvariantCheck]:
        return [check for check in self.checks if not check.passed]

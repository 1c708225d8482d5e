# app/routers/output.py
"""Deterministic writers for summary.json, RFC-4180 CSV tables and .dat plot data."""
import csv
import json
import logging
import math
from pathlib import Path
from typing import Any, Iterable, List, Sequence

import numpy as np
from pydantic import BaseModel

from ..errors.errors import ConfigError

logger = logging.getLogger(__name__)


def sanitize(value: Any) -> Any:
    """JSON-safe copy: numpy scalars and arrays become Python values, non-finite floats None."""
    if isinstance(value, BaseModel):
        return sanitize(value.model_dump(mode="python"))
    if isinstance(value, dict):
        return {str(k): sanitize(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [sanitize(v) for v in value]
    if isinstance(value, np.ndarray):
        return sanitize(value.tolist())
    if isinstance(value, (bool, np.bool_)):
        return bool(value)
    if isinstance(value, (int, np.integer)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        value = float(value)
        return value if math.isfinite(value) else None
    if hasattr(value, "value") and isinstance(getattr(value, "value"), str):
        return value.value
    return value


def format_cell(value: Any) -> str:
    if isinstance(value, (float, np.floating)):
        return repr(float(value)) if math.isfinite(value) else ""
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    return str(value)


class OutputWriter:
    """Writes files under one root; names escaping the root are rejected."""

    def __init__(self, root: Path):
        self.root = Path(root).resolve()
        self.files: List[str] = []

    def path(self, name: str) -> Path:
        target = (self.root / name).resolve()
        if Path(name).is_absolute() or not target.is_relative_to(self.root):
            raise ConfigError(f"output file '{name}' would land outside {self.root}")
        target.parent.mkdir(parents=True, exist_ok=True)
        return target

    def _record(self, name: str):
        if name not in self.files:
            self.files.append(name)

    def write_csv(self, name: str, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> Path:
        target = self.path(name)
        with target.open("w", newline="", encoding="utf-8") as handle:
            writer = csv.writer(handle, lineterminator="\r\n", quoting=csv.QUOTE_MINIMAL)
            writer.writerow(header)
            for row in rows:
                writer.writerow([format_cell(cell) for cell in row])
        self._record(name)
        logger.debug("wrote %s", target)
        return target

    def write_dat(self, name: str, columns: Sequence[Sequence[float]], comment: str = "") -> Path:
        target = self.path(name)
        data = np.column_stack([np.asarray(c, dtype=float) for c in columns])
        with target.open("w", encoding="utf-8") as handle:
            if comment:
                handle.write(f"# {comment}\n")
            for row in data:
                handle.write(" ".join(repr(float(x)) for x in row) + "\n")
        self._record(name)
        return target

    def write_json(self, name: str, payload: Any) -> Path:
        target = self.path(name)
        text = json.dumps(sanitize(payload), sort_keys=True, indent=2, allow_nan=False)
        target.write_text(text + "\n", encoding="utf-8")
        self._record(name)
        return target

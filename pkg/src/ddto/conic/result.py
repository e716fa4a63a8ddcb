"""Solver result types."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np


class Status(str, Enum):
    OPTIMAL = "optimal"
    INFEASIBLE = "infeasible"
    UNBOUNDED = "unbounded"
    MAX_ITERATIONS = "max_iterations"


class Feasibility(str, Enum):
    FEASIBLE = "feasible"
    INFEASIBLE = "infeasible"
    INDETERMINATE = "indeterminate"

    def __bool__(self) -> bool:
        return self is Feasibility.FEASIBLE


@dataclass
class SolveResult:
    status: Status
    x: np.ndarray | None
    s: np.ndarray | None
    y: np.ndarray | None
    z: np.ndarray | None
    primal_residual: float
    dual_residual: float
    gap: float
    iterations: int
    objective: float = np.nan
    backend: str = ""

    @property
    def optimal(self) -> bool:
        return self.status is Status.OPTIMAL

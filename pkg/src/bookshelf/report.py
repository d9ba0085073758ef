"""Shared result record for every solver entry point."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# Statuses that count as a solve worth reporting a solution for.
SUCCESS_STATUSES = frozenset({"optimal", "feasible_optimal", "consensus"})


@dataclass
class SolveReport:
    """Outcome of one solve: status, cost, effort, and residual summary.

    ``x`` is the decision vector in the formulation's layout when the solve
    produced one, else None.  ``trials`` counts restarts / retrieved
    candidates; ``iterations`` counts the dominant inner loop of the method.
    """

    method: str
    status: str
    objective: float = np.nan
    wall_time: float = 0.0
    trials: int = 1
    iterations: int = 0
    max_violation: float = np.nan
    gap: float | None = None
    x: np.ndarray | None = None
    detail: dict = field(default_factory=dict)

    @property
    def success(self) -> bool:
        return self.status in SUCCESS_STATUSES

    def summary(self) -> str:
        obj = "-" if not np.isfinite(self.objective) else f"{self.objective:.4f}"
        viol = "-" if not np.isfinite(self.max_violation) else f"{self.max_violation:.2e}"
        return (f"{self.method}: {self.status} obj={obj} viol={viol} "
                f"trials={self.trials} iters={self.iterations} "
                f"time={self.wall_time:.3f}s")

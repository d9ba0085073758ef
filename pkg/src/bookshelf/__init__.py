"""Solvers and benchmarks for placing a book into a crowded shelf."""

__version__ = "0.1.0"

from .model import (BookGeometry, Pose, ProblemParams, Shelf, StoredBook,
                    build_problem, evaluate_constraints, objective_value)
from .miqp import GridSpec

__all__ = [
    "BookGeometry", "Pose", "ProblemParams", "Shelf", "StoredBook",
    "build_problem", "evaluate_constraints", "objective_value", "GridSpec",
    "__version__",
]

"""Dual decomposition QP solvers with certified inexact inner solves."""

from .model import (
    BlockPartition,
    BlockSparsity,
    Box,
    CoupledQP,
    ProblemConstants,
    constants,
    validate_problem,
)

__version__ = "0.1.0"

__all__ = [
    "BlockPartition",
    "BlockSparsity",
    "Box",
    "CoupledQP",
    "ProblemConstants",
    "constants",
    "validate_problem",
]

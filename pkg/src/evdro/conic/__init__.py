"""Self-contained conic solver: zero, nonnegative, second-order, rotated
second-order and positive-semidefinite cones."""

from .cones import NONNEG, PSD, RSOC, SOC, ZERO, Cone, cone_distance, project_cone, smat, svec
from .program import ConicProgram, ConstraintBlock, Expr, ProgramBuilder
from .solver import (DUAL_INFEASIBLE, MAX_ITER, OPTIMAL, PRIMAL_INFEASIBLE, ConicSolution,
                     SolverError, solve, verify_kkt)

__all__ = [
    "ZERO", "NONNEG", "SOC", "RSOC", "PSD", "Cone", "project_cone", "cone_distance", "svec", "smat",
    "ConicProgram", "ConstraintBlock", "Expr", "ProgramBuilder",
    "solve", "verify_kkt", "ConicSolution", "SolverError",
    "OPTIMAL", "PRIMAL_INFEASIBLE", "DUAL_INFEASIBLE", "MAX_ITER",
]

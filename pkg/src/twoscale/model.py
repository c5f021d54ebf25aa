"""End-to-end fitting of the two-time-scale additive hazard model."""

from __future__ import annotations

from dataclasses import dataclass

from .data import IncrementMatrix, SubjectCohort, counting_increments
from .grid import ThetaEstimate, TwoScaleGrid
from .marginal import DEFAULT_PINV_TOL, MarginalEstimate, marginal_estimates
from .operator import BlockOperator, build_operator
from .solver import Factorization, SolveReport, factorize, solve_backfit, solve_direct


@dataclass(frozen=True)
class TwoScaleFit:
    cohort: SubjectCohort
    grid: TwoScaleGrid
    increments: IncrementMatrix
    marginal: MarginalEstimate
    operator: BlockOperator
    factorization: Factorization
    theta: ThetaEstimate
    report: SolveReport


def fit(cohort: SubjectCohort, grid: TwoScaleGrid, *, method: str = "direct",
        pinv_tol: float = DEFAULT_PINV_TOL, tol: float = 1e-8, max_iter: int = 1000) -> TwoScaleFit:
    """Estimate ``(A, B)`` on ``grid`` under ``A_l(t_max) = 0`` for the shared components."""
    if method not in ("direct", "backfit"):
        raise ValueError(f"unknown method {method!r}")
    inc = counting_increments(cohort, grid)
    marginal = marginal_estimates(inc, pinv_tol)
    op = build_operator(inc, marginal)
    fac = factorize(op)
    if method == "direct":
        theta, report = solve_direct(op, marginal, factorization=fac)
    else:
        theta, report = solve_backfit(op, marginal, tol=tol, max_iter=max_iter)
    return TwoScaleFit(cohort, grid, inc, marginal, op, fac, theta, report)

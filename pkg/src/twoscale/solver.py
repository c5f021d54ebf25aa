"""Solving ``theta = m + Ebar theta`` and enforcing the identification constraint."""

from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass

import numpy as np
from scipy import linalg

from .grid import ThetaEstimate
from .operator import BlockOperator

MAX_CONDITION = 1e12
DIVERGENCE_FACTOR = 1e6


class IdentificationError(RuntimeError):
    """``I - Ebar`` is numerically singular, so the estimator is not identified."""


class DivergenceError(RuntimeError):
    """Backfitting iterates blew up; the spectral radius of ``Ebar`` is at least one."""


@dataclass(frozen=True)
class SolveReport:
    """Diagnostics of one solve.

    ``residual`` is the sup-norm fixed-point residual of the linear solve, before
    the final projection onto the constraint; ``constraint_residual`` is
    ``max_{l<=d} |A_l(t_max)|`` of the returned estimate.
    """

    method: str
    iterations: int
    residual: float
    constraint_residual: float
    converged: bool = True
    spectral_warning: bool = False
    condition: float = float("nan")

    def as_text(self) -> str:
        return "".join(f"{key}={value}\n" for key, value in asdict(self).items())


def constraint_residual(theta: ThetaEstimate, d: int) -> float:
    if d == 0:
        return 0.0
    return float(np.abs(theta.A.values[-1, :d]).max())


def project_constraint(theta: ThetaEstimate, d: int, t_max: float | None = None,
                       a0: float | None = None) -> ThetaEstimate:
    """Remove the identification ramp so that ``A_l(t_max) = 0`` for ``l < d``.

    Subtracts ``t A_l(t_max)/t_max`` from the shared duration components and adds
    ``(a - a0) A_l(t_max)/t_max`` to the matching age components.
    """
    t = theta.A.points
    a = theta.B.points
    t_max = t[-1] if t_max is None else t_max
    a0 = a[0] if a0 is None else a0
    A = theta.A.values.copy()
    B = theta.B.values.copy()
    slope = A[-1, :d] / t_max
    A[:, :d] -= t[:, None] * slope
    B[:, :d] += (a - a0)[:, None] * slope
    A[-1, :d] = 0.0
    return ThetaEstimate(type(theta.A)(theta.A.axis, t, A), type(theta.B)(theta.B.axis, a, B))


def projection_matrix(op: BlockOperator) -> np.ndarray:
    """Matrix form of :func:`project_constraint` on stacked vectors."""
    size, na, p, q = op.size, op.split, op.p, op.q
    g = op.grid
    P = np.eye(size)
    for c in range(op.d):
        col = (g.j - 1) * p + c
        P[np.arange(g.j) * p + c, col] -= g.t_points / g.t_max
        P[na + np.arange(g.k) * q + c, col] += (g.a_points - g.a0) / g.t_max
    return P


def clear_origin(vec: np.ndarray, rhs: np.ndarray, op: BlockOperator) -> np.ndarray:
    """Restore the exact values at ``t = 0`` and ``a = a0`` after a factorized solve.

    Where the operator row at an origin is zero, the equation there reads
    ``theta = rhs``; the factorization only reproduces that up to round-off.
    Works on the last axis (single vectors or stacks of them).
    """
    vec = np.array(vec, dtype=float, copy=True)
    rhs = np.asarray(rhs, dtype=float)
    for idx in (*range(op.p), *range(op.split, op.split + op.q)):
        if not op.matrix[idx].any():
            vec[..., idx] = rhs[..., idx]
    return vec


def fixed_point_residual(op: BlockOperator, m_hat: ThetaEstimate, theta: ThetaEstimate) -> float:
    vec = theta.stack()
    return float(np.abs(vec - m_hat.stack() - op.matrix @ vec).max())


@dataclass(frozen=True)
class Factorization:
    """LU factors of ``I - Ebar`` with a reciprocal condition estimate."""

    lu: tuple
    rcond: float

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        return linalg.lu_solve(self.lu, rhs)


def factorize(op: BlockOperator) -> Factorization:
    M = np.eye(op.size) - op.matrix
    with warnings.catch_warnings():
        # An exactly singular pivot is reported through rcond below.
        warnings.simplefilter("ignore", linalg.LinAlgWarning)
        lu, piv = linalg.lu_factor(M, check_finite=False)
    anorm = np.abs(M).sum(axis=0).max()
    rcond, info = linalg.lapack.dgecon(lu, anorm, norm="1")
    if info != 0:
        rcond = 0.0
    return Factorization((lu, piv), float(rcond))


def _as_theta(m_hat) -> ThetaEstimate:
    return getattr(m_hat, "m_hat", m_hat)


def solve_direct(op: BlockOperator, m_hat, *, factorization: Factorization | None = None,
                 project: bool = True) -> tuple[ThetaEstimate, SolveReport]:
    """Solve ``(I - Ebar) theta = m_hat`` by pivoted LU.

    ``m_hat`` is a :class:`ThetaEstimate` or a ``MarginalEstimate``.  With
    ``project`` the solution is finally passed through :func:`project_constraint`.
    """
    m_hat = _as_theta(m_hat)
    fac = factorization or factorize(op)
    if not fac.rcond > 1.0 / MAX_CONDITION:
        raise IdentificationError(
            f"I - Ebar is singular (condition estimate {1.0 / max(fac.rcond, 1e-300):.3g}); "
            "check the spectral report for extra unit eigenvalues")
    m = m_hat.stack()
    raw = ThetaEstimate.unstack(clear_origin(fac.solve(m), m, op), op.grid, op.p, op.q)
    residual = fixed_point_residual(op, m_hat, raw)
    theta = project_constraint(raw, op.d, op.t_max, op.a0) if project else raw
    return theta, SolveReport("direct", 0, residual, constraint_residual(theta, op.d),
                              condition=1.0 / fac.rcond)


def solve_backfit(op: BlockOperator, m_hat, tol: float = 1e-8, max_iter: int = 1000, *,
                  start: ThetaEstimate | None = None, project: bool = True
                  ) -> tuple[ThetaEstimate, SolveReport]:
    """Iterate ``theta <- m_hat + Ebar theta`` from ``start`` (default ``m_hat``).

    Stops when the sup-norm change drops below ``tol`` or after ``max_iter`` steps.
    """
    if not tol > 0:
        raise ValueError("tol must be positive")
    if max_iter < 1:
        raise ValueError("max_iter must be at least 1")
    m_hat = _as_theta(m_hat)
    m = m_hat.stack()
    x = m.copy() if start is None else start.stack()
    limit = DIVERGENCE_FACTOR * max(np.abs(m).max(), 1e-300)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        new = m + op.matrix @ x
        change = np.abs(new - x).max()
        x = new
        if not np.all(np.isfinite(x)) or np.abs(x).max() > limit:
            raise DivergenceError(
                f"backfitting diverged after {it} iterations; spectral radius of Ebar is >= 1")
        if change < tol:
            converged = True
            break
    raw = ThetaEstimate.unstack(x, op.grid, op.p, op.q)
    residual = fixed_point_residual(op, m_hat, raw)
    theta = project_constraint(raw, op.d, op.t_max, op.a0) if project else raw
    return theta, SolveReport("backfit", it, residual, constraint_residual(theta, op.d),
                              converged=converged, spectral_warning=not converged)


def neumann_partial_sums(op: BlockOperator, m_hat, r_max: int) -> list[np.ndarray]:
    """Stacked partial sums ``sum_{r<=R} Ebar^r m_hat`` for ``R = 0..r_max``."""
    m = _as_theta(m_hat).stack()
    term = m.copy()
    total = m.copy()
    out = [total.copy()]
    for _ in range(r_max):
        term = op.matrix @ term
        total = total + term
        out.append(total.copy())
    return out

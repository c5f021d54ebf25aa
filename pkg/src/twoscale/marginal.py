"""Marginal additive-Aalen estimators on the duration and age axes."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import IncrementMatrix
from .grid import ThetaEstimate, write_step_csv

DEFAULT_PINV_TOL = 1e-8


def cell_pinv(design: np.ndarray, tol: float = DEFAULT_PINV_TOL) -> tuple[np.ndarray, np.ndarray]:
    """Moore-Penrose inverses of a stack of ``(n, r)`` design matrices.

    Singular values below ``tol`` times the largest one are dropped.  Returns the
    inverses, shaped ``(cells, r, n)``, and a per-cell rank-deficiency flag.
    """
    if not tol > 0:
        raise ValueError("tol must be positive")
    design = np.asarray(design, dtype=float)
    u, sv, vt = np.linalg.svd(design, full_matrices=False)
    cutoff = tol * sv[..., :1]
    keep = (sv > cutoff) & (sv > 0)
    inv_sv = np.where(keep, 1.0 / np.where(keep, sv, 1.0), 0.0)
    pinv = np.einsum("...ji,...j,...kj->...ik", vt, inv_sv, u)
    flags = keep.sum(axis=-1) < design.shape[-1]
    return pinv, flags


def pinv_increment(design, dN, tol: float = DEFAULT_PINV_TOL) -> tuple[np.ndarray, bool]:
    """Least-squares increment ``C^- dN`` for one cell, with its rank-deficiency flag."""
    design = np.atleast_2d(np.asarray(design, dtype=float))
    if design.shape[0] != np.size(dN):
        design = design.reshape(np.size(dN), -1)
    pinv, flag = cell_pinv(design[None], tol)
    return pinv[0] @ np.asarray(dN, dtype=float), bool(flag[0])


@dataclass(frozen=True)
class MarginalEstimate:
    """Compound marginal estimator together with the per-cell pseudo-inverses.

    ``pinv_dur[l]`` is ``X(t_l)^-`` (shape ``(p, n)``), ``pinv_age[m]`` is
    ``Z^{-a}(u_m)^-`` (shape ``(q, n)``); index 0 is zero on both axes.
    """

    m_hat: ThetaEstimate
    rank_flags_dur: np.ndarray
    rank_flags_age: np.ndarray
    pinv_dur: np.ndarray
    pinv_age: np.ndarray

    def accumulate(self, dur_dN: np.ndarray, age_dN: np.ndarray) -> np.ndarray:
        """Stacked marginal paths for (batches of) increment matrices.

        ``dur_dN`` is ``(..., j, n)`` and ``age_dN`` is ``(..., k, n)``; the result
        is ``(..., p*j + q*k)`` in the stacked layout of :class:`ThetaEstimate`.
        """
        a = np.cumsum(np.einsum("lrn,...ln->...lr", self.pinv_dur, dur_dN), axis=-2)
        b = np.cumsum(np.einsum("mrn,...mn->...mr", self.pinv_age, age_dN), axis=-2)
        lead = a.shape[:-2]
        return np.concatenate([a.reshape(lead + (-1,)), b.reshape(lead + (-1,))], axis=-1)


def marginal_estimates(inc: IncrementMatrix, tol: float = DEFAULT_PINV_TOL) -> MarginalEstimate:
    """Running sums of per-cell least-squares increments on both axes.

    The age axis uses the shifted designs ``Z^{-a}`` and the age-snapped events.
    """
    pinv_dur, flags_dur = cell_pinv(inc.dur_X, tol)
    pinv_age, flags_age = cell_pinv(inc.age_Z, tol)
    pinv_dur[0] = 0.0
    pinv_age[0] = 0.0
    flags_dur[0] = flags_age[0] = False
    est = MarginalEstimate(None, flags_dur, flags_age, pinv_dur, pinv_age)
    m_hat = ThetaEstimate.unstack(est.accumulate(inc.dur_dN, inc.age_dN), inc.grid, inc.p, inc.q)
    return MarginalEstimate(m_hat, flags_dur, flags_age, pinv_dur, pinv_age)


def write_marginal_csv(est: MarginalEstimate, stream=None) -> str:
    """Step-function CSV of both marginal paths plus a ``rank_deficient`` column."""
    A, B = est.m_hat.A, est.m_hat.B
    flags = [np.repeat(est.rank_flags_dur[:, None], A.dim, axis=1),
             np.repeat(est.rank_flags_age[:, None], B.dim, axis=1)]
    return write_step_csv([A, B], stream, extra={"rank_deficient": flags})

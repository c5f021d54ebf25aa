"""Wild bootstrap of the estimation error, standard errors and uniform bands.

A replicate is the projected solution ``P (I - Ebar)^{-1} M`` where ``M`` is the
marginal accumulation of weighted increments.  Variant 1 weights the counting
increments, ``G_i dN_i``; variant 2 weights the residual increments
``G_i (dN_i - dLambda_i)`` of the fitted model.  Both are linear in ``G``.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np

from .data import IncrementMatrix
from .grid import AGE, DURATION, ThetaEstimate, step_eval_clamped
from .marginal import MarginalEstimate
from .operator import BlockOperator
from .solver import Factorization, clear_origin, factorize, projection_matrix

WEIGHT_LAWS = ("normal", "rademacher")
DEFAULT_REPLICATES = 100
# Standard errors below this fraction of the largest one are round-off on
# structurally pinned points (the origin, the constrained endpoint) and count as 0.
SIGMA_FLOOR = 1e-10


def _replicate_seed(seed: int, r: int) -> np.random.SeedSequence:
    # Replicate r always draws from the same stream, whatever the batching.
    return np.random.SeedSequence(seed, spawn_key=(r,))


def wild_weights(n: int, seed, dist: str = "normal") -> np.ndarray:
    """``n`` i.i.d. mean-zero, unit-variance multipliers.

    ``seed`` is anything accepted by :func:`numpy.random.default_rng`.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    if dist not in WEIGHT_LAWS:
        raise ValueError(f"unknown weight law {dist!r}; choose from {WEIGHT_LAWS}")
    rng = np.random.default_rng(seed)
    if dist == "normal":
        return rng.standard_normal(n)
    return rng.choice(np.array([-1.0, 1.0]), size=n)


def weight_matrix(n: int, replicates: int, seed: int, dist: str = "normal",
                  start: int = 0) -> np.ndarray:
    """Weights of replicates ``start .. start + replicates - 1``, one row each."""
    return np.stack([wild_weights(n, _replicate_seed(seed, r), dist)
                     for r in range(start, start + replicates)]) if replicates else np.zeros((0, n))


def residual_increments(inc: IncrementMatrix, theta_hat: ThetaEstimate) -> tuple[np.ndarray, np.ndarray]:
    """Per-cell residuals ``dN_i - X_i dA - Z_i dB(. + a_i)`` on both axes.

    The cross-axis increments are read off the fitted step functions over each
    subject's shifted window.  Returns arrays shaped like ``dur_dN`` and ``age_dN``.
    """
    g = inc.grid
    A, B = theta_hat.A, theta_hat.B
    t, u, a = g.t_points, g.a_points, inc.entry

    dA = np.diff(A.values, axis=0, prepend=0.0)
    dA[0] = 0.0
    lo = np.concatenate([[t[0]], t[:-1]])
    B_hi = step_eval_clamped(u, B.values, t[:, None] + a[None, :])
    B_lo = step_eval_clamped(u, B.values, lo[:, None] + a[None, :])
    dB_shift = B_hi - B_lo
    dur = (inc.dur_dN - np.einsum("lnp,lp->ln", inc.dur_X, dA)
           - np.einsum("lnq,lnq->ln", inc.dur_Z, dB_shift))
    dur[0] = 0.0

    dB = np.diff(B.values, axis=0, prepend=0.0)
    dB[0] = 0.0
    lo = np.concatenate([[u[0]], u[:-1]])
    A_hi = step_eval_clamped(t, A.values, u[:, None] - a[None, :])
    A_lo = step_eval_clamped(t, A.values, lo[:, None] - a[None, :])
    dA_shift = A_hi - A_lo
    age = (inc.age_dN - np.einsum("mnq,mq->mn", inc.age_Z, dB)
           - np.einsum("mnp,mnp->mn", inc.age_X, dA_shift))
    age[0] = 0.0
    return dur, age


@dataclass(frozen=True)
class ReplicateEngine:
    """Everything needed to turn weight vectors into projected error paths."""

    marginal: MarginalEstimate
    op: BlockOperator
    factorization: Factorization
    dur_base: np.ndarray
    age_base: np.ndarray
    projection: np.ndarray
    variant: int

    @classmethod
    def build(cls, inc: IncrementMatrix, marginal: MarginalEstimate, op: BlockOperator,
              theta_hat: ThetaEstimate | None = None, variant: int = 1,
              factorization: Factorization | None = None, project: bool = True
              ) -> ReplicateEngine:
        if variant not in (1, 2):
            raise ValueError("variant must be 1 or 2")
        if (inc.p, inc.q, inc.grid) != (op.p, op.q, op.grid):
            raise ValueError("increments and operator do not share dimensions")
        if variant == 1:
            dur, age = inc.dur_dN, inc.age_dN
        else:
            if theta_hat is None:
                raise ValueError("variant 2 needs the fitted theta")
            if (theta_hat.p, theta_hat.q) != (op.p, op.q):
                raise ValueError("theta does not match the operator's dimensions")
            dur, age = residual_increments(inc, theta_hat)
        P = projection_matrix(op) if project else np.eye(op.size)
        return cls(marginal, op, factorization or factorize(op), dur, age, P, variant)

    @property
    def n(self) -> int:
        return self.dur_base.shape[1]

    def paths(self, G: np.ndarray) -> np.ndarray:
        """Stacked replicate paths for weights ``G`` shaped ``(B, n)`` or ``(n,)``."""
        G = np.asarray(G, dtype=float)
        single = G.ndim == 1
        G = np.atleast_2d(G)
        if G.shape[1] != self.n:
            raise ValueError(f"expected {self.n} weights per replicate, got {G.shape[1]}")
        M = self.marginal.accumulate(G[:, None, :] * self.dur_base, G[:, None, :] * self.age_base)
        sol = clear_origin(self.factorization.solve(M.T).T, M, self.op)
        out = sol @ self.projection.T
        return out[0] if single else out


def bootstrap_replicate(inc: IncrementMatrix, theta_hat: ThetaEstimate, op: BlockOperator,
                        G: np.ndarray, variant: int = 1, marginal: MarginalEstimate | None = None,
                        factorization: Factorization | None = None) -> ThetaEstimate:
    """One wild-bootstrap error path for the multipliers ``G``.

    ``marginal`` supplies the pseudo-inverses; it is recomputed from ``inc`` if
    omitted.
    """
    if marginal is None:
        from .marginal import marginal_estimates
        marginal = marginal_estimates(inc)
    engine = ReplicateEngine.build(inc, marginal, op, theta_hat, variant, factorization)
    return ThetaEstimate.unstack(engine.paths(G), op.grid, op.p, op.q)


@dataclass(frozen=True)
class BootstrapEnsemble:
    """``replicates`` holds one stacked error path per row."""

    replicates: np.ndarray
    variant: int
    weights: str
    seed: int
    grid: object
    p: int
    q: int

    @property
    def size(self) -> int:
        return self.replicates.shape[0]

    @property
    def split(self) -> int:
        return self.grid.j * self.p

    def replicate(self, r: int) -> ThetaEstimate:
        return ThetaEstimate.unstack(self.replicates[r], self.grid, self.p, self.q)

    def axis_paths(self, axis: str) -> np.ndarray:
        """Replicates restricted to one axis, shaped ``(B, points, components)``."""
        if axis == DURATION:
            return self.replicates[:, :self.split].reshape(self.size, self.grid.j, self.p)
        if axis == AGE:
            return self.replicates[:, self.split:].reshape(self.size, self.grid.k, self.q)
        raise ValueError(f"unknown axis {axis!r}")


def run_bootstrap(inc: IncrementMatrix, marginal: MarginalEstimate, op: BlockOperator,
                  theta_hat: ThetaEstimate | None = None, *, replicates: int = DEFAULT_REPLICATES,
                  variant: int = 1, weights: str = "normal", seed: int = 0,
                  factorization: Factorization | None = None, project: bool = True,
                  chunk: int = 50) -> BootstrapEnsemble:
    """Draw ``replicates`` error paths; ``chunk`` affects only round-off.

    With ``project`` (the default) each path goes through the same constraint
    projection as the estimate, so it mimics the error of the returned estimator;
    without it the paths are the raw solutions ``(I - Ebar)^{-1} M``.
    """
    if replicates < 1:
        raise ValueError("need at least one replicate")
    engine = ReplicateEngine.build(inc, marginal, op, theta_hat, variant, factorization, project)
    blocks = []
    for start in range(0, replicates, chunk):
        size = min(chunk, replicates - start)
        blocks.append(engine.paths(weight_matrix(engine.n, size, seed, weights, start)))
    return BootstrapEnsemble(np.concatenate(blocks), variant, weights, int(seed), op.grid, op.p, op.q)


def pointwise_se(ensemble: BootstrapEnsemble) -> ThetaEstimate:
    """Sample standard deviation across replicates at every grid point."""
    if ensemble.size < 2:
        raise ValueError("need at least two replicates for a standard error")
    sd = ensemble.replicates.std(axis=0, ddof=1)
    return ThetaEstimate.unstack(sd, ensemble.grid, ensemble.p, ensemble.q)


def band_quantile(sup_stats: np.ndarray, alpha: float) -> float:
    """The ``ceil((1 - alpha) B)``-th order statistic of the sup statistics."""
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    stats = np.sort(np.asarray(sup_stats, dtype=float))
    rank = math.ceil((1.0 - alpha) * stats.size - 1e-9)
    return float(stats[max(rank, 1) - 1])


@dataclass(frozen=True)
class BandResult:
    """Uniform band ``estimate +- c_quantile * sigma`` on ``points``.

    ``included`` marks the points that entered the sup statistic; elsewhere
    (outside the range, or zero standard error) the band collapses to the
    estimate itself.
    """

    points: np.ndarray
    estimate: np.ndarray
    sigma: np.ndarray
    c_quantile: float
    band_lower: np.ndarray
    band_upper: np.ndarray
    alpha: float
    range: tuple[float, float]
    included: np.ndarray

    def covers(self, truth, atol: float = 1e-12) -> bool:
        """Whether ``truth`` lies inside the band at every included point."""
        truth = np.asarray(truth, dtype=float)
        inc = self.included
        return bool(np.all((truth[inc] >= self.band_lower[inc] - atol)
                           & (truth[inc] <= self.band_upper[inc] + atol)))


def band_from_paths(paths: np.ndarray, sigma: np.ndarray, estimate: np.ndarray, points: np.ndarray,
                    alpha: float = 0.05, range_: tuple[float, float] | None = None) -> BandResult:
    """Band for one curve from replicate paths shaped ``(B, points)``."""
    points = np.asarray(points, dtype=float)
    lo, hi = (points[0], points[-1]) if range_ is None else range_
    floor = SIGMA_FLOOR * max(float(np.max(sigma, initial=0.0)), 1e-300)
    included = (points >= lo) & (points <= hi) & (sigma > floor)
    if not included.any():
        raise ValueError("no grid point with positive standard error in the band range")
    ratio = np.abs(paths[:, included]) / sigma[included]
    c = band_quantile(ratio.max(axis=1), alpha)
    half = np.where(included, c * sigma, 0.0)
    return BandResult(points, estimate, sigma, c, estimate - half, estimate + half, alpha,
                      (float(lo), float(hi)), included)


def uniform_band(ensemble: BootstrapEnsemble, sigma: ThetaEstimate, theta_hat: ThetaEstimate,
                 alpha: float = 0.05, axis: str = DURATION, component: int = 0,
                 range_: tuple[float, float] | None = None) -> BandResult:
    """Uniform band for one component on one axis over ``range_`` (default: whole axis)."""
    est = theta_hat.A if axis == DURATION else theta_hat.B
    sd = sigma.A if axis == DURATION else sigma.B
    paths = ensemble.axis_paths(axis)[:, :, component]
    return band_from_paths(paths, sd.values[:, component], est.values[:, component], est.points,
                           alpha, range_)


@dataclass(frozen=True)
class SurvivalPrediction:
    t: np.ndarray
    cumulative: np.ndarray
    survival: np.ndarray
    band_lower: np.ndarray
    band_upper: np.ndarray
    band: BandResult | None


def survival_functional(grid, p: int, q: int, entry_age: float,
                        x: np.ndarray | None = None, z: np.ndarray | None = None) -> np.ndarray:
    """Matrix taking stacked ``(A, B)`` to ``x.A(t) + z.(B(a + t) - B(a))`` at the duration points."""
    if entry_age < grid.a0 or entry_age + grid.t_max > grid.a_max + 1e-12:
        raise ValueError(f"entry age {entry_age} outside the age grid [{grid.a0}, {grid.a_max - grid.t_max}]")
    x = np.ones(p) if x is None else np.asarray(x, dtype=float)
    z = np.ones(q) if z is None else np.asarray(z, dtype=float)
    if x.shape != (p,) or z.shape != (q,):
        raise ValueError("covariate vectors must match the component counts")
    j, k = grid.j, grid.k
    L = np.zeros((j, j * p + k * q))
    for c in range(p):
        L[np.arange(j), np.arange(j) * p + c] = x[c]
    u = grid.a_points

    def pick(age):
        # Column of the age point used by the step function at ``age``.
        return np.searchsorted(u, age + 1e-12 * max(1.0, abs(age)), side="right") - 1

    base = pick(entry_age)
    for l, t in enumerate(grid.t_points):
        m = pick(entry_age + t)
        for c in range(q):
            if m >= 0:
                L[l, j * p + m * q + c] += z[c]
            if base >= 0:
                L[l, j * p + base * q + c] -= z[c]
    return L


def predict_survival(theta_hat: ThetaEstimate, ensemble: BootstrapEnsemble | None, grid,
                     entry_age: float, alpha: float = 0.05, x=None, z=None) -> SurvivalPrediction:
    """``S(t) = exp(-[B(a+t) - B(a) + A(t)])`` with a band built on the cumulative scale."""
    L = survival_functional(grid, theta_hat.p, theta_hat.q, entry_age, x, z)
    cum = L @ theta_hat.stack()
    t = grid.t_points
    surv = np.exp(-cum)
    if ensemble is None or ensemble.size < 2:
        nan = np.full_like(cum, np.nan)
        return SurvivalPrediction(t, cum, surv, nan, nan.copy(), None)
    paths = ensemble.replicates @ L.T
    sigma = paths.std(axis=0, ddof=1)
    band = band_from_paths(paths, sigma, cum, t, alpha)
    return SurvivalPrediction(t, cum, surv, np.exp(-band.band_upper), np.exp(-band.band_lower), band)


def _normal_quantile(alpha: float) -> float:
    from scipy.stats import norm
    return float(norm.ppf(1.0 - alpha / 2.0))


def write_estimates_csv(theta_hat: ThetaEstimate, stream=None, ensemble: BootstrapEnsemble | None = None,
                        alpha: float = 0.05) -> str | None:
    """Estimates with SE, pointwise interval and uniform band per axis and component.

    Without an ensemble (or with fewer than two replicates) only the estimate
    columns are written.
    """
    own = stream is None
    stream = io.StringIO() if own else stream
    writer = csv.writer(stream, lineterminator="\n")
    with_se = ensemble is not None and ensemble.size >= 2
    header = ["axis", "point", "component", "estimate"]
    if with_se:
        header += ["se", "ci_lower", "ci_upper", "band_lower", "band_upper"]
        sigma = pointwise_se(ensemble)
        zq = _normal_quantile(alpha)
    writer.writerow(header)
    for axis, f in ((DURATION, theta_hat.A), (AGE, theta_hat.B)):
        for c in range(f.values.shape[1]):
            if with_se:
                band = uniform_band(ensemble, sigma, theta_hat, alpha, axis, c)
            for i, x in enumerate(f.points):
                row = [axis, repr(float(x)), c, repr(float(f.values[i, c]))]
                if with_se:
                    s = band.sigma[i]
                    row += [repr(float(s)), repr(float(f.values[i, c] - zq * s)),
                            repr(float(f.values[i, c] + zq * s)),
                            repr(float(band.band_lower[i])), repr(float(band.band_upper[i]))]
                writer.writerow(row)
    return stream.getvalue() if own else None


def write_survival_csv(pred: SurvivalPrediction, stream=None) -> str | None:
    own = stream is None
    stream = io.StringIO() if own else stream
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(["t", "survival", "band_lower", "band_upper"])
    for row in zip(pred.t, pred.survival, pred.band_lower, pred.band_upper):
        writer.writerow([repr(float(v)) for v in row])
    return stream.getvalue() if own else None

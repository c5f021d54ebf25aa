"""Simulation scenario with piecewise-constant hazards on both time scales, and the
Monte Carlo bias and coverage studies built on it."""

from __future__ import annotations

import csv
import hashlib
import io
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass

import numpy as np

from .data import CovariatePath, SubjectCohort, SubjectRecord
from .grid import AGE, DURATION, StepFunctionVec, ThetaEstimate, TwoScaleGrid, build_grid

TABLE_INDICES = (19, 39, 59, 79, 99)


@dataclass(frozen=True)
class PiecewiseRate:
    """Rate ``rates[r]`` on ``(knots[r], knots[r+1]]``; the last rate continues past the last knot."""

    knots: tuple[float, ...]
    rates: tuple[float, ...]

    def __post_init__(self):
        if len(self.knots) != len(self.rates) + 1:
            raise ValueError("need one more knot than rates")
        if any(b <= a for a, b in zip(self.knots, self.knots[1:])):
            raise ValueError("knots must be strictly increasing")

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        idx = np.clip(np.searchsorted(self.knots, x, side="left") - 1, 0, len(self.rates) - 1)
        return np.asarray(self.rates)[idx]

    def integral(self, x) -> np.ndarray:
        """``int_{knots[0]}^x rate``; rates extend flat beyond both ends."""
        x = np.asarray(x, dtype=float)
        knots = np.asarray(self.knots)
        rates = np.asarray(self.rates)
        cum = np.concatenate([[0.0], np.cumsum(rates * np.diff(knots))])
        idx = np.clip(np.searchsorted(knots, x, side="right") - 1, 0, len(rates) - 1)
        return cum[idx] + rates[idx] * (x - knots[idx])


@dataclass(frozen=True)
class Scenario:
    """Hazard ``alpha(t) + beta(t + a)`` for subjects at risk; at-risk designs only."""

    alpha: PiecewiseRate = PiecewiseRate((0.0, 0.25, 0.5, 5.0), (0.32, 0.48, -2.0 / 45.0))
    beta: PiecewiseRate = PiecewiseRate((0.0, 35.0), (0.067,))
    entry_zero_prob: float = 0.10
    entry_max: float = 30.0
    censor_time: float = 5.0
    a0: float = 0.0
    a_max: float = 35.0
    grid_time: int = 100
    grid_age: int = 100

    def __post_init__(self):
        if not 0 <= self.entry_zero_prob <= 1:
            raise ValueError("entry_zero_prob must lie in [0, 1]")
        if self.entry_max < 0 or self.censor_time <= 0:
            raise ValueError("entry_max must be >= 0 and censor_time > 0")
        if self.a0 > 0 or self.entry_max + self.censor_time > self.a_max:
            raise ValueError("age range does not cover all entry ages and follow-up")
        if self.grid_time < 2 or self.grid_age < 2:
            raise ValueError("grids need at least 2 points")
        # Sample the total hazard on a fine mesh of reachable (t, a).
        t = np.linspace(0.0, self.censor_time, 501)
        a = np.linspace(0.0, self.entry_max, 51)
        total = self.alpha(t)[None, :] + self.beta(t[None, :] + a[:, None])
        if np.any(total <= 0):
            raise ValueError("total hazard must be positive on the reachable region")

    def hazard(self, t, entry_age):
        return self.alpha(t) + self.beta(np.asarray(t) + entry_age)

    def grid(self) -> TwoScaleGrid:
        return build_grid(self.censor_time, self.a0, self.a_max, self.grid_time, self.grid_age)

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


DEFAULT_SCENARIO = Scenario()


def _rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def sample_event_times(scenario: Scenario, entry: np.ndarray, rng) -> tuple[np.ndarray, np.ndarray]:
    """Exact inverse-transform draws from the piecewise-exponential hazard, censored.

    Returns exit times and event flags.
    """
    rng = _rng(rng)
    entry = np.asarray(entry, dtype=float)
    target = rng.exponential(size=entry.size)
    c = scenario.censor_time
    exit_ = np.full(entry.size, c)
    if len(scenario.beta.rates) == 1:
        knots = np.unique(np.clip(np.concatenate([scenario.alpha.knots, [0.0, c]]), 0.0, c))
        cum = scenario.alpha.integral(knots) - scenario.alpha.integral(0.0) + scenario.beta.rates[0] * knots
        hit = target <= cum[-1]
        exit_[hit] = np.interp(target[hit], cum, knots)
        return exit_, hit
    hit = np.zeros(entry.size, dtype=bool)
    base = np.concatenate([scenario.alpha.knots, [0.0, c]])
    for i, a in enumerate(entry):
        knots = np.unique(np.clip(np.concatenate([base, np.asarray(scenario.beta.knots) - a]), 0.0, c))
        cum = (scenario.alpha.integral(knots) - scenario.alpha.integral(0.0)
               + scenario.beta.integral(knots + a) - scenario.beta.integral(a))
        if target[i] <= cum[-1]:
            hit[i] = True
            exit_[i] = np.interp(target[i], cum, knots)
    return exit_, hit


def sample_entry_ages(scenario: Scenario, n: int, rng) -> np.ndarray:
    rng = _rng(rng)
    at_zero = rng.random(n) < scenario.entry_zero_prob
    return np.where(at_zero, 0.0, rng.uniform(0.0, scenario.entry_max, n))


def simulate_cohort(n: int, scenario: Scenario = DEFAULT_SCENARIO, seed=None) -> SubjectCohort:
    """Cohort of ``n`` subjects with shared at-risk designs ``X = Z = Y``."""
    if n < 1:
        raise ValueError("n must be at least 1")
    rng = _rng(seed)
    entry = sample_entry_ages(scenario, n, rng)
    exit_, event = sample_event_times(scenario, entry, rng)
    one = CovariatePath.constant([1.0])
    subjects = [SubjectRecord(str(i + 1), float(a), float(t), bool(e), one, one)
                for i, (a, t, e) in enumerate(zip(entry, exit_, event))]
    return SubjectCohort(tuple(subjects), d=1, t_max=scenario.censor_time, a0=scenario.a0,
                         a_max=scenario.a_max, x_names=("Y",), z_names=("Y",))


def true_cumulatives(scenario: Scenario, grid: TwoScaleGrid | None = None) -> ThetaEstimate:
    """Exact ``A(t) = int_0^t alpha`` and ``B(a) = int_{a0}^a beta`` at the grid points."""
    grid = grid or scenario.grid()
    A = scenario.alpha.integral(grid.t_points) - scenario.alpha.integral(0.0)
    B = scenario.beta.integral(grid.a_points) - scenario.beta.integral(grid.a0)
    return ThetaEstimate(StepFunctionVec(DURATION, grid.t_points, A),
                         StepFunctionVec(AGE, grid.a_points, B))


# Monte Carlo studies --------------------------------------------------------

POINTWISE_Z = 1.959963984540054
COVER_ATOL = 1e-12


def rep_seeds(seed: int, rep: int) -> tuple[np.random.SeedSequence, int]:
    """Cohort seed sequence and bootstrap master seed of repetition ``rep``."""
    cohort = np.random.SeedSequence(seed, spawn_key=(rep, 0))
    boot = int(np.random.SeedSequence(seed, spawn_key=(rep, 1)).generate_state(1)[0])
    return cohort, boot


@dataclass(frozen=True)
class RepOutcome:
    """Per-repetition output; bootstrap fields are ``None`` for a bias-only run."""

    error: np.ndarray
    se: np.ndarray | None = None
    band_cover_duration: bool | None = None
    band_cover_age: bool | None = None


def _one_rep(args) -> RepOutcome:
    from .bootstrap import pointwise_se, run_bootstrap, uniform_band
    from .model import fit

    n, scenario, seed, rep, B, alpha, variant = args
    grid = scenario.grid()
    cohort_seed, boot_seed = rep_seeds(seed, rep)
    result = fit(simulate_cohort(n, scenario, np.random.default_rng(cohort_seed)), grid)
    truth = true_cumulatives(scenario, grid)
    error = result.theta.stack() - truth.stack()
    if B == 0:
        return RepOutcome(error)
    ens = run_bootstrap(result.increments, result.marginal, result.operator, result.theta,
                        replicates=B, variant=variant, seed=boot_seed,
                        factorization=result.factorization)
    sigma = pointwise_se(ens)
    covers = []
    for axis, f in ((DURATION, truth.A), (AGE, truth.B)):
        band = uniform_band(ens, sigma, result.theta, alpha, axis, 0)
        covers.append(band.covers(f.values[:, 0], COVER_ATOL))
    return RepOutcome(error, sigma.stack(), covers[0], covers[1])


@dataclass(frozen=True)
class StudyResult:
    """Aggregated Monte Carlo results on the full grid (stacked layout).

    Coverage fields are ``None`` for a bias study.  ``sd`` is the Monte Carlo
    standard deviation of the estimates (divisor ``reps - 1``).
    """

    n: int
    reps: int
    B: int
    alpha: float
    seed: int
    scenario: Scenario
    bias: np.ndarray
    sd: np.ndarray
    mean_se: np.ndarray | None = None
    pointwise_coverage: np.ndarray | None = None
    band_coverage_duration: float | None = None
    band_coverage_age: float | None = None

    @property
    def grid(self) -> TwoScaleGrid:
        return self.scenario.grid()

    def axis(self, name: str, field_name: str = "bias", indices=TABLE_INDICES) -> tuple[np.ndarray, np.ndarray]:
        """Points and values of one field (component 0) at ``indices`` of one axis."""
        g = self.grid
        vec = getattr(self, field_name)
        idx = np.asarray(indices)
        if name == DURATION:
            return g.t_points[idx], vec[:g.j][idx]
        if name == AGE:
            return g.a_points[idx], vec[g.j:][idx]
        raise ValueError(f"unknown axis {name!r}")

    def meta(self) -> dict:
        g = self.grid
        return dict(seed=self.seed, n=self.n, reps=self.reps, B=self.B, alpha=self.alpha,
                    grid=dict(j=g.j, k=g.k, t_max=g.t_max, a0=g.a0, a_max=g.a_max),
                    scenario=self.scenario.to_dict(), scenario_hash=self.scenario.digest())


def _run(n: int, reps: int, scenario: Scenario, seed: int, B: int, alpha: float, variant: int,
         workers: int | None) -> list[RepOutcome]:
    if n < 1 or reps < 1:
        raise ValueError("n and reps must be at least 1")
    jobs = [(n, scenario, seed, r, B, alpha, variant) for r in range(reps)]
    if workers and workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_one_rep, jobs, chunksize=max(1, reps // (4 * workers))))
    return [_one_rep(job) for job in jobs]


def bias_study(n: int, reps: int, scenario: Scenario = DEFAULT_SCENARIO, seed: int = 0, *,
               workers: int | None = None) -> StudyResult:
    """Mean error and Monte Carlo sd of the constrained direct-solve estimates."""
    out = _run(n, reps, scenario, seed, 0, 0.05, 1, workers)
    err = np.stack([o.error for o in out])
    sd = err.std(axis=0, ddof=1) if reps > 1 else np.zeros(err.shape[1])
    return StudyResult(n, reps, 0, 0.05, seed, scenario, err.mean(axis=0), sd)


def coverage_study(n: int, reps: int, B: int = 100, alpha: float = 0.05,
                   scenario: Scenario = DEFAULT_SCENARIO, seed: int = 0, *, variant: int = 1,
                   workers: int | None = None) -> StudyResult:
    """Bootstrap SEs, pointwise and uniform-band coverage of the truth."""
    if B < 2:
        raise ValueError("B must be at least 2")
    out = _run(n, reps, scenario, seed, B, alpha, variant, workers)
    err = np.stack([o.error for o in out])
    se = np.stack([o.se for o in out])
    z = POINTWISE_Z if alpha == 0.05 else _z(alpha)
    sd = err.std(axis=0, ddof=1) if reps > 1 else np.zeros(err.shape[1])
    return StudyResult(n, reps, B, alpha, seed, scenario, err.mean(axis=0), sd, se.mean(axis=0),
                       pointwise_coverage(err, se, z),
                       float(np.mean([o.band_cover_duration for o in out])),
                       float(np.mean([o.band_cover_age for o in out])))


def pointwise_coverage(err: np.ndarray, se: np.ndarray, z: float = POINTWISE_Z) -> np.ndarray:
    """Fraction of repetitions with ``|err| <= z * se`` at each point.

    Points whose standard error is zero (up to :data:`SIGMA_FLOOR` relative to the
    repetition's largest) carry a zero-width interval around a value the
    constraint pins exactly; coverage is undefined there and only defined
    repetitions count.  A point undefined in every repetition gets ``nan``.
    """
    from .bootstrap import SIGMA_FLOOR

    floor = SIGMA_FLOOR * np.max(se, axis=1, keepdims=True)
    defined = se > floor
    hit = (np.abs(err) <= z * se + COVER_ATOL) & defined
    count = defined.sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(count > 0, hit.sum(axis=0) / count, np.nan)


def _z(alpha: float) -> float:
    from scipy.stats import norm
    return float(norm.ppf(1 - alpha / 2))


def _fmt(x: float) -> str:
    return repr(float(x))


def write_bias_table(results: list[StudyResult], stream=None) -> str | None:
    """Bias table: one row per axis, point and sample size."""
    own = stream is None
    stream = io.StringIO() if own else stream
    w = csv.writer(stream, lineterminator="\n")
    w.writerow(["axis", "point", "n", "bias"])
    for axis in (DURATION, AGE):
        for res in results:
            pts, vals = res.axis(axis, "bias")
            for x, v in zip(pts, vals):
                w.writerow([axis, _fmt(x), res.n, _fmt(v)])
    return stream.getvalue() if own else None


def write_uncertainty_table(results: list[StudyResult], stream=None) -> str | None:
    """Uncertainty table: mean bootstrap SE, Monte Carlo sd and pointwise coverage."""
    own = stream is None
    stream = io.StringIO() if own else stream
    w = csv.writer(stream, lineterminator="\n")
    w.writerow(["axis", "point", "n", "mean_se", "sd", "coverage"])
    for axis in (DURATION, AGE):
        for res in results:
            pts, se = res.axis(axis, "mean_se")
            _, sd = res.axis(axis, "sd")
            _, cov = res.axis(axis, "pointwise_coverage")
            for row in zip(pts, se, sd, cov):
                w.writerow([axis, _fmt(row[0]), res.n] + [_fmt(v) for v in row[1:]])
    return stream.getvalue() if own else None


def write_band_table(results: list[StudyResult], stream=None) -> str | None:
    """Band table: uniform band coverage per axis and sample size."""
    own = stream is None
    stream = io.StringIO() if own else stream
    w = csv.writer(stream, lineterminator="\n")
    w.writerow(["n", "band_coverage_age", "band_coverage_duration"])
    for res in results:
        w.writerow([res.n, _fmt(res.band_coverage_age), _fmt(res.band_coverage_duration)])
    return stream.getvalue() if own else None


def study_meta(results: list[StudyResult]) -> dict:
    return dict(studies=[r.meta() for r in results])

"""Acceptance suite: each test checks one criterion at its stated tolerance and
records a pass/fail line, printed again in the terminal summary.

The Monte Carlo studies take a few minutes on one core.
"""

import numpy as np
import pytest

from twoscale.bootstrap import run_bootstrap
from twoscale.data import CovariatePath, SubjectCohort, SubjectRecord
from twoscale.grid import AGE, DURATION, ThetaEstimate
from twoscale.model import fit
from twoscale.operator import spectral_report
from twoscale.simulation import (DEFAULT_SCENARIO, TABLE_INDICES, bias_study, coverage_study,
                                 simulate_cohort)
from twoscale.solver import constraint_residual, project_constraint, solve_backfit

from conftest import record_criterion
from test_marginal import nelson_aalen_on_grid
from test_operator import full_risk, ramp_pair
from test_solver import constrained_least_squares

pytestmark = [pytest.mark.acceptance,
              pytest.mark.filterwarnings("ignore:power iteration did not converge")]

SEED = 20240601
REPS = 1000
REDUCED_REPS = 200
BOOT = 100

# Reference Monte Carlo values at n = 400 for the tabulated points.
REF_BIAS_DURATION = np.array([0.006, 0.005, 0.003, 0.002, 0.0])
REF_BIAS_AGE = np.array([-0.004, -0.006, 0.002, 0.010, 0.013])
DURATION_POINTS = np.array([0.96, 1.97, 2.98, 3.99, 5.0])
AGE_POINTS = np.array([6.717, 13.788, 20.859, 27.929, 35.0])


def fmt(values) -> str:
    return "[" + " ".join(f"{v:.4f}" for v in np.atleast_1d(values)) + "]"


@pytest.fixture(scope="module")
def cov400():
    return coverage_study(400, REPS, B=BOOT, seed=SEED)


@pytest.fixture(scope="module")
def cov100():
    return coverage_study(100, REPS, B=BOOT, seed=SEED)


@pytest.fixture(scope="module")
def bias200():
    return bias_study(200, REPS, seed=SEED)


@pytest.fixture(scope="module")
def sim_grid_():
    return DEFAULT_SCENARIO.grid()


def test_tabulated_points_match_grid(sim_grid_):
    assert np.allclose(sim_grid_.t_points[list(TABLE_INDICES)], DURATION_POINTS, atol=0.005)
    assert np.allclose(sim_grid_.a_points[list(TABLE_INDICES)], AGE_POINTS, atol=0.0005)


class TestBias:
    def _check(self, res, tol_dur, tol_age):
        _, dur = res.axis(DURATION, "bias")
        _, age = res.axis(AGE, "bias")
        ok_dur = np.abs(dur - REF_BIAS_DURATION) <= tol_dur
        ok_age = np.abs(age - REF_BIAS_AGE) <= tol_age
        pinned = dur[-1] == 0.0
        return bool(ok_dur.all() and ok_age.all() and pinned), dur, age

    def test_full_run(self, cov400):
        ok, dur, age = self._check(cov400, 0.01, 0.015)
        record_criterion("1", ok, f"n=400 reps={REPS}: duration bias {fmt(dur)} (ref {fmt(REF_BIAS_DURATION)}, "
                         f"+-0.01), age bias {fmt(age)} (ref {fmt(REF_BIAS_AGE)}, +-0.015), "
                         f"bias at t=5 {dur[-1]!r}")
        assert ok

    def test_reduced_run(self):
        res = bias_study(400, REDUCED_REPS, seed=SEED)
        ok, dur, age = self._check(res, 0.02, 0.02)
        record_criterion("1.reduced", ok, f"n=400 reps={REDUCED_REPS}: duration bias {fmt(dur)}, "
                         f"age bias {fmt(age)} (+-0.02), bias at t=5 {dur[-1]!r}")
        assert ok


def test_standard_errors_and_pointwise_coverage(cov400):
    lines, ok = [], True
    for axis in (DURATION, AGE):
        _, se = cov400.axis(axis, "mean_se")
        _, sd = cov400.axis(axis, "sd")
        _, cov = cov400.axis(axis, "pointwise_coverage")
        se_ok = np.abs(se - sd) <= 0.1 * sd
        # nan marks the constraint-pinned point where se = sd = 0 in every repetition.
        defined = ~np.isnan(cov)
        cov_ok = (cov[defined] >= 0.92) & (cov[defined] <= 0.98)
        ok &= bool(se_ok.all() and cov_ok.all())
        lines.append(f"{axis}: se {fmt(se)} sd {fmt(sd)} coverage {fmt(cov)}")
    record_criterion("2", ok, f"n=400 B={BOOT}: " + "; ".join(lines))
    assert ok


def test_band_coverage(cov400, cov100):
    big = (cov400.band_coverage_age, cov400.band_coverage_duration)
    small = (cov100.band_coverage_age, cov100.band_coverage_duration)
    ok_big = all(0.92 <= c <= 0.97 for c in big)
    ok_small = all(c < 0.90 for c in small)
    record_criterion("3", ok_big and ok_small,
                     f"band coverage (age, duration): n=400 {fmt(big)} in [0.92, 0.97] "
                     f"{'ok' if ok_big else 'NOT MET'}; n=100 {fmt(small)} < 0.90 "
                     f"{'ok' if ok_small else 'NOT MET'}")
    assert ok_big and ok_small


def test_least_squares_oracle(toy_cohort, toy_grid):
    result = fit(toy_cohort, toy_grid)
    A, B = constrained_least_squares(toy_cohort, toy_grid)
    err = max(np.abs(result.theta.A.values[:, 0] - A).max(), np.abs(result.theta.B.values[:, 0] - B).max())
    ok = err <= 1e-8 and toy_cohort.n == 3 and (toy_grid.j, toy_grid.k) == (10, 10)
    record_criterion("4", ok, f"3 subjects, 10x10 grid: sup error vs constrained least squares {err:.2e}")
    assert ok


def test_degenerate_designs(sim100, sim_grid_):
    zero = CovariatePath.constant([0.0])
    subjects = tuple(SubjectRecord(s.id, s.entry_age, s.exit_time, s.event, s.covariates_x, zero)
                     for s in sim100.subjects)
    cohort = SubjectCohort(subjects, d=0, t_max=sim100.t_max, a0=sim100.a0, a_max=sim100.a_max)
    result = fit(cohort, sim_grid_)
    na_err = np.abs(result.theta.A.values[:, 0] - nelson_aalen_on_grid(cohort, sim_grid_)).max()
    base = fit(sim100, sim_grid_)
    _, report = solve_backfit(base.operator.scaled(0.0), base.marginal, project=False)
    ok = na_err <= 1e-13 and report.iterations == 1 and report.converged
    record_criterion("5", ok, f"Z=0: sup |A - Nelson-Aalen| {na_err:.1e}; "
                     f"zero operator: backfit iterations {report.iterations}")
    assert ok


def test_identification_family_first_order():
    errs = {}
    for j in (50, 100):
        inc, op = full_risk(3, 1.0, j, int(1.4 * j))
        f1 = ramp_pair(inc.grid)
        errs[j] = (np.abs(op.unconstrained() @ f1 - f1).max(),
                   np.abs(op.E2bar_op() @ inc.grid.t_points).max())
    r_e = errs[50][0] / errs[100][0]
    r_e2 = errs[50][1] / errs[100][1]
    ok = 1.7 <= r_e <= 2.3 and 1.7 <= r_e2 <= 2.3
    record_criterion("6", ok, f"|E f1 - f1| {errs[50][0]:.4f} -> {errs[100][0]:.4f} (ratio {r_e:.3f}); "
                     f"|E2bar ramp| {errs[50][1]:.4f} -> {errs[100][1]:.4f} (ratio {r_e2:.3f})")
    assert ok


def test_identification(sim_grid_):
    worst, idem = 0.0, 0.0
    for n in (100, 200, 400):
        for seed in range(5):
            result = fit(simulate_cohort(n, DEFAULT_SCENARIO, 1000 + seed), sim_grid_)
            worst = max(worst, constraint_residual(result.theta, 1))
            rng = np.random.default_rng(seed)
            theta = ThetaEstimate.unstack(rng.standard_normal(result.operator.size), sim_grid_, 1, 1)
            once = project_constraint(theta, 1)
            idem = max(idem, np.abs(project_constraint(once, 1).stack() - once.stack()).max())
    rep = spectral_report(fit(simulate_cohort(400, DEFAULT_SCENARIO, SEED), sim_grid_).operator)
    ok = worst <= 1e-10 and idem <= 1e-15 and rep.near_unit_E == 1 and rep.near_unit_E2 == 1
    record_criterion("7", ok, f"max |A(t_max)| {worst:.1e} over 15 fits; projection idempotence {idem:.1e}; "
                     f"near-unit multiplicity E {rep.near_unit_E}, E2 {rep.near_unit_E2} (d=1)")
    assert ok


def test_backfit_agrees_with_direct(sim_grid_):
    details, ok, checked = [], True, 0
    for n in (100, 400):
        for seed in range(3):
            result = fit(simulate_cohort(n, DEFAULT_SCENARIO, 2000 + seed), sim_grid_)
            rho = spectral_report(result.operator).spectral_radius
            if not rho < 0.95:
                details.append(f"n={n} seed={seed} rho={rho:.3f} skipped")
                continue
            theta, report = solve_backfit(result.operator, result.marginal, tol=1e-8)
            diff = np.abs(theta.stack() - result.theta.stack()).max()
            ok &= bool(diff <= 1e-6 and report.converged)
            checked += 1
            details.append(f"n={n} rho={rho:.3f} diff={diff:.1e}")
    ok &= checked > 0
    record_criterion("8", ok, "; ".join(details))
    assert ok


def test_bootstrap_variants_and_root_n(cov400, bias200):
    result = fit(simulate_cohort(400, DEFAULT_SCENARIO, SEED + 1), DEFAULT_SCENARIO.grid())
    var = {}
    for variant in (1, 2):
        ens = run_bootstrap(result.increments, result.marginal, result.operator, result.theta,
                            replicates=2000, variant=variant, seed=SEED, factorization=result.factorization)
        var[variant] = ens.replicates.var(axis=0, ddof=1)
    j = result.grid.j
    # Tabulated points except the pinned t = 5 where both variances vanish.
    idx = np.array(list(TABLE_INDICES[:-1]) + [j + i for i in TABLE_INDICES])
    ratio = var[2][idx] / var[1][idx]
    ok_var = bool(np.all(np.abs(ratio - 1.0) <= 0.15))

    sd_ratio = bias200.sd[idx] / cov400.sd[idx]
    pooled = float(np.exp(np.mean(np.log(sd_ratio))))
    ok_sd = 1.3 <= pooled <= 1.5
    record_criterion("9", ok_var and ok_sd,
                     f"variance ratio variant2/variant1 {fmt(ratio)} (within 15%: {ok_var}); "
                     f"sd(n=200)/sd(n=400) per point {fmt(sd_ratio)}, pooled {pooled:.3f} in [1.3, 1.5]")
    assert ok_var and ok_sd

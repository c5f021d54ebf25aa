import io

import numpy as np
import pytest

from twoscale.simulation import (DEFAULT_SCENARIO, TABLE_INDICES, PiecewiseRate, Scenario,
                                 bias_study, coverage_study, pointwise_coverage, rep_seeds, sample_entry_ages,
                                 sample_event_times, simulate_cohort, study_meta,
                                 true_cumulatives, write_band_table, write_bias_table,
                                 write_uncertainty_table)

S = DEFAULT_SCENARIO


class TestScenario:
    def test_hazard_value(self):
        assert S.hazard(0.3, 10.0) == pytest.approx(0.547, abs=1e-12)
        assert S.hazard(0.1, 0.0) == pytest.approx(0.387, abs=1e-12)

    def test_true_cumulatives(self):
        A = lambda t: S.alpha.integral(t) - S.alpha.integral(0.0)
        assert A(0.25) == pytest.approx(0.08, abs=1e-14)
        assert A(0.5) == pytest.approx(0.20, abs=1e-14)
        assert A(5.0) == pytest.approx(0.0, abs=1e-14)
        truth = true_cumulatives(S)
        assert truth.A.values[-1, 0] == pytest.approx(0.0, abs=1e-14)
        assert truth.B.values[-1, 0] == pytest.approx(2.345, abs=1e-12)
        assert truth.B.values[0, 0] == 0.0

    def test_piecewise_rate_integral(self):
        r = PiecewiseRate((0.0, 1.0, 3.0), (2.0, 0.5))
        assert r.integral(np.array([0.0, 0.5, 1.0, 2.0, 4.0])) == pytest.approx([0, 1, 2, 2.5, 3.5])
        assert r(np.array([0.5, 1.0, 1.5])) == pytest.approx([2.0, 2.0, 0.5])

    def test_invalid(self):
        with pytest.raises(ValueError):
            Scenario(entry_max=40.0)
        with pytest.raises(ValueError):
            Scenario(beta=PiecewiseRate((0.0, 35.0), (-1.0,)))
        with pytest.raises(ValueError):
            PiecewiseRate((0.0, 1.0), (1.0, 2.0))

    def test_digest_tracks_parameters(self):
        assert S.digest() == Scenario().digest()
        assert S.digest() != Scenario(entry_max=25.0).digest()


class TestSampling:
    def test_entry_atom_at_zero(self):
        a = sample_entry_ages(S, 10**5, np.random.default_rng(1))
        assert abs(np.mean(a == 0.0) - 0.10) <= 0.005
        pos = a[a > 0]
        assert pos.max() <= S.entry_max and abs(pos.mean() - S.entry_max / 2) < 0.2

    def test_constant_hazard_mean(self):
        sc = Scenario(alpha=PiecewiseRate((0.0, 5.0), (0.5,)), beta=PiecewiseRate((0.0, 35.0), (0.0,)))
        t, ev = sample_event_times(sc, np.zeros(10**5), np.random.default_rng(2))
        expected = (1 - np.exp(-0.5 * 5.0)) / 0.5
        assert t.mean() == pytest.approx(expected, rel=0.01)
        assert np.all(t[~ev] == 5.0) and np.all(t[ev] < 5.0)

    @pytest.mark.parametrize("t", [0.25, 0.5, 1.0, 3.0])
    def test_empirical_survival(self, t):
        n = 10**5
        times, _ = sample_event_times(S, np.zeros(n), np.random.default_rng(3))
        A = S.alpha.integral(t) - S.alpha.integral(0.0)
        assert np.mean(times > t) == pytest.approx(np.exp(-A - 0.067 * t), abs=0.01)

    def test_general_beta_path_agrees(self):
        # A two-piece beta goes through the per-subject sampler.
        split = Scenario(beta=PiecewiseRate((0.0, 10.0, 35.0), (0.067, 0.067)))
        entry = np.linspace(0, 30, 2000)
        a = sample_event_times(S, entry, np.random.default_rng(4))
        b = sample_event_times(split, entry, np.random.default_rng(4))
        assert np.allclose(a[0], b[0], atol=1e-12) and np.array_equal(a[1], b[1])

    def test_cohort_layout(self):
        c = simulate_cohort(50, S, 5)
        assert c.n == 50 and c.d == 1
        assert all(s.exit_time <= 5.0 for s in c.subjects)


class TestStudies:
    def test_rep_seeds_distinct(self):
        seeds = {rep_seeds(1, r)[1] for r in range(20)}
        assert len(seeds) == 20
        assert rep_seeds(1, 3)[1] == rep_seeds(1, 3)[1]

    def test_single_rep_deterministic(self):
        a = bias_study(100, 1, seed=9)
        b = bias_study(100, 1, seed=9)
        assert np.array_equal(a.bias, b.bias)
        assert not a.sd.any()

    def test_pinned_endpoint_has_zero_error(self):
        res = bias_study(100, 3, seed=1)
        assert res.bias[S.grid_time - 1] == 0.0
        assert res.sd[S.grid_time - 1] == 0.0

    def test_workers_do_not_change_results(self):
        a = coverage_study(100, 3, B=10, seed=4)
        b = coverage_study(100, 3, B=10, seed=4, workers=2)
        assert np.array_equal(a.bias, b.bias) and np.array_equal(a.mean_se, b.mean_se)
        assert a.band_coverage_age == b.band_coverage_age

    def test_coverage_fields(self):
        res = coverage_study(100, 4, B=20, seed=2)
        for v in (res.band_coverage_age, res.band_coverage_duration):
            assert 0.0 <= v <= 1.0
        cov = res.pointwise_coverage
        assert np.isnan(cov[S.grid_time - 1]) and np.isnan(cov[0])
        defined = cov[~np.isnan(cov)]
        assert defined.size == cov.size - 3 and np.all((defined >= 0) & (defined <= 1))
        with pytest.raises(ValueError):
            coverage_study(100, 2, B=1)

    def test_axis_selection(self):
        res = bias_study(100, 2, seed=0)
        pts, vals = res.axis("age")
        assert np.allclose(pts, S.grid().a_points[list(TABLE_INDICES)])
        assert pts[-1] == 35.0 and vals.shape == (5,)
        with pytest.raises(ValueError):
            res.axis("calendar")


@pytest.fixture(scope="module")
def studies():
    return [coverage_study(n, 2, B=5, seed=0) for n in (100, 200)]


class TestPointwiseCoverage:
    def test_counts_defined_repetitions(self):
        err = np.array([[0.0, 1.0, 0.5], [0.0, 3.0, 0.1]])
        se = np.array([[0.0, 1.0, 1.0], [0.0, 1.0, 0.0]])
        cov = pointwise_coverage(err, se, 2.0)
        assert np.isnan(cov[0])
        assert cov[1] == 0.5 and cov[2] == 1.0


class TestTables:
    def test_bias_table(self, studies):
        rows = write_bias_table(studies).splitlines()
        assert rows[0] == "axis,point,n,bias"
        assert len(rows) == 1 + 2 * 2 * 5

    def test_uncertainty_table(self, studies):
        rows = write_uncertainty_table(studies).splitlines()
        assert rows[0] == "axis,point,n,mean_se,sd,coverage"
        assert len(rows) == 21

    def test_band_table(self, studies):
        buf = io.StringIO()
        write_band_table(studies, buf)
        rows = buf.getvalue().splitlines()
        assert rows[0] == "n,band_coverage_age,band_coverage_duration"
        assert [r.split(",")[0] for r in rows[1:]] == ["100", "200"]

    def test_meta(self, studies):
        meta = study_meta(studies)["studies"][0]
        assert meta["scenario_hash"] == S.digest() and meta["B"] == 5

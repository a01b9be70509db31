"""Tests for the data generators and the replication harness."""

import csv
import dataclasses

import numpy as np
import pytest
from scipy import stats
from scipy.integrate import trapezoid

from ghfm.basis import eval_basis
from ghfm.metrics import PolyCurve, SplineCurve
from ghfm.simulate import (
    SUMMARY_COLUMNS,
    MethodConfig,
    SimConfig,
    generate,
    generate_setting1,
    generate_setting2,
    run_replications,
    setting2_coefficients,
)

SMALL = dict(n=40, m=240)
FAST = MethodConfig(basis_dim=8, lambda_count=6)


class TestConfig:
    def test_setting_aliases(self):
        assert SimConfig(setting=1).setting == "bspline_random"
        assert SimConfig(setting="2").setting == "polynomial"

    @pytest.mark.parametrize("kwargs", [dict(setting=3), dict(n=0), dict(coef_sd=-1.0), dict(noise_sd=-1.0),
                                        dict(family="poisson"), dict(m=10)])
    def test_invalid(self, kwargs):
        with pytest.raises(ValueError):
            SimConfig(**kwargs)

    def test_default_noise(self):
        assert SimConfig().resolved_noise_sd == 120.0
        assert SimConfig(setting=2).resolved_noise_sd == 30.0
        assert SimConfig(noise_sd=7.0).resolved_noise_sd == 7.0

    def test_too_many_subgroups(self):
        with pytest.raises(ValueError):
            generate(SimConfig(k1=5, **SMALL))


class TestSetting1:
    def test_group_means(self):
        sim = generate_setting1(SimConfig(k1=4, **SMALL))
        np.testing.assert_array_equal(sim.group_coefs[0], 5.0)
        np.testing.assert_array_equal(sim.group_coefs[1], -5.0)
        np.testing.assert_array_equal(sim.group_coefs[2], 2.0)
        np.testing.assert_array_equal(sim.group_coefs[3], -2.0)

    def test_zero_spread_gives_constant_functions(self):
        sim = generate_setting1(SimConfig(coef_sd=0.0, **SMALL))
        ones = sim.labels[:, 0] == 0
        np.testing.assert_array_equal(sim.subject_coefs[ones], 5.0)
        t = np.linspace(0.0, 1440.0, 50)
        np.testing.assert_allclose(sim.group_function(0)(t), 5.0, rtol=1e-14)
        np.testing.assert_allclose(sim.group_function(1)(t), -5.0, rtol=1e-14)

    def test_signal_and_outcomes(self):
        sim = generate_setting1(SimConfig(seed=3, **SMALL))
        np.testing.assert_array_equal(sim.dataset.y, sim.signal + sim.noise)
        spec = sim.truth_basis
        t = np.linspace(0.0, 1440.0, 100_001)
        B = eval_basis(spec, t)
        for i in range(3):
            direct = trapezoid((B @ sim.x_coefs[i]) * (B @ sim.subject_coefs[i]), t)
            assert sim.signal[i] == pytest.approx(direct, rel=1e-6)

    def test_truth_curves(self):
        sim = generate_setting1(SimConfig(**SMALL))
        curves = sim.truth_curves()
        assert all(isinstance(c, SplineCurve) for c in curves)
        assert len(curves) == 2

    def test_deterministic(self):
        a = generate(SimConfig(seed=11, **SMALL))
        b = generate(SimConfig(seed=11, **SMALL))
        np.testing.assert_array_equal(a.dataset.curves[0], b.dataset.curves[0])
        np.testing.assert_array_equal(a.dataset.y, b.dataset.y)
        assert a.dataset.y.tobytes() == b.dataset.y.tobytes()
        c = generate(SimConfig(seed=12, **SMALL))
        assert not np.array_equal(a.dataset.y, c.dataset.y)

    def test_covariate_distribution(self):
        sim = generate(SimConfig(n=200, m=1440, seed=4))
        X = sim.dataset.curves[0].ravel()
        se_mean = 1.0 / np.sqrt(X.size)
        se_var = np.sqrt(2.0 / X.size)
        assert abs(X.mean() - 3.0) < 4 * se_mean
        assert abs(X.var() - 1.0) < 4 * se_var

    @pytest.mark.parametrize("seed", range(5))
    def test_subgroup_sizes_uniform(self, seed):
        sim = generate(SimConfig(n=400, m=20, truth_dim=15, k1=4, seed=seed))
        counts = np.bincount(sim.labels[:, 0], minlength=4)
        assert stats.chisquare(counts).pvalue > 0.01

    def test_bernoulli(self):
        sim = generate(SimConfig(family="bernoulli", seed=5, **SMALL))
        assert set(np.unique(sim.dataset.y)) <= {0.0, 1.0}
        assert sim.effect_scale == pytest.approx(1 / 5000)
        np.testing.assert_array_equal(sim.noise, 0.0)
        # The rescaled predictor keeps both outcomes common.
        assert 0.2 < sim.dataset.y.mean() < 0.8


class TestSetting2:
    def test_coefficients(self):
        assert setting2_coefficients(1) == (-3.0, 0.005, 0.0)
        assert setting2_coefficients(2) == (-1.0, -0.005, 0.000005)
        a3, b3, _ = setting2_coefficients(3)
        assert (a3, b3) == pytest.approx((-2.5, 0.003))
        A4, B4, C4 = setting2_coefficients(4)
        assert (A4, B4, C4) == pytest.approx((-1.5, -0.004, 0.000003))

    def test_value_at_zero(self):
        sim = generate_setting2(SimConfig(**SMALL))
        assert sim.group_function(0)(0.0) == -3.0

    def test_four_distinct_truths(self):
        sim = generate_setting2(SimConfig(k1=4, **SMALL))
        curves = sim.truth_curves()
        assert all(isinstance(c, PolyCurve) for c in curves)
        assert len({c.coef for c in curves}) == 4

    def test_signal_is_exact_integral(self):
        sim = generate_setting2(SimConfig(seed=6, **SMALL))
        t = np.linspace(0.0, 1440.0, 100_001)
        B = eval_basis(sim.truth_basis, t)
        for i in range(3):
            beta = sim.group_function(sim.labels[i, 0])(t)
            direct = trapezoid((B @ sim.x_coefs[i]) * beta, t)
            assert sim.signal[i] == pytest.approx(direct, rel=1e-6)

    def test_projection_is_close_to_polynomial(self):
        sim = generate_setting2(SimConfig(**SMALL))
        t = np.linspace(0.0, 1440.0, 2001)
        for k in range(2):
            spline = eval_basis(sim.truth_basis, t) @ sim.group_coefs[k]
            np.testing.assert_allclose(spline, sim.group_function(k)(t), atol=1e-8)


class TestReplications:
    def test_summary_rows(self, tmp_path):
        cfg = SimConfig(seed=20, **SMALL)
        summary = run_replications(cfg, FAST, n_reps=2)
        assert len(summary.rows) == 2
        assert [r["seed"] for r in summary.rows] == [20, 21]
        assert summary.n_failed == 0
        for r in summary.rows:
            assert set(SUMMARY_COLUMNS) <= set(r)
            assert 0.0 <= r["NMI"] <= 1.0
            assert r["ISE"] >= 0.0
        path = tmp_path / "reps.csv"
        summary.write_csv(path)
        rows = list(csv.reader(open(path)))
        assert tuple(rows[0]) == SUMMARY_COLUMNS
        assert rows[-1][0] == "mean"
        assert len(rows) == 4

    def test_homogeneous_baseline(self):
        summary = run_replications(SimConfig(seed=30, **SMALL), dataclasses.replace(FAST, method="homogeneous"),
                                   n_reps=1)
        row = summary.rows[0]
        assert row["K_hat"] == 1
        assert row["NMI"] == 0.0

    def test_failures_recorded(self):
        summary = run_replications(SimConfig(n=40, m=20, seed=1), dataclasses.replace(FAST, basis_dim=30), n_reps=2)
        assert summary.n_failed == 2
        assert all(r["error"] for r in summary.rows)
        assert np.isnan(summary.mean("NMI"))

    def test_preclustered_method(self):
        summary = run_replications(SimConfig(seed=40, **SMALL), dataclasses.replace(FAST, precluster_k=6), n_reps=1)
        row = summary.rows[0]
        assert row["error"] == ""
        assert 0.0 < row["Purity"] <= 1.0

    def test_workers_match_serial(self):
        cfg = SimConfig(seed=50, **SMALL)
        serial = run_replications(cfg, FAST, n_reps=2, workers=1)
        parallel = run_replications(cfg, FAST, n_reps=2, workers=2)
        for a, b in zip(serial.rows, parallel.rows):
            assert a["NMI"] == b["NMI"]
            assert a["ISE"] == b["ISE"]

    def test_invalid_reps(self):
        with pytest.raises(ValueError):
            run_replications(SimConfig(**SMALL), FAST, n_reps=0)

    def test_invalid_method(self):
        with pytest.raises(ValueError):
            MethodConfig(method="kmeans")

"""Tests for the fusion objective, its solvers, partition extraction and tuning."""

import dataclasses
import math

import numpy as np
import pytest
from conftest import small_dataset
from hypothesis import given
from hypothesis import strategies as st
from scipy import optimize
from scipy.integrate import trapezoid

from ghfm.basis import basis_with_dim, eval_basis
from ghfm.dataset import bind_basis, make_dataset
from ghfm.family import loglik, profile_loglik
from ghfm.fusion import (
    CoefficientSet,
    FitUnits,
    Partition,
    PenaltyConfig,
    bic,
    bic_value,
    complete_graph,
    default_lambda_grid,
    default_phi,
    extract_partition,
    fit_admm,
    fit_lqa,
    fit_partition,
    fit_path,
    fusion_value,
    homogeneous_fit,
    knn_graph,
    lambda_max,
    objective,
    objective_parts,
    phi_scale,
    smooth_gradient,
)


def random_coefs(dataset, units, seed, scale=1.0):
    rng = np.random.default_rng(seed)
    return CoefficientSet(float(rng.normal()), scale * rng.normal(size=(units.count, dataset.p, dataset.basis.dim)),
                          units.sizes.copy())


def design(dataset, units):
    """Dense design ``[1, gamma_i placed in the block of unit u(i)]``."""
    n, p, L = dataset.gamma.shape
    Z = np.zeros((n, 1 + units.count * p * L))
    Z[:, 0] = 1.0
    for i in range(n):
        u = units.unit_of[i]
        Z[i, 1 + u * p * L:1 + (u + 1) * p * L] = dataset.gamma[i].ravel()
    return Z


def penalized_glm_oracle(dataset, units, phi):
    """Minimizer of data loss / n + phi * sum b^T R b by a generic optimizer or normal equations."""
    n, p, L = dataset.gamma.shape
    Z = design(dataset, units)
    P = np.zeros((Z.shape[1],) * 2)
    P[1:, 1:] = np.kron(np.eye(units.count * p), dataset.basis.roughness)
    y = dataset.y
    if dataset.family.is_gaussian:
        A = Z.T @ Z / n + phi * P
        theta = np.linalg.lstsq(A, Z.T @ y / n, rcond=None)[0]
    else:
        def f(th):
            eta = Z @ th
            return np.sum(np.logaddexp(0, eta) - y * eta) / n + phi * th @ P @ th

        def g(th):
            mu = 1 / (1 + np.exp(-(Z @ th)))
            return Z.T @ (mu - y) / n + 2 * phi * P @ th

        def h(th):
            mu = 1 / (1 + np.exp(-(Z @ th)))
            return (Z * (mu * (1 - mu))[:, None]).T @ Z / n + 2 * phi * P

        theta = optimize.minimize(f, np.zeros(Z.shape[1]), jac=g, hess=h, method="trust-exact",
                                  options={"gtol": 1e-12}).x
        for _ in range(5):  # Newton polish; the problem is poorly conditioned
            theta = theta - np.linalg.lstsq(h(theta), g(theta), rcond=None)[0]
    return theta[0], theta[1:].reshape(units.count, p, L)


class TestConfigAndUnits:
    @pytest.mark.parametrize("kwargs", [dict(phi=-1.0), dict(lam=-0.1), dict(admm_rho=0.0),
                                        dict(tol_primal=0.0), dict(fusion_norm="l2"), dict(merge_tol=0.0)])
    def test_invalid_config(self, kwargs):
        with pytest.raises(ValueError):
            PenaltyConfig(**kwargs)

    def test_units_from_labels_compact(self):
        units = FitUnits.from_labels([4, 4, 9, 1, 9, 9])
        np.testing.assert_array_equal(units.unit_of, [1, 1, 2, 0, 2, 2])
        np.testing.assert_array_equal(units.sizes, [1, 2, 3])
        assert not units.is_direct
        assert FitUnits.direct(3).is_direct

    def test_partition_from_subject_labels(self):
        part = Partition.from_subject_labels([5, 5, 2, 7])
        np.testing.assert_array_equal(part.labels[:, 0], [0, 0, 1, 2])
        assert part.counts == [3]


class TestGraphs:
    def test_complete_graph(self):
        edges = complete_graph(5)
        assert edges.shape == (10, 2)
        assert np.all(edges[:, 0] < edges[:, 1])

    def test_knn_graph_symmetrized(self):
        spec = basis_with_dim(4, 5)
        coef = np.random.default_rng(0).normal(size=(8, 1, 5))
        edges = knn_graph(coef, spec.gram, 2)
        assert np.all(edges[:, 0] < edges[:, 1])
        assert len(np.unique(edges, axis=0)) == len(edges)
        degree = np.bincount(edges.ravel(), minlength=8)
        assert degree.min() >= 2


class TestFusionNorm:
    def test_discretized_l1_matches_trapezoid(self):
        spec = basis_with_dim(3, 3, (0.0, 1.0))
        b1 = np.array([1.0, -2.0, 0.5])
        b2 = np.array([0.2, 0.3, -1.0])
        t = np.linspace(0.0, 1.0, 10_000)
        oracle = trapezoid(np.abs(eval_basis(spec, t) @ (b1 - b2)), t)
        got = fusion_value(spec, b1 - b2, "discretized_l1", 10_000)
        assert got == pytest.approx(oracle, rel=1e-5)

    def test_gram_norm_is_l2_of_function(self):
        spec = basis_with_dim(4, 8, (0.0, 2.0))
        d = np.random.default_rng(1).normal(size=8)
        t = np.linspace(0.0, 2.0, 100_001)
        assert fusion_value(spec, d) == pytest.approx(math.sqrt(trapezoid((eval_basis(spec, t) @ d) ** 2, t)), rel=1e-6)

    def test_cauchy_schwarz_bounds(self):
        T = 1440.0
        spec = basis_with_dim(4, 15, (0.0, T))
        rng = np.random.default_rng(2)
        for _ in range(100):
            d = rng.normal(size=15) * rng.uniform(0.01, 10)
            l1 = fusion_value(spec, d, "discretized_l1", 4000)
            l2 = fusion_value(spec, d)
            assert l1 / math.sqrt(T) <= l2 * (1 + 1e-6)
            assert l1 <= math.sqrt(T) * l2 * (1 + 1e-6)


class TestObjective:
    def test_data_term_only_is_rss_over_n(self, gaussian_small):
        ds, _ = gaussian_small
        units = FitUnits.direct(ds.n)
        c = random_coefs(ds, units, 0)
        eta = c.alpha + np.einsum("ija,ija->i", ds.gamma, c.coefs)
        assert objective(ds, c, PenaltyConfig()) == np.sum((ds.y - eta) ** 2) / ds.n

    def test_shared_coefficients_have_zero_fusion(self, gaussian_small):
        ds, _ = gaussian_small
        c = random_coefs(ds, FitUnits.direct(1), 1)
        shared = CoefficientSet(c.alpha, np.repeat(c.coefs, ds.n, axis=0), np.ones(ds.n, dtype=int))
        assert objective_parts(ds, shared, PenaltyConfig(lam=3.0))["fusion"] == 0.0

    def test_fusion_term_sums_pairs(self, gaussian_small):
        ds, _ = gaussian_small
        c = random_coefs(ds, FitUnits.direct(ds.n), 2)
        parts = objective_parts(ds, c, PenaltyConfig(lam=0.7))
        direct = sum(fusion_value(ds.basis, c.coefs[u, 0] - c.coefs[v, 0]) for u, v in complete_graph(ds.n))
        assert parts["fusion"] == pytest.approx(0.7 * direct, rel=1e-12)

    def test_shape_checked(self, gaussian_small):
        ds, _ = gaussian_small
        with pytest.raises(ValueError, match="shape"):
            objective(ds, random_coefs(ds, FitUnits.direct(3), 0), PenaltyConfig())

    @pytest.mark.parametrize("family", ["gaussian", "bernoulli"])
    def test_smooth_gradient_matches_finite_differences(self, family):
        ds, _ = small_dataset(n=10, family=family, seed=5)
        units = FitUnits.from_labels(np.arange(10) % 3)
        c = random_coefs(ds, units, 3, scale=0.3)
        phi = 0.05
        cfg = PenaltyConfig(phi=phi)
        g_alpha, g = smooth_gradient(ds, c, phi, units)
        h = 1e-6

        def f(alpha, coefs):
            return objective(ds, CoefficientSet(alpha, coefs, units.sizes), cfg, units)

        fd_alpha = (f(c.alpha + h, c.coefs) - f(c.alpha - h, c.coefs)) / (2 * h)
        assert g_alpha == pytest.approx(fd_alpha, rel=1e-5, abs=1e-8)
        fd = np.zeros_like(c.coefs)
        for idx in np.ndindex(*c.coefs.shape):
            up, dn = c.coefs.copy(), c.coefs.copy()
            up[idx] += h
            dn[idx] -= h
            fd[idx] = (f(c.alpha, up) - f(c.alpha, dn)) / (2 * h)
        np.testing.assert_allclose(g, fd, rtol=1e-5, atol=1e-8 * np.abs(fd).max())

    def test_grouped_equals_direct_on_singletons(self, gaussian_small):
        ds, _ = gaussian_small
        direct = FitUnits.direct(ds.n)
        grouped = FitUnits.from_labels(np.arange(ds.n)[::-1])
        c = random_coefs(ds, grouped, 4)
        order = grouped.unit_of  # subject i sits in unit order[i]
        cd = CoefficientSet(c.alpha, c.coefs[order], np.ones(ds.n, dtype=int))
        cfg = PenaltyConfig(phi=0.01, lam=0.3)
        assert objective(ds, c, cfg, grouped) == pytest.approx(objective(ds, cd, cfg, direct), rel=1e-10, abs=0)

    def test_grouped_data_term_equals_direct_with_shared_coefficients(self, gaussian_small):
        ds, _ = gaussian_small
        grouped = FitUnits.from_labels(np.arange(ds.n) % 4)
        c = random_coefs(ds, grouped, 5)
        cd = CoefficientSet(c.alpha, c.coefs[grouped.unit_of], np.ones(ds.n, dtype=int))
        a = objective_parts(ds, c, PenaltyConfig(), grouped)["data"]
        b = objective_parts(ds, cd, PenaltyConfig())["data"]
        assert a == pytest.approx(b, rel=1e-12)

    def test_pooled_loglik_is_sum_over_subjects(self):
        ds, _ = small_dataset(n=50, family="bernoulli", seed=6)
        units = FitUnits.from_labels(np.random.default_rng(0).integers(0, 5, size=50))
        c = random_coefs(ds, units, 6, scale=0.2)
        pooled = objective_parts(ds, c, PenaltyConfig(), units)["data"] * ds.n
        eta = c.alpha + np.einsum("ija,ija->i", ds.gamma, c.coefs[units.unit_of])
        per = [-loglik(ds.family, ds.y[[i]], eta[[i]]) for i in range(50)]
        assert pooled == pytest.approx(sum(per), rel=1e-12)


class TestPenalizedGLM:
    def test_gaussian_max_likelihood_is_least_squares(self, gaussian_small):
        ds, labels = gaussian_small
        g = fit_partition(ds, labels[:, None], 0.0, jitter_rel=0.0)
        Z = np.column_stack([np.ones(ds.n)] + [ds.gamma[:, 0] * (labels == k)[:, None] for k in range(2)])
        theta = np.linalg.lstsq(Z, ds.y, rcond=None)[0]
        # Both minimize the residual sum of squares; compare fitted values.
        np.testing.assert_allclose(g.eta, Z @ theta, atol=1e-10)

    @pytest.mark.parametrize("family", ["gaussian", "bernoulli"])
    def test_fit_partition_matches_oracle(self, family):
        ds, labels = small_dataset(n=40, family=family, seed=7)
        units = FitUnits.from_labels(labels)
        phi = 0.02
        alpha, coefs = penalized_glm_oracle(ds, units, phi)
        g = fit_partition(ds, labels[:, None], phi, jitter_rel=0.0)
        assert g.alpha == pytest.approx(alpha, abs=1e-6)
        np.testing.assert_allclose(np.stack(g.coefs, axis=1), coefs, atol=1e-6)

    def test_homogeneous_fit_uses_weight(self, gaussian_small):
        ds, _ = gaussian_small
        g1 = homogeneous_fit(ds, 0.1, roughness_weight=1.0)
        g2 = fit_partition(ds, np.zeros((ds.n, 1), dtype=int), 0.1, [np.array([1.0])])
        np.testing.assert_allclose(g1.coefs[0], g2.coefs[0], atol=1e-12)


class TestSolvers:
    @pytest.mark.parametrize("family", ["gaussian", "bernoulli"])
    def test_zero_lambda_matches_penalized_glm(self, family):
        ds, labels = small_dataset(n=150, family=family, seed=8)
        units = FitUnits.from_labels(np.arange(150) % 3)
        phi = 0.02
        alpha, coefs = penalized_glm_oracle(ds, units, phi)
        cfg = PenaltyConfig(phi=phi, lam=0.0)
        rep = fit_admm(ds, cfg, units=units)
        assert rep.raw.alpha == pytest.approx(alpha, abs=1e-6)
        np.testing.assert_allclose(rep.raw.coefs, coefs, atol=1e-6)
        oracle = objective(ds, CoefficientSet(alpha, coefs, units.sizes), cfg, units)
        assert objective(ds, rep.raw, cfg, units) == pytest.approx(oracle, rel=1e-6)

    def test_zero_lambda_direct_objective_matches_oracle(self, gaussian_small):
        ds, _ = gaussian_small
        units = FitUnits.direct(ds.n)
        cfg = PenaltyConfig(phi=0.05)
        alpha, coefs = penalized_glm_oracle(ds, units, cfg.phi)
        oracle = objective(ds, CoefficientSet(alpha, coefs, units.sizes), cfg)
        assert objective(ds, fit_admm(ds, cfg).raw, cfg) == pytest.approx(oracle, rel=1e-6, abs=1e-10)

    def test_lqa_equals_admm_at_zero_lambda(self, gaussian_small):
        ds, _ = gaussian_small
        cfg = PenaltyConfig(phi=0.05)
        a = fit_admm(ds, cfg)
        b = fit_lqa(ds, cfg)
        np.testing.assert_allclose(b.raw.coefs, a.raw.coefs, atol=1e-6)
        assert b.solver == "lqa"

    @pytest.mark.parametrize("solver", [fit_admm, fit_lqa])
    @pytest.mark.parametrize("family", ["gaussian", "bernoulli"])
    def test_lambda_max_fuses_everything(self, solver, family):
        ds, _ = small_dataset(n=16, family=family, seed=9)
        phi = default_phi(ds)
        lam = lambda_max(ds, phi)
        rep = solver(ds, PenaltyConfig(phi=phi, lam=lam))
        assert rep.k_hat == [1]
        rep2 = solver(ds, PenaltyConfig(phi=phi, lam=3 * lam))
        assert rep2.k_hat == [1]

    def test_fused_fit_is_homogeneous_ridge(self):
        ds, _ = small_dataset(n=20, groups=1, seed=10)
        phi = default_phi(ds)
        rep = fit_admm(ds, PenaltyConfig(phi=phi, lam=lambda_max(ds, phi)))
        ref = homogeneous_fit(ds, phi, roughness_weight=ds.n)
        assert rep.k_hat == [1]
        rmse = np.sqrt(np.mean((rep.coefficients.coefs[0][0] - ref.coefs[0][0]) ** 2))
        assert rmse < 1e-3
        # The raw solver output agrees with the closed form as well.
        raw_rmse = np.sqrt(np.mean((rep.raw.coefs[:, 0] - ref.coefs[0][0]) ** 2))
        assert raw_rmse < 1e-3

    def test_lambda_max_for_l1_fuses_everything(self):
        ds, _ = small_dataset(n=12, seed=11)
        phi = default_phi(ds)
        lam = lambda_max(ds, phi, fusion_norm="discretized_l1", quad_points=100)
        rep = fit_admm(ds, PenaltyConfig(phi=phi, lam=lam, fusion_norm="discretized_l1", quad_points=100))
        assert rep.k_hat == [1]

    def test_two_subject_lqa_matches_admm(self):
        ds, _ = small_dataset(n=2, seed=12)
        cfg = PenaltyConfig(phi=default_phi(ds), lam=0.05 * lambda_max(ds, default_phi(ds)),
                            tol_primal=1e-9, tol_dual=1e-9, max_admm_iters=5000, max_lqa_iters=5000)
        a = fit_admm(ds, cfg)
        b = fit_lqa(ds, cfg)
        assert objective(ds, b.raw, cfg) == pytest.approx(objective(ds, a.raw, cfg), abs=1e-4)

    def test_grouped_lqa_matches_admm(self):
        ds, labels = small_dataset(n=30, seed=13)
        units = FitUnits.from_labels(np.arange(30) % 6)
        phi = default_phi(ds, units)
        cfg = PenaltyConfig(phi=phi, lam=0.1 * lambda_max(ds, phi, units), tol_primal=1e-8, tol_dual=1e-8,
                            max_admm_iters=5000, max_lqa_iters=5000)
        a = fit_admm(ds, cfg, units=units)
        b = fit_lqa(ds, cfg, units=units)
        fa, fb = objective(ds, a.raw, cfg, units), objective(ds, b.raw, cfg, units)
        assert abs(fa - fb) <= 1e-4 * max(1.0, abs(fa))

    @pytest.mark.parametrize("solver", [fit_admm, fit_lqa])
    def test_objective_trace_non_increasing(self, solver):
        ds, _ = small_dataset(n=20, seed=14)
        phi = default_phi(ds)
        rep = solver(ds, PenaltyConfig(phi=phi, lam=0.2 * lambda_max(ds, phi)))
        tr = np.asarray(rep.objective_trace)
        assert len(tr) >= 2
        assert np.all(np.diff(tr) <= 1e-8 * np.abs(tr[:-1]).clip(min=1.0))

    def test_bernoulli_trace_non_increasing(self, bernoulli_small):
        ds, _ = bernoulli_small
        phi = default_phi(ds)
        rep = fit_admm(ds, PenaltyConfig(phi=phi, lam=0.2 * lambda_max(ds, phi)))
        assert np.all(np.diff(rep.objective_trace) <= 1e-8)

    def test_recovers_two_groups(self):
        ds, labels = small_dataset(n=60, seed=15, noise=0.5)
        res = fit_path(ds, [default_phi(ds)], lambda_count=10, lambda_ratio=1e-2)
        est = res.best.subject_labels()[:, 0]
        assert res.best.k_hat == [2]
        assert len(set(zip(est, labels))) == 2

    def test_permutation_invariance(self):
        ds, _ = small_dataset(n=20, seed=16)
        phi = default_phi(ds)
        cfg = PenaltyConfig(phi=phi, lam=0.3 * lambda_max(ds, phi))
        perm = np.random.default_rng(0).permutation(ds.n)
        a = fit_admm(ds, cfg)
        b = fit_admm(ds.subset(perm), cfg)
        la, lb = a.subject_labels()[:, 0], b.subject_labels()[:, 0]
        # Same partition up to relabeling.
        assert len(set(zip(la[perm], lb))) == a.k_hat[0] == b.k_hat[0]
        ca = sorted(map(tuple, np.round(a.coefficients.coefs[0], 6)))
        cb = sorted(map(tuple, np.round(b.coefficients.coefs[0], 6)))
        np.testing.assert_allclose(np.array(ca), np.array(cb), atol=1e-10 * max(1, np.abs(ca).max()))
        assert b.bic == pytest.approx(a.bic, rel=1e-10)

    def test_warm_start_state(self, gaussian_small):
        ds, _ = gaussian_small
        phi = default_phi(ds)
        lm = lambda_max(ds, phi)
        first = fit_admm(ds, PenaltyConfig(phi=phi, lam=0.5 * lm))
        second = fit_admm(ds, PenaltyConfig(phi=phi, lam=0.4 * lm), init=first.raw, state=first.state)
        cold = fit_admm(ds, PenaltyConfig(phi=phi, lam=0.4 * lm))
        assert second.k_hat == cold.k_hat
        assert set(first.state) >= {"z", "u", "rho"}

    def test_large_direct_graph_rejected(self):
        rng = np.random.default_rng(0)
        spec = basis_with_dim(2, 3, (0.0, 1.0))
        ds = bind_basis(make_dataset(rng.normal(size=(501, 5)), rng.normal(size=501), "gaussian",
                                     domain=(0.0, 1.0)), spec)
        with pytest.raises(ValueError, match="500"):
            fit_admm(ds, PenaltyConfig(lam=1.0))

    def test_knn_graph_accepted(self, gaussian_small):
        ds, _ = gaussian_small
        init = fit_admm(ds, PenaltyConfig(phi=default_phi(ds))).raw
        edges = knn_graph(init.coefs, ds.basis.gram, 3)
        rep = fit_admm(ds, PenaltyConfig(phi=default_phi(ds), lam=1e3), fusion_graph=edges)
        assert rep.k_hat[0] >= 1

    def test_bad_graph_rejected(self, gaussian_small):
        ds, _ = gaussian_small
        with pytest.raises(ValueError, match="invalid"):
            fit_admm(ds, PenaltyConfig(lam=1.0), fusion_graph=[[0, 99]])


class TestExtractPartition:
    spec = basis_with_dim(4, 6)

    def test_identical_vectors_merge(self):
        b = np.random.default_rng(0).normal(size=(1, 1, 6))
        coef = CoefficientSet(0.0, np.repeat(b, 4, axis=0), np.ones(4, dtype=int))
        part, merged = extract_partition(coef, 1e-4, self.spec.gram)
        assert part.counts == [1]
        np.testing.assert_allclose(merged.coefs[0, 0], b[0, 0])

    def test_threshold_contract(self):
        d = np.ones(6) / math.sqrt(self.spec.gram.sum())  # unit W-norm
        tol = 1e-4
        coefs = np.stack([np.zeros(6), 10 * tol * d])[:, None, :]
        part, _ = extract_partition(CoefficientSet(0.0, coefs, np.ones(2, dtype=int)), tol, self.spec.gram)
        assert part.counts == [2]
        coefs = np.stack([np.zeros(6), 0.5 * tol * d])[:, None, :]
        part, _ = extract_partition(CoefficientSet(0.0, coefs, np.ones(2, dtype=int)), tol, self.spec.gram)
        assert part.counts == [1]

    def test_transitive_closure_and_weighted_mean(self):
        base = np.zeros(6)
        step = 0.9e-4 * np.ones(6) / math.sqrt(self.spec.gram.sum())
        coefs = np.stack([base, base + step, base + 2 * step, base + 50.0])[:, None, :]
        sizes = np.array([1, 2, 3, 4])
        part, merged = extract_partition(CoefficientSet(0.0, coefs, sizes), 1e-4, self.spec.gram)
        np.testing.assert_array_equal(part.labels[:, 0], [0, 0, 0, 1])
        np.testing.assert_allclose(merged.coefs[0, 0], (2 * step + 3 * 2 * step) / 6)
        np.testing.assert_array_equal(merged.unit_sizes, [6, 4])

    def test_fused_pairs_merge(self):
        coefs = np.random.default_rng(1).normal(size=(3, 1, 6))
        part, _ = extract_partition(CoefficientSet(0.0, coefs, np.ones(3, dtype=int)), 1e-4, self.spec.gram,
                                    fused_pairs=[np.array([[0, 2]])])
        np.testing.assert_array_equal(part.labels[:, 0], [0, 1, 0])


class TestBIC:
    def test_toy_value(self):
        assert bic_value(-10.0, [2], 5, 100) == pytest.approx(11 * math.log(100) + 20, rel=1e-15)

    @given(k=st.integers(1, 10), ll=st.floats(-1e4, 0))
    def test_monotone_in_groups(self, k, ll):
        assert bic_value(ll, [k + 1], 15, 1000) > bic_value(ll, [k], 15, 1000)

    def test_saturated_model_is_infinite(self):
        assert bic_value(0.0, [7], 15, 100) == math.inf
        assert math.isfinite(bic_value(0.0, [6], 15, 100))

    def test_report_bic_uses_profile_likelihood(self, gaussian_small):
        ds, _ = gaussian_small
        rep = fit_admm(ds, PenaltyConfig(phi=default_phi(ds), lam=lambda_max(ds, default_phi(ds))))
        ll = profile_loglik(ds.family, ds.y, rep.coefficients.eta)
        assert bic(ds, rep) == pytest.approx(rep.bic, rel=1e-14)
        assert rep.bic == pytest.approx((ds.basis.dim + 1) * math.log(ds.n) - 2 * ll, rel=1e-14)


class TestPath:
    def test_grid_descending(self):
        g = default_lambda_grid(2.0, 5, 1e-2)
        assert g[0] == 2.0
        assert g[-1] == pytest.approx(0.02)
        assert np.all(np.diff(g) < 0)

    def test_table_and_best(self, gaussian_small):
        ds, _ = gaussian_small
        phi = default_phi(ds)
        res = fit_path(ds, [phi], lambda_count=6, keep_reports=True)
        assert len(res.table) == 6
        assert res.table[0]["k_hat"] == [1]
        assert res.best.bic == min(r["bic"] for r in res.table)
        assert {"phi", "lambda", "bic", "k_hat", "converged", "error"} <= set(res.table[0])
        assert len(res.reports) == 6

    def test_explicit_grid_sorted(self, gaussian_small):
        ds, _ = gaussian_small
        phi = default_phi(ds)
        res = fit_path(ds, phi, lambda_grid=[0.01, 1e6, 1.0])
        assert [r["lambda"] for r in res.table] == [1e6, 1.0, 0.01]

    def test_phi_scale_positive_and_unitless(self, gaussian_small):
        ds, _ = gaussian_small
        s = phi_scale(ds)
        assert s > 0
        scaled = dataclasses.replace(ds, gamma=10 * ds.gamma)
        assert phi_scale(scaled) == pytest.approx(100 * s)

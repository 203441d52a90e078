import math

import numpy as np
import pytest
from scipy import linalg

import oracles
from fabp import FabDomainError, FitError, RankError
from fabp.indirect import CovModel, conditional_moments, delete_column_basis, gram_schmidt_nullspace
from fabp.linking import (
    CarPath,
    Exchangeable,
    FittedLinking,
    Regression,
    SpikeSlab,
    Structure,
    TargetMoments,
    VARIANCE_FLOOR,
    fit_fay_herriot,
    fit_marginal_ml,
    fit_problem,
    fit_spike_slab,
    linking_moments,
    make_problem,
    marginal_loglik,
    path_adjacency,
    profile_loglik_at,
    spike_slab_em,
)


class TestSpecs:
    def test_exchangeable_moments(self):
        mu, Psi = linking_moments(Exchangeable(0.0, 1.0), 3)
        np.testing.assert_array_equal(mu, np.zeros(3))
        np.testing.assert_array_equal(Psi, np.eye(3))

    def test_regression_moments(self):
        X = np.array([[1.0, 0.0], [1.0, 1.0], [1.0, 2.0]])
        mu, Psi = linking_moments(Regression(X, [1.0, 0.5], 2.0))
        np.testing.assert_allclose(mu, [1.0, 1.5, 2.0])
        np.testing.assert_array_equal(Psi, 2.0 * np.eye(3))

    def test_car_independence_limit(self):
        mu, Psi = linking_moments(CarPath(1.5, 0.0, 2.0), 4)
        np.testing.assert_array_equal(mu, np.full(4, 1.5))
        np.testing.assert_allclose(Psi, 2.0 * np.eye(4))

    def test_car_p3(self):
        spec = CarPath(mu=0.7, beta1=0.3, tau2=1.0)
        _, Psi = linking_moments(spec, 3)
        A = np.array([[0, 1, 0], [1, 0, 1], [0, 1, 0]], dtype=float)
        np.testing.assert_allclose(Psi, np.linalg.inv(np.eye(3) - 0.3 * A), atol=1e-14)
        # conditional law of the middle coordinate given its neighbours
        other = [0, 2]
        coef = Psi[1, other] @ np.linalg.inv(Psi[np.ix_(other, other)])
        cvar = Psi[1, 1] - coef @ Psi[other, 1]
        np.testing.assert_allclose(coef, [0.3, 0.3], atol=1e-14)
        assert cvar == pytest.approx(1.0, abs=1e-14)
        theta = np.array([0.2, 0.0, -1.1])
        cmean = spec.mu + coef @ (theta[other] - spec.mu)
        assert cmean == pytest.approx(spec.beta0 + spec.beta1 * (theta[0] + theta[2]), abs=1e-14)

    @pytest.mark.parametrize("beta1", [0.5, -0.5, 0.9])
    def test_car_invalid(self, beta1):
        with pytest.raises(FabDomainError):
            CarPath(0.0, beta1, 1.0)

    def test_car_precision_pd_large_p(self):
        p = 10_000
        beta1 = 0.5 - 1e-9
        ab = np.zeros((2, p))
        ab[0, 1:] = -beta1
        ab[1, :] = 1.0
        linalg.cholesky_banded(ab)  # raises if I - beta1 A is not PD

    @pytest.mark.parametrize("make", [
        lambda: Exchangeable(0.0, 0.0),
        lambda: SpikeSlab(0.0, 1.0, 0.0),
        lambda: SpikeSlab(0.0, 1.0, 1.2),
        lambda: Regression(np.ones((3, 2)), [1.0], 1.0),
    ])
    def test_invalid_specs(self, make):
        with pytest.raises(FabDomainError):
            make()

    def test_gamma_view(self):
        f = FittedLinking(Regression(np.ones((2, 1)), [1.0], 2.0), -1.0, True, 1, sigma2=3.0)
        assert set(f.gamma) == {"beta", "tau2", "sigma2"}


class TestMarginalLoglik:
    def test_p2_univariate(self):
        cov = CovModel.diagonal([0.5, 2.0])
        basis = delete_column_basis(2, 0)
        x = np.array([1.3])
        ll = marginal_loglik(Exchangeable(0.4, 1.5), x, basis, cov)
        var = 2.0 + 1.5
        assert ll == pytest.approx(-0.5 * math.log(2 * math.pi * var) - (1.3 - 0.4) ** 2 / (2 * var), rel=1e-14)

    def test_invariant_to_target_direction(self):
        rng = np.random.default_rng(0)
        S = oracles.random_pd(rng, 5)
        cov = CovModel.full(S)
        basis = gram_schmidt_nullspace(S[:, 3], 3)
        y = rng.standard_normal(5)
        spec = Exchangeable(0.2, 0.8)
        a = marginal_loglik(spec, basis.project(y), basis, cov)
        b = marginal_loglik(spec, basis.project(y + 7.3 * S[:, 3]), basis, cov)
        assert a == pytest.approx(b, abs=1e-12)

    def test_matches_dense_oracle(self):
        rng = np.random.default_rng(1)
        for spec in (Exchangeable(0.5, 1.2), CarPath(-0.3, 0.35, 0.7)):
            S = oracles.random_pd(rng, 5)
            basis = gram_schmidt_nullspace(S[:, 1], 1)
            x = basis.project(rng.standard_normal(5))
            mu, Psi = linking_moments(spec, 5)
            G = basis.G
            ref = oracles.mvn_logpdf(x, G.T @ mu, G.T @ (S + Psi) @ G)
            assert marginal_loglik(spec, x, basis, CovModel.full(S)) == pytest.approx(ref, abs=1e-9)

    def test_not_pd_is_minus_inf(self):
        basis = delete_column_basis(3, 0)
        cov = CovModel.full(np.eye(3))
        assert marginal_loglik(Exchangeable(0.0, 1.0), np.zeros(2), basis, cov, sigma2=-5.0) == -math.inf


def _cases(rng, p):
    diag = CovModel.diagonal(rng.uniform(0.5, 2.0, p))
    full = CovModel.full(oracles.random_pd(rng, p))
    scalar = CovModel.diagonal(np.full(p, 0.7))
    corr = CovModel.known_correlation(oracles.random_pd(rng, p, 0.1))
    return [
        ("exchangeable", diag, "diag", None),
        ("exchangeable", full, "eigen", None),
        ("regression", diag, "diag", np.column_stack([np.ones(p), rng.standard_normal(p)])),
        ("car", scalar, "dst", None),
        ("car", diag, "dense", None),
        ("exchangeable", corr, "eigen", None),
    ]


class TestStructuredEngine:
    """The rotated/profiled likelihood and moments agree with the literal formulas."""

    @pytest.mark.parametrize("case", range(6))
    def test_profile_and_moments_match_literal(self, case):
        rng = np.random.default_rng(100 + case)
        p = 7
        family, cov, kind, X = _cases(rng, p)[case]
        st = Structure(family, cov, X)
        assert st.kind == kind
        y = rng.standard_normal(p)
        j = 4
        basis = gram_schmidt_nullspace(cov.column(j), j)
        prob = make_problem(st, basis.G @ basis.project(y), basis.excluded)
        tau2, beta1, sigma2 = 1.3, (0.3 if family == "car" else 0.0), (2.0 if not cov.scale_known else 1.0)
        ll, beta = profile_loglik_at(st, prob, tau2, beta1, sigma2)
        spec = st.make_spec(beta, tau2, beta1)
        assert ll == pytest.approx(marginal_loglik(spec, basis.project(y), basis, cov, sigma2), abs=1e-9)
        # beta is the GLS maximizer: perturbing it lowers the literal likelihood
        for d in (1e-3, -1e-3):
            worse = st.make_spec(beta + d, tau2, beta1)
            assert marginal_loglik(worse, basis.project(y), basis, cov, sigma2) < ll
        fitted = FittedLinking(spec, ll, True, 1, sigma2=sigma2)
        tm = TargetMoments(st, fitted, beta)
        yt = basis.G @ basis.project(y)
        m, v = tm(j, st.rotate(yt), st.rotate(basis.excluded[:, 0]))
        mu, Psi = linking_moments(spec, p)
        ref = conditional_moments(mu, Psi, cov.dense(sigma2), basis, y)
        assert m == pytest.approx(ref.m_j, abs=1e-10)
        assert v == pytest.approx(ref.v_jj, abs=1e-10)

    def test_block_exclusion_matches_literal(self):
        rng = np.random.default_rng(7)
        p = 8
        cov = CovModel.diagonal(rng.uniform(0.5, 2.0, p))
        st = Structure("exchangeable", cov)
        y = rng.standard_normal(p)
        block = [2, 3, 4]
        yt = y.copy()
        yt[block] = 0.0
        prob = make_problem(st, yt, np.eye(p)[:, block])
        ll, beta = profile_loglik_at(st, prob, 0.9)
        keep = [k for k in range(p) if k not in block]
        G = np.eye(p)[:, keep]
        C = G.T @ (cov.dense() + 0.9 * np.eye(p)) @ G
        ref = oracles.mvn_logpdf(y[keep], np.full(len(keep), beta[0]), C)
        assert ll == pytest.approx(ref, abs=1e-9)

    def test_family_validation(self):
        with pytest.raises(FabDomainError):
            Structure("spikeslab", CovModel.diagonal(np.ones(3)))
        with pytest.raises(FabDomainError):
            Structure("regression", CovModel.diagonal(np.ones(3)))

    def test_too_few_observations(self):
        cov = CovModel.diagonal(np.ones(2))
        st = Structure("exchangeable", cov)
        with pytest.raises(FitError):
            fit_problem(st, make_problem(st, np.array([0.0, 1.0]), np.eye(2)[:, [0]]))


class TestFitMarginalMl:
    def test_recovers_exchangeable(self):
        rng = np.random.default_rng(11)
        p = 500
        theta = 2.0 + rng.standard_normal(p)
        y = theta + np.sqrt(0.1) * rng.standard_normal(p)
        cov = CovModel.diagonal(np.full(p, 0.1))
        basis = delete_column_basis(p, 0)
        f = fit_marginal_ml("exchangeable", basis.project(y), basis, cov)
        se_mu = math.sqrt(1.1 / (p - 1))
        se_tau2 = math.sqrt(2.0 / (p - 1)) * 1.1
        assert abs(f.spec.mu - 2.0) < 3 * se_mu
        assert abs(f.spec.tau2 - 1.0) < 3 * se_tau2
        truth = marginal_loglik(Exchangeable(2.0, 1.0), basis.project(y), basis, cov)
        assert f.loglik >= truth - 1e-9

    def test_gls_mean_at_fixed_tau2(self):
        rng = np.random.default_rng(12)
        p = 9
        S = oracles.random_pd(rng, p)
        cov = CovModel.full(S)
        basis = gram_schmidt_nullspace(S[:, 2], 2)
        x = basis.project(rng.standard_normal(p) + 1.0)
        st = Structure("exchangeable", cov)
        prob = make_problem(st, basis.G @ x, basis.excluded)
        _, beta = profile_loglik_at(st, prob, 0.6)
        G = basis.G
        Ci = np.linalg.inv(G.T @ (S + 0.6 * np.eye(p)) @ G)
        g1 = G.T @ np.ones(p)
        assert beta[0] == pytest.approx((g1 @ Ci @ x) / (g1 @ Ci @ g1), abs=1e-6)

    def test_degenerate_data_pins_tau2_to_floor(self):
        p = 12
        cov = CovModel.diagonal(np.ones(p))
        basis = delete_column_basis(p, 5)
        f = fit_marginal_ml("exchangeable", basis.project(np.full(p, 3.0)), basis, cov)
        assert f.at_floor
        assert f.spec.mu == pytest.approx(3.0, abs=1e-9)

    def test_best_start_is_returned(self):
        rng = np.random.default_rng(13)
        p = 40
        cov = CovModel.diagonal(np.ones(p))
        basis = delete_column_basis(p, 0)
        f = fit_marginal_ml("car", basis.project(np.cumsum(rng.standard_normal(p)) * 0.3), basis, cov)
        funs = [r["fun"] for r in f.diagnostics["runs"] if "fun" in r]
        assert f.loglik == pytest.approx(-min(funs), abs=1e-9)
        assert f.n_restarts_used == 3

    def test_scale_equivariance(self):
        rng = np.random.default_rng(14)
        p = 60
        y = 1.0 + 1.5 * rng.standard_normal(p) + rng.standard_normal(p)
        basis = delete_column_basis(p, 0)
        c = 3.7
        f1 = fit_marginal_ml("exchangeable", basis.project(y), basis, CovModel.diagonal(np.ones(p)))
        f2 = fit_marginal_ml("exchangeable", basis.project(c * y), basis, CovModel.diagonal(np.full(p, c * c)))
        assert f2.spec.mu == pytest.approx(c * f1.spec.mu, rel=1e-4)
        assert f2.spec.tau2 == pytest.approx(c * c * f1.spec.tau2, rel=1e-4)
        assert 2 * f2.spec.mu / f2.spec.tau2 == pytest.approx(2 * f1.spec.mu / f1.spec.tau2 / c, rel=1e-4)


def _fh_data(rng, p, beta, tau2, sigma2, X=None):
    n = rng.integers(5, 30, p).astype(float)
    X = np.ones((p, 1)) if X is None else X
    theta = X @ beta + math.sqrt(tau2) * rng.standard_normal(p)
    ybar = theta + np.sqrt(sigma2 / n) * rng.standard_normal(p)
    s2 = sigma2 * rng.chisquare(n - 1) / (n - 1)
    return ybar, s2, n


class TestFayHerriot:
    def test_pooled_mean_with_zero_tau2(self):
        rng = np.random.default_rng(20)
        ybar = rng.standard_normal(10)
        f = fit_fay_herriot(ybar, np.ones(10), np.full(10, 8.0), tau2=0.0)
        assert f.spec.beta[0] == pytest.approx(ybar.mean(), abs=1e-12)

    def test_sigma2_is_pooled_variance_when_tau2_large(self):
        rng = np.random.default_rng(21)
        ybar, s2, n = _fh_data(rng, 200, np.array([0.0]), 100.0, 4.0)
        f = fit_fay_herriot(ybar, s2, n)
        pooled = ((n - 1) * s2).sum() / (n - 1).sum()
        assert f.sigma2 == pytest.approx(pooled, rel=0.01)

    def test_recovery_p300_q3(self):
        p = 300
        beta = np.array([1.0, 0.5, -0.8])
        truth = np.concatenate([beta, [0.6, 3.0]])
        rng = np.random.default_rng(22)
        X = np.column_stack([np.ones(p), rng.standard_normal((p, 2))])
        est = []
        for _ in range(40):
            ybar, s2, n = _fh_data(rng, p, beta, 0.6, 3.0, X)
            f = fit_fay_herriot(ybar, s2, n, X)
            est.append(np.concatenate([f.spec.beta, [f.spec.tau2, f.sigma2]]))
        est = np.array(est)
        se = est.std(axis=0, ddof=1)
        assert np.all(np.abs(est[0] - truth) < 3 * se)
        assert np.all(np.abs(est.mean(axis=0) - truth) < 4 * se / math.sqrt(len(est)))

    def test_exclusion_ignores_group(self):
        rng = np.random.default_rng(23)
        ybar, s2, n = _fh_data(rng, 30, np.array([1.0]), 0.5, 2.0)
        a = fit_fay_herriot(ybar, s2, n, exclude=4)
        ybar2, s22 = ybar.copy(), s2.copy()
        ybar2[4], s22[4] = 99.0, 1e-3
        b = fit_fay_herriot(ybar2, s22, n, exclude=4)
        assert a.spec.beta[0] == b.spec.beta[0] and a.spec.tau2 == b.spec.tau2 and a.sigma2 == b.sigma2

    def test_rank_deficient(self):
        rng = np.random.default_rng(24)
        ybar, s2, n = _fh_data(rng, 20, np.array([1.0]), 0.5, 2.0)
        X = np.column_stack([np.ones(20), np.ones(20)])
        with pytest.raises(RankError):
            fit_fay_herriot(ybar, s2, n, X)

    def test_small_groups_rejected(self):
        with pytest.raises(FabDomainError):
            fit_fay_herriot(np.zeros(5), np.ones(5), np.array([1, 3, 3, 3, 3]))


class TestSpikeSlab:
    def test_zero_data(self):
        f = fit_spike_slab(np.zeros(15), np.ones(15))
        assert f.spec.mu == 0.0
        assert 2 * f.spec.mu / f.spec.tau2 == 0.0
        spike_only = -0.5 * 15 * math.log(2 * math.pi)
        assert f.loglik == pytest.approx(spike_only, abs=1e-6)

    def test_two_clusters_against_grid(self):
        rng = np.random.default_rng(30)
        z = np.concatenate([0.3 * rng.standard_normal(12), 3.0 + 0.3 * rng.standard_normal(8)])
        v = np.full(20, 0.09)
        f = fit_spike_slab(z, np.sqrt(v))
        assert f.spec.mu == pytest.approx(3.0, abs=0.3)
        assert f.spec.w == pytest.approx(0.4, abs=0.1)
        best = -np.inf
        for mu in np.linspace(2.5, 3.5, 41):
            for tau2 in np.geomspace(1e-4, 1.0, 41):
                for w in np.linspace(0.05, 0.95, 37):
                    t = tau2 + v
                    ll = np.logaddexp(np.log(w) - 0.5 * (np.log(2 * np.pi * t) + (z - mu) ** 2 / t),
                                      np.log1p(-w) - 0.5 * (np.log(2 * np.pi * v) + z * z / v)).sum()
                    best = max(best, ll)
        assert f.loglik >= best - 1e-8

    def test_monotone_iterations(self):
        rng = np.random.default_rng(31)
        z = np.concatenate([rng.standard_normal(20), 2.0 + rng.standard_normal(20)])
        v = rng.uniform(0.5, 1.5, 40)
        lls = [spike_slab_em(z[None], v[None], 0.0, 1.0, 0.5, max_iter=k)[3][0] for k in range(1, 40)]
        assert np.all(np.diff(lls) >= -1e-10)

    def test_scale_equivariance(self):
        rng = np.random.default_rng(32)
        z = np.concatenate([0.2 * rng.standard_normal(15), 2.0 + 0.8 * rng.standard_normal(15)])
        s = rng.uniform(0.5, 1.0, 30)
        c = 4.0
        f1 = fit_spike_slab(z, s)
        f2 = fit_spike_slab(c * z, c * s)
        assert f2.spec.mu == pytest.approx(c * f1.spec.mu, rel=1e-4)
        assert f2.spec.tau2 == pytest.approx(c * c * f1.spec.tau2, rel=1e-4)
        assert f2.spec.w == pytest.approx(f1.spec.w, abs=1e-4)

    def test_batch_rows_are_independent(self):
        rng = np.random.default_rng(33)
        z = rng.standard_normal((3, 25)) + np.array([[0.0], [2.0], [-1.0]])
        v = np.ones((3, 25))
        mu, tau2, w, ll, _, conv = spike_slab_em(z, v, 0.5, 1.0, 0.5)
        for r in range(3):
            one = spike_slab_em(z[r:r + 1], v[r:r + 1], 0.5, 1.0, 0.5)
            assert one[0][0] == pytest.approx(mu[r], rel=1e-6, abs=1e-8)
            assert one[3][0] == pytest.approx(ll[r], abs=1e-8)

    def test_input_validation(self):
        with pytest.raises(FabDomainError):
            fit_spike_slab(np.zeros(2), np.ones(2))
        with pytest.raises(FabDomainError):
            fit_spike_slab(np.zeros(4), np.array([1.0, 1.0, 0.0, 1.0]))

    def test_floor_constant(self):
        assert VARIANCE_FLOOR == 1e-8

    def test_path_adjacency(self):
        np.testing.assert_array_equal(path_adjacency(3), [[0, 1, 0], [1, 0, 1], [0, 1, 0]])

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from privmask.model import (LogisticCoefficients, MaskedDataset, MixtureSpec, RawDataset,
                            class_probability, implied_logistic_coefficients,
                            population_linear_params)
from privmask.simulation import table1_spec, table2_spec


def ar1(p, rho):
    i = np.arange(p)
    return rho ** np.abs(i[:, None] - i[None, :])


def random_spec(rng, p, q=0):
    A = rng.normal(size=(p, p))
    Sigma = A @ A.T + p * np.eye(p)
    mu0, mu1 = rng.normal(size=p), rng.normal(size=p)
    if q == 0:
        return MixtureSpec(mu0, mu1, Sigma, p1=rng.uniform(0.1, 0.9))
    return MixtureSpec(mu0, mu1, Sigma, gamma0=rng.normal(), gamma1=rng.normal(size=q),
                       C=rng.uniform(-1, 1, size=(q, p)))


class TestMixtureSpec:
    def test_needs_exactly_one_weight_model(self):
        with pytest.raises(ValueError):
            MixtureSpec([0.0], [1.0], [[1.0]])
        with pytest.raises(ValueError):
            MixtureSpec([0.0], [1.0], [[1.0]], p1=0.5, gamma0=0.0, gamma1=[1.0], C=[[1.0]])

    def test_not_positive_definite(self):
        with pytest.raises(ValueError, match="Sigma not positive definite"):
            MixtureSpec([0, 0], [1, 1], [[1.0, 2.0], [2.0, 1.0]], p1=0.5)

    def test_conditional_requires_C(self):
        with pytest.raises(ValueError):
            MixtureSpec([0.0], [1.0], [[1.0]], gamma0=0.0, gamma1=[1.0])

    def test_dict_round_trip(self):
        for spec in (table1_spec(), table2_spec()):
            back = MixtureSpec.from_dict(spec.to_dict())
            np.testing.assert_array_equal(back.Sigma, spec.Sigma)
            assert back.q == spec.q and back.p == 3


class TestImpliedCoefficients:
    def test_identical_classes(self):
        spec = MixtureSpec([0.3, -1.0], [0.3, -1.0], ar1(2, 0.3), p1=0.5)
        c = implied_logistic_coefficients(spec)
        assert c.beta0 == 0.0
        np.testing.assert_array_equal(c.beta1, 0.0)

    def test_forward_solve_oracle(self):
        # mu0 := mu1 - Sigma beta1 with beta1 = (1, -1, 0)
        Sigma = ar1(3, 0.5)
        mu1 = np.ones(3)
        mu0 = mu1 - Sigma @ np.array([1.0, -1.0, 0.0])
        np.testing.assert_allclose(mu0, [0.5, 1.5, 1.25])
        c = implied_logistic_coefficients(MixtureSpec(mu0, mu1, Sigma, p1=0.5))
        np.testing.assert_allclose(c.beta1, [1.0, -1.0, 0.0], atol=1e-14)

    def test_symmetric_means_zero_intercept(self):
        mu = np.array([0.4, -0.2])
        c = implied_logistic_coefficients(MixtureSpec(-mu, mu, ar1(2, 0.2), p1=0.5))
        assert abs(c.beta0) < 1e-15

    def test_conditional_formulas(self):
        spec = table2_spec()
        c = implied_logistic_coefficients(spec)
        Si = np.linalg.inv(spec.Sigma)
        b1 = Si @ (spec.mu1 - spec.mu0)
        np.testing.assert_allclose(c.beta1, b1, atol=1e-13)
        np.testing.assert_allclose(c.beta2, spec.gamma1 - spec.C @ b1, atol=1e-13)
        b0 = spec.gamma0 - 0.5 * (spec.mu1 @ Si @ spec.mu1 - spec.mu0 @ Si @ spec.mu0)
        assert c.beta0 == pytest.approx(b0, abs=1e-13)

    def test_bayes_rule_oracle(self):
        # posterior class probability from the two Gaussian densities
        from scipy.stats import multivariate_normal
        rng = np.random.default_rng(5)
        spec = random_spec(rng, 3)
        coef = implied_logistic_coefficients(spec)
        for x in rng.normal(size=(5, 3)):
            f1 = spec.p1 * multivariate_normal(spec.mu1, spec.Sigma).pdf(x)
            f0 = (1 - spec.p1) * multivariate_normal(spec.mu0, spec.Sigma).pdf(x)
            assert class_probability(coef, x) == pytest.approx(f1 / (f0 + f1), rel=1e-10)

    def test_conditional_bayes_rule_oracle(self):
        from scipy.special import expit
        from scipy.stats import multivariate_normal
        spec = table2_spec()
        coef = implied_logistic_coefficients(spec)
        rng = np.random.default_rng(6)
        for x, z in zip(rng.normal(size=(5, 3)), rng.uniform(-1, 1, size=(5, 2))):
            w = expit(spec.gamma0 + z @ spec.gamma1)
            f1 = w * multivariate_normal(spec.mu1 + z @ spec.C, spec.Sigma).pdf(x)
            f0 = (1 - w) * multivariate_normal(spec.mu0 + z @ spec.C, spec.Sigma).pdf(x)
            assert class_probability(coef, x, z) == pytest.approx(f1 / (f0 + f1), rel=1e-10)

    @given(st.floats(0.01, 0.99), st.floats(0.01, 0.99))
    @settings(max_examples=30, deadline=None)
    def test_beta1_ignores_class_weights(self, pa, pb):
        s = table1_spec(0.5)
        a = implied_logistic_coefficients(MixtureSpec(s.mu0, s.mu1, s.Sigma, p1=pa))
        b = implied_logistic_coefficients(MixtureSpec(s.mu0, s.mu1, s.Sigma, p1=pb))
        assert np.array_equal(a.beta1, b.beta1)

    def test_beta1_ignores_gamma(self):
        s = table2_spec()
        other = MixtureSpec(s.mu0, s.mu1, s.Sigma, gamma0=-2.0, gamma1=[0.1, 3.0], C=s.C)
        assert np.array_equal(implied_logistic_coefficients(s).beta1,
                              implied_logistic_coefficients(other).beta1)

    def test_boundary_p1_rejected(self):
        spec = MixtureSpec([0.0], [1.0], [[1.0]], p1=1.0)
        with pytest.raises(ValueError):
            implied_logistic_coefficients(spec)


class TestClassProbability:
    def test_zero_coefficients(self):
        coef = LogisticCoefficients(0.0, [0.0, 0.0], [0.0])
        assert class_probability(coef, [3.0, -7.0], [2.0]) == 0.5

    def test_zero_predictor(self):
        assert class_probability(LogisticCoefficients(0.0, [1.0]), [0.0]) == 0.5

    @pytest.mark.parametrize("t", [-1000.0, -745.0, -700.0, -50.0, 0.0, 50.0, 1000.0])
    def test_extreme_predictor_matches_high_precision(self, t):
        with np.errstate(all="raise"):
            got = class_probability(LogisticCoefficients(t, [0.0]), [0.0])
        with mpmath.workdps(50):
            ref = float(1 / (1 + mpmath.exp(-mpmath.mpf(t))))
        assert np.isfinite(got) and 0.0 <= got <= 1.0
        assert got == pytest.approx(ref, rel=1e-14, abs=1e-300)

    def test_moderately_negative_predictor_is_positive(self):
        assert class_probability(LogisticCoefficients(-700.0, [0.0]), [0.0]) > 0

    @given(st.floats(-700, 700))
    @settings(max_examples=200)
    def test_symmetry(self, t):
        a = class_probability(LogisticCoefficients(t, [0.0]), [0.0])
        b = class_probability(LogisticCoefficients(-t, [0.0]), [0.0])
        assert abs(a + b - 1.0) <= 1e-12

    @given(st.floats(-25, 25), st.floats(1e-3, 5))
    @settings(max_examples=200)
    def test_strictly_increasing(self, t, dt):
        f = lambda s: class_probability(LogisticCoefficients(s, [0.0]), [0.0])
        assert f(t + dt) > f(t)

    def test_dimension_check(self):
        with pytest.raises(ValueError):
            class_probability(LogisticCoefficients(0.0, [1.0, 2.0]), [1.0])


class TestPopulationParams:
    def test_equal_means(self):
        spec = MixtureSpec([1.0, 2.0], [1.0, 2.0], ar1(2, 0.4), p1=0.3)
        lp = population_linear_params(spec)
        np.testing.assert_allclose(lp.b1, 0.0, atol=1e-15)

    def test_bernoulli_variance(self):
        # with mu1 = mu0 the residual variance equals Var(y) = p0 p1
        spec = MixtureSpec([0.0], [0.0], [[2.0]], p1=0.5)
        assert population_linear_params(spec).tau2 == pytest.approx(0.25, abs=1e-15)

    def test_lemma_closure_table1(self):
        lp = population_linear_params(table1_spec())
        np.testing.assert_allclose(lp.b1 / lp.tau2, [1.0, -1.0, 0.0], atol=1e-10)

    @pytest.mark.parametrize("seed", range(5))
    def test_lemma_closure_random_unconditional(self, seed):
        spec = random_spec(np.random.default_rng(seed), 3)
        lp = population_linear_params(spec)
        ref = implied_logistic_coefficients(spec).beta1
        assert np.abs(lp.b1 / lp.tau2 - ref).max() <= 1e-10

    @pytest.mark.parametrize("seed", range(3))
    def test_lemma_closure_random_conditional(self, seed):
        spec = random_spec(np.random.default_rng(100 + seed), 2, q=2)
        lp = population_linear_params(spec, oracle_budget=10**5)
        ref = implied_logistic_coefficients(spec).beta1
        assert np.abs(lp.b1 / lp.tau2 - ref).max() <= 1e-10

    def test_analytic_moments_match_brute_force_sample(self):
        # independent check: OLS on a very large raw sample
        from privmask.estimators import ols_fit
        from privmask.sampling import SeedSpec, sample_mixture
        spec = table1_spec()
        lp = population_linear_params(spec)
        raw = sample_mixture(spec, 400_000, SeedSpec(11))
        b, tau2 = ols_fit(raw.y_star, raw.X_star)
        np.testing.assert_allclose(b[1:], lp.b_bar, atol=4e-3)
        assert tau2 == pytest.approx(lp.tau2, abs=2e-3)
        assert b[0] == pytest.approx(lp.b0, abs=1e-2)

    def test_conditional_moments_match_brute_force_sample(self):
        from privmask.estimators import ols_fit
        from privmask.sampling import SeedSpec, sample_conditional_mixture
        spec = table2_spec()
        lp = population_linear_params(spec, oracle_budget=10**6)
        raw = sample_conditional_mixture(spec, 400_000, SeedSpec(12))
        b, tau2 = ols_fit(raw.y_star, raw.W_star)
        np.testing.assert_allclose(b[1:], lp.b_bar, atol=5e-3)
        assert tau2 == pytest.approx(lp.tau2, abs=2e-3)
        assert b[0] == pytest.approx(lp.b0, abs=1e-2)

    def test_oracle_is_deterministic(self):
        a = population_linear_params(table2_spec(), oracle_budget=10**5)
        b = population_linear_params(table2_spec(), oracle_budget=10**5)
        assert np.array_equal(a.b_bar, b.b_bar) and a.tau2 == b.tau2

    def test_degenerate_covariates(self):
        # Z constant in effect: C huge relative to ... use a singular Sigma_zz via q duplicate
        spec = MixtureSpec([0.0], [1.0], [[1.0]], gamma0=0.0, gamma1=[0.0, 0.0],
                           C=[[1.0], [1.0]])
        # Var(W) is nonsingular here; population params succeed
        assert population_linear_params(spec, oracle_budget=1000).tau2 > 0


class TestDatasets:
    def test_raw_rejects_non_binary(self):
        with pytest.raises(ValueError):
            RawDataset([0, 0.5], [[1.0], [2.0]])

    def test_raw_row_mismatch(self):
        with pytest.raises(ValueError):
            RawDataset([0, 1, 1], [[1.0], [2.0]])

    def test_masked_invariants(self):
        with pytest.raises(ValueError):
            MaskedDataset(np.zeros(3), np.zeros((3, 2)), 0.0, 2)
        with pytest.raises(ValueError):
            MaskedDataset(np.zeros(5), np.zeros((5, 1)), -1.0, 1)
        m = MaskedDataset(np.zeros(5), np.zeros((5, 1)), 0.5, 1)
        assert m.W_tilde.shape == (5, 2)

import math

import numpy as np
import pytest

from wdsm import density as d
from wdsm import estimators as e
from wdsm.density import GaussianMixture1D

N01 = GaussianMixture1D.normal()


@pytest.fixture(scope="module")
def fig1():
    return d.fig1_mixture()


class TestConditionalScore:
    def test_first_order(self):
        assert e.conditional_score(0.0, 0.5, 0.5, 1) == pytest.approx(-2.0)

    def test_second_order(self):
        assert e.conditional_score(1.3, -0.2, 0.5, 2) == pytest.approx(-4.0)

    def test_higher_orders_vanish(self):
        assert e.conditional_score(1.0, 2.0, 0.3, 3) == 0.0
        assert np.all(e.conditional_score(np.ones(4), 0.0, 0.3, 5) == 0.0)

    def test_h1_is_conditional_score(self):
        h = e.h1(0.7)
        x0 = np.linspace(-2, 2, 9)
        assert np.array_equal(h(x0, 0.4), e.conditional_score(x0, 0.4, 0.7, 1))


class TestScoreOperator:
    def test_second_order_identity_term_by_term(self):
        # h_2 = s2(x_t|x0) + s(x_t|x0)^2 - s(x_t|x0) s(x_t)
        sig = 0.8
        marg = d.perturb_density(d.fig1_mixture(), sig)
        h2 = e.apply_score_operator(e.h1(sig, marg))
        x0 = np.linspace(-1, 5, 13)
        for xt in (-0.5, 1.0, 3.9):
            a = e.conditional_score(x0, xt, sig, 1)
            s = d.score(marg, xt)
            expected = e.conditional_score(x0, xt, sig, 2) + a * a - a * s
            assert np.allclose(h2(x0, xt), expected, rtol=1e-13, atol=1e-13)

    def test_polynomial_terms(self):
        terms = e.hk_term(2, 1.0).terms()
        assert len(terms) == 3
        assert sorted(terms.values()) == [-1.0, 1.0, 1.0]

    def test_degenerate_prior_cancels_outer_products(self):
        # point prior at x0: the marginal score equals the kernel score
        sig, x0 = 0.6, 1.2
        h2 = e.apply_score_operator(e.h1(sig, lambda x: (x0 - np.asarray(x)) / sig**2))
        for xt in (-1.0, 0.3, 2.0):
            assert h2(x0, xt) == pytest.approx(-1.0 / sig**2, rel=1e-12)

    def test_gaussian_prior_second_order_mean(self):
        # E_{x0|x_t}[h_2] = -1/(s^2 + sigma^2): exact posterior moments, no sampling
        sig = 1.0
        h2 = e.hk_term(2, sig, d.perturb_density(N01, sig))
        for xt in (-2.0, 0.0, 1.5):
            post = d.posterior(N01, sig, xt)
            m, v = post.means[0], post.stds[0] ** 2
            # h_2 is quadratic in x0, so two-point Gauss-Hermite integration is exact
            nodes = np.array([m - math.sqrt(v), m + math.sqrt(v)])
            assert np.mean(h2(nodes, xt)) == pytest.approx(-0.5, abs=1e-12)

    def test_finite_difference_marginal_matches_analytic(self, fig1):
        sig = 0.5
        marg = d.perturb_density(fig1, sig)
        fd = e.FiniteDifferenceMarginal(lambda x: d.score(marg, x))
        for xt in (0.5, 2.0, 3.5):
            got = fd(xt, 3)
            ref = d.log_density_derivatives(marg, xt, 3)
            assert got[0] == pytest.approx(ref[0], rel=1e-12)
            assert got[1] == pytest.approx(ref[1], rel=1e-6)
            assert got[2] == pytest.approx(ref[2], rel=1e-3)

    def test_order_limit(self):
        with pytest.raises(ValueError):
            e.hk_term(e.MAX_ORDER + 1, 1.0)


class TestMonteCarloScore:
    def test_first_order_matches_analytic(self, fig1):
        sig, xt = 0.5, 1.0
        est, se = e.estimate_score_mc(fig1, sig, xt, 1, 200_000, np.random.default_rng(1))
        assert abs(est - d.score(d.perturb_density(fig1, sig), xt)) < 3 * se

    def test_second_order_gaussian(self):
        est, se = e.estimate_score_mc(N01, 1.0, 0.0, 2, 10**6, np.random.default_rng(2))
        assert abs(est + 0.5) < 3 * se

    def test_third_order_fig1(self, fig1):
        ref = d.log_density_derivative(d.perturb_density(fig1, 0.5), 2.0, 3)
        est, se = e.estimate_score_mc(fig1, 0.5, 2.0, 3, 10**6, np.random.default_rng(3))
        assert abs(est - ref) < 3 * se

    def test_needs_two_draws(self, fig1):
        with pytest.raises(ValueError):
            e.estimate_score_mc(fig1, 0.5, 0.0, 1, 1, 0)


class TestSecondOrderEstimators:
    @pytest.mark.parametrize("kind", e.KINDS)
    def test_unbiased_without_error(self, kind):
        est, se = e.second_order_estimate(kind, N01, 1.0, 0.0, 0.0, 10**6, np.random.default_rng(4))
        assert abs(est + 0.5) < 3 * se

    def test_t2_positive_quadratic_bias(self):
        est, se = e.second_order_estimate("T2", N01, 1.0, 0.0, 0.1, 10**6, np.random.default_rng(5))
        assert abs(est + 0.49) < 3 * se

    def test_t3_negative_quadratic_bias(self):
        est, se = e.second_order_estimate("t3", N01, 1.0, 0.0, 0.1, 10**6, np.random.default_rng(6))
        assert abs(est + 0.51) < 3 * se

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            e.second_order_estimate("t4", N01, 1.0, 0.0, 0.0, 10, 0)

    @pytest.mark.parametrize("kind", e.KINDS)
    def test_expectations_match_closed_form(self, fig1, kind):
        sig, xt, delta = 0.7, 1.1, 0.3
        marg = d.perturb_density(fig1, sig)
        s, hess = d.log_density_derivatives(marg, xt, 2)
        est, se = e.second_order_estimate(kind, fig1, sig, xt, delta, 10**6, np.random.default_rng(7))
        assert abs(est - e.expected_second_order(kind, s, hess, delta)) < 3 * se


class TestBiasVarianceHarness:
    def test_zero_delta_all_unbiased(self, fig1):
        rows = e.estimator_bias_variance(e.KINDS, fig1, 0.5, [0.0, 2.0, 4.0], 0.0, 2000, 50, np.random.default_rng(8))
        assert len(rows) == 9
        for r in rows:
            assert abs(r.bias) <= 3 * r.std_err, r

    def test_t1_unbiased_at_stationary_point(self):
        rows = e.estimator_bias_variance("t1", N01, 1.0, [0.0], 0.2, 2000, 100, np.random.default_rng(9))
        assert abs(rows[0].bias) <= 3 * rows[0].std_err

    def test_needs_ten_reps(self):
        with pytest.raises(ValueError):
            e.estimator_bias_variance("t1", N01, 1.0, [0.0], 0.2, 100, 5, 0)

    def test_population_variance_ordering_gaussian(self):
        # with a constant Hessian T2 has no spread over x_t at all
        v1, v2, v3 = (e.population_variance(k, N01, 1.0, 0.2) for k in e.KINDS)
        assert v2 == pytest.approx(0.0, abs=1e-10)
        assert v1 == pytest.approx(0.04 * 0.5, rel=1e-6)  # delta^2 Var(s), Var(s) = 1/2
        assert v3 == pytest.approx(4 * 0.04 * 0.5, rel=1e-6)

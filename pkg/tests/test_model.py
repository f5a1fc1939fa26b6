import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import poisson

from psgld.data import FactorPair, ObservationMatrix
from psgld.errors import ContractViolation, DomainError, UnsupportedModelError
from psgld.model import (ModelSpec, beta_divergence, block_gradients, dloglik_dmu,
                         generate_synthetic, log_likelihood, log_posterior_unnorm,
                         sample_tweedie, tweedie_zero_probability)

from conftest import central_difference


def general_formula(v, mu, beta):
    return v ** beta / (beta * (beta - 1)) - v * mu ** (beta - 1) / (beta - 1) + mu ** beta / beta


class TestBetaDivergence:
    def test_euclidean(self):
        assert beta_divergence(3.0, 1.0, 2) == 2.0

    def test_zero_at_equality(self):
        assert beta_divergence(5.0, 5.0, 0.5) == pytest.approx(0.0, abs=1e-14)

    def test_kl_value(self):
        # general formula evaluated at 1 +- 1e-6 straddles 0.386294...
        assert beta_divergence(2.0, 1.0, 1) == pytest.approx(0.3862943611198906, rel=1e-12)
        lo, hi = general_formula(2.0, 1.0, 1 - 1e-6), general_formula(2.0, 1.0, 1 + 1e-6)
        assert min(lo, hi) <= beta_divergence(2.0, 1.0, 1) <= max(lo, hi)

    def test_kl_at_zero_is_mu(self):
        assert beta_divergence(0.0, 2.5, 1) == 2.5

    def test_is_closed_form(self):
        assert beta_divergence(2.0, 1.0, 0) == pytest.approx(2 - math.log(2) - 1)

    @pytest.mark.parametrize("v,mu,beta", [(1.0, 0.0, 1), (1.0, -1.0, 2), (0.0, 1.0, 0)])
    def test_domain_errors(self, v, mu, beta):
        with pytest.raises(DomainError):
            beta_divergence(v, mu, beta)

    def test_vectorised(self):
        out = beta_divergence(np.array([1.0, 2.0]), np.array([1.0, 1.0]), 2)
        np.testing.assert_allclose(out, [0.0, 0.5])

    @settings(max_examples=300, deadline=None)
    @given(v=st.floats(0.01, 10), mu=st.floats(0.01, 10),
           beta=st.sampled_from([-1, 0, 0.5, 1, 2, 3]))
    def test_nonnegative(self, v, mu, beta):
        d = beta_divergence(v, mu, beta)
        assert d >= -1e-12 * (1 + abs(v) + abs(mu))
        if abs(v - mu) > 1e-3:
            assert d > 0

    @pytest.mark.parametrize("limit,closed", [(1, "kl"), (0, "is")])
    def test_limits_match_closed_forms(self, limit, closed):
        r = np.random.default_rng(0)
        v = r.uniform(0.1, 10, 200)
        mu = r.uniform(0.1, 10, 200)
        exact = beta_divergence(v, mu, limit)
        for b in (limit - 1e-8, limit + 1e-8):
            np.testing.assert_allclose(beta_divergence(v, mu, b), exact, rtol=1e-6, atol=1e-9)


class TestDlogLik:
    def test_gaussian(self):
        assert dloglik_dmu(3.0, 1.0, ModelSpec(beta=2, phi=1)) == 2.0

    @pytest.mark.parametrize("beta", [-1, 0, 0.5, 1, 2])
    def test_vanishes_at_mean(self, beta):
        assert dloglik_dmu(1.7, 1.7, ModelSpec(beta=beta, phi=3.0)) == 0.0

    def test_itakura_saito_value(self):
        # central difference of -d_0(1 || mu) at mu = 2 gives -0.25
        assert dloglik_dmu(1.0, 2.0, ModelSpec(beta=0, phi=1)) == pytest.approx(-0.25)

    def test_nan_rejected(self):
        with pytest.raises(DomainError):
            dloglik_dmu(float("nan"), 1.0, ModelSpec())

    def test_matches_finite_differences(self):
        r = np.random.default_rng(5)
        for _ in range(1000):
            beta = r.choice([-1, 0, 0.5, 1, 2, 3])
            phi = r.uniform(0.5, 2)
            v, mu = r.uniform(0.1, 10, 2)
            spec = ModelSpec(beta=beta, phi=phi)
            h = 1e-6 * mu
            fd = -(beta_divergence(v, mu + h, beta) - beta_divergence(v, mu - h, beta)) / (2 * h) / phi
            assert dloglik_dmu(v, mu, spec) == pytest.approx(fd, rel=1e-5, abs=1e-8)


class TestBlockGradients:
    def test_prior_only_at_exact_fit(self):
        r = np.random.default_rng(1)
        w, h = r.uniform(0.5, 1, (3, 2)), r.uniform(0.5, 1, (2, 4))
        spec = ModelSpec(beta=0.5, lambda_w=0.3, lambda_h=0.7, k=2)
        gw, gh = block_gradients(w @ h, w, h, spec, 4.0)
        np.testing.assert_allclose(gw, -0.3)
        np.testing.assert_allclose(gh, -0.7)

    def test_hand_example(self):
        spec = ModelSpec(beta=2, phi=1, lambda_w=0.1, lambda_h=0.1, k=1)
        gw, _ = block_gradients(np.array([[3.0]]), np.array([[1.0]]), np.array([[1.0]]), spec, 1.0)
        assert gw[0, 0] == pytest.approx(1.9)

    def test_shape_mismatch(self):
        with pytest.raises(ContractViolation):
            block_gradients(np.ones((2, 2)), np.ones((3, 1)), np.ones((1, 2)), ModelSpec(k=1), 1.0)

    @pytest.mark.parametrize("beta", [0, 0.5, 1, 2])
    def test_finite_differences_4x4(self, beta):
        r = np.random.default_rng(11)
        spec = ModelSpec(beta=beta, phi=1.3, lambda_w=0.4, lambda_h=0.6, k=2)
        w, h = r.uniform(0.5, 1.5, (4, 2)), r.uniform(0.5, 1.5, (2, 4))
        v = r.uniform(0.5, 3, (4, 4))
        scale = 2.5

        def objective_w(wx):
            return (scale * -np.sum(beta_divergence(v, wx @ h, beta)) / spec.phi
                    - spec.lambda_w * np.abs(wx).sum())

        def objective_h(hx):
            return (scale * -np.sum(beta_divergence(v, w @ hx, beta)) / spec.phi
                    - spec.lambda_h * np.abs(hx).sum())

        gw, gh = block_gradients(v, w, h, spec, scale)
        np.testing.assert_allclose(gw, central_difference(objective_w, w), rtol=1e-5)
        np.testing.assert_allclose(gh, central_difference(objective_h, h), rtol=1e-5)

    @pytest.mark.parametrize("beta", [0, 1, 2])
    def test_full_matrix_matches_log_posterior(self, beta):
        r = np.random.default_rng(3)
        spec = ModelSpec(beta=beta, phi=0.8, lambda_w=0.5, lambda_h=0.2, k=3)
        w, h = r.uniform(0.5, 1.5, (5, 3)), r.uniform(0.5, 1.5, (3, 6))
        v = ObservationMatrix.from_dense(r.uniform(0.5, 4, (5, 6)))
        gw, gh = block_gradients(v, w, h, spec, 1.0)
        fw = central_difference(lambda x: log_posterior_unnorm(v, FactorPair(x, h), spec), w)
        fh = central_difference(lambda x: log_posterior_unnorm(v, FactorPair(w, x), spec), h)
        np.testing.assert_allclose(gw, fw, rtol=1e-5)
        np.testing.assert_allclose(gh, fh, rtol=1e-5)

    def test_sparse_matches_masked_dense(self):
        r = np.random.default_rng(9)
        spec = ModelSpec(beta=1, k=2)
        w, h = r.uniform(0.5, 1.5, (6, 2)), r.uniform(0.5, 1.5, (2, 5))
        dense = r.poisson(2.0, (6, 5)).astype(float)
        mask = r.random((6, 5)) < 0.5
        v = ObservationMatrix.from_masked(dense, mask)
        gw, gh = block_gradients(v, w, h, spec, 1.7)
        from psgld.model import dense_gradients
        ew, eh = dense_gradients(dense, w, h, spec, 1.7, mask=mask)
        np.testing.assert_allclose(gw, ew, rtol=1e-12)
        np.testing.assert_allclose(gh, eh, rtol=1e-12)


class TestLogPosterior:
    def test_exact_fit_is_zero(self):
        w = np.array([[1.0, 2.0]])
        h = np.array([[0.5], [1.5]])
        v = ObservationMatrix.from_dense(w @ h)
        spec = ModelSpec(beta=2, lambda_w=1e-300, lambda_h=1e-300, k=2)
        assert log_posterior_unnorm(v, FactorPair(w, h), spec) == pytest.approx(0.0, abs=1e-12)

    def test_poisson_is_exact_pmf(self):
        v = ObservationMatrix.from_dense([[2.0]])
        spec = ModelSpec(beta=1, phi=1, k=1)
        ll = log_likelihood(v, FactorPair([[1.0]], [[1.0]]), spec)
        assert ll == pytest.approx(poisson.logpmf(2, 1.0), rel=1e-12)
        assert ll == pytest.approx(-1 - math.log(2))

    def test_poisson_random_matches_scipy(self, poisson_data):
        spec, v, truth = poisson_data
        mu = truth.w @ truth.h
        expected = poisson.logpmf(v.to_dense(), mu).sum()
        assert log_likelihood(v, truth, spec) == pytest.approx(expected, rel=1e-10)

    def test_linear_in_lambda_w(self, poisson_data):
        spec, v, truth = poisson_data
        doubled = ModelSpec(spec.beta, spec.phi, 2 * spec.lambda_w, spec.lambda_h, spec.k)
        diff = log_posterior_unnorm(v, truth, spec) - log_posterior_unnorm(v, truth, doubled)
        assert diff == pytest.approx(spec.lambda_w * np.abs(truth.w).sum(), rel=1e-10)


class TestGenerators:
    def test_poisson_mean(self):
        r = np.random.default_rng(0)
        x = sample_tweedie(np.full(10 ** 6, 2.0), ModelSpec(beta=1, phi=1), r)
        assert abs(x.mean() - 2) < 0.02

    def test_compound_poisson_moments(self):
        r = np.random.default_rng(1)
        spec = ModelSpec(beta=0.5, phi=1)
        x = sample_tweedie(np.full(10 ** 6, 2.0), spec, r)
        assert abs(x.mean() - 2) < 0.02 * 2
        assert abs(x.var() - 2 ** 1.5) < 0.05 * 2 ** 1.5
        p0 = tweedie_zero_probability(2.0, spec)
        se = math.sqrt(p0 * (1 - p0) / len(x))
        assert abs(np.mean(x == 0) - p0) < 3 * se

    @pytest.mark.parametrize("beta,phi", [(0, 0.5), (2, 0.7), (0.3, 2.0), (1, 2.0)])
    def test_mean_variance_relation(self, beta, phi):
        r = np.random.default_rng(2)
        spec = ModelSpec(beta=beta, phi=phi)
        mu = 30.0 if beta == 2 else 3.0  # keeps clipping at zero negligible
        x = sample_tweedie(np.full(4 * 10 ** 5, mu), spec, r)
        assert x.mean() == pytest.approx(mu, rel=0.02)
        assert x.var() == pytest.approx(phi * mu ** (2 - beta), rel=0.05)

    def test_deterministic(self):
        spec = ModelSpec(beta=0.5, k=2)
        a = generate_synthetic(spec, 5, 6, seed=7)
        b = generate_synthetic(spec, 5, 6, seed=7)
        assert a[0].equals(b[0]) and a[1].identical(b[1])

    @pytest.mark.parametrize("beta", [-1, 1.5, 3])
    def test_unsupported(self, beta):
        with pytest.raises(UnsupportedModelError):
            generate_synthetic(ModelSpec(beta=beta), 3, 3, 0)

    def test_sparse_generation(self):
        v, _ = generate_synthetic(ModelSpec(k=2), 40, 50, seed=0, density=0.1)
        assert not v.dense and v.n_observed == 200

    def test_spec_validation(self):
        with pytest.raises(ContractViolation):
            ModelSpec(phi=0)
        with pytest.raises(ContractViolation):
            ModelSpec(k=0)

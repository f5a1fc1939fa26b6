import numpy as np
import pytest
from scipy import stats

from psgld import rng as rngmod
from psgld.baselines import (AuxiliaryTensor, SgldSubsample, default_subsample_size,
                             draw_subsample, dsgd_iteration, gibbs_conditionals, gibbs_iteration,
                             ld_iteration, run_dsgd, run_gibbs, run_ld, run_sgld, sample_auxiliary,
                             sgld_iteration, subsample_gradients)
from psgld.data import FactorPair, ObservationMatrix
from psgld.errors import ConfigurationError, ModelError
from psgld.io import holdout_split, rmse
from psgld.model import ModelSpec, full_gradients, generate_synthetic
from psgld.partition import build_grid, diagonal_parts
from psgld.sampler import SamplerConfig, StepSchedule, initial_state, psgld_iteration


def grid_tv(v, h, lam, n=200):
    """Total variation between the Gamma conditional of w and the joint
    density of the 1x1x1 model evaluated along w on an ``n``-point grid."""
    spec = ModelSpec(beta=1, phi=1, lambda_w=lam, lambda_h=lam, k=1)
    obs = ObservationMatrix.from_dense([[float(v)]])
    aux = AuxiliaryTensor(np.array([[v]], dtype=np.int64))
    shape, rate = gibbs_conditionals(np.array([[h]]), aux, obs, spec, "w")
    hi = stats.gamma.ppf(1 - 1e-12, shape[0, 0], scale=1 / rate[0, 0])
    w = np.linspace(hi / n, hi, n)
    # log p(v | w, h) + log p(w) + log p(h), up to constants
    log_joint = stats.poisson.logpmf(v, w * h) - lam * w - lam * h
    joint = np.exp(log_joint - log_joint.max())
    joint /= joint.sum()
    cond = stats.gamma.pdf(w, shape[0, 0], scale=1 / rate[0, 0])
    cond /= cond.sum()
    return 0.5 * np.abs(joint - cond).sum()


class TestGibbs:
    @pytest.mark.parametrize("v,h,lam", [(0, 1.0, 1.0), (3, 0.7, 1.0), (10, 2.5, 0.3)])
    def test_conditional_matches_joint(self, v, h, lam):
        assert grid_tv(v, h, lam) <= 1e-3

    def test_counts_preserved(self, poisson_data):
        spec, v, _ = poisson_data
        state = initial_state(spec, 12, 12, 0)
        g = np.random.default_rng(0)
        for _ in range(200):
            state, aux = gibbs_iteration(state, None, v, spec, g)
            assert aux.check(v)

    def test_single_component(self):
        spec = ModelSpec(beta=1, phi=1, k=1)
        v = ObservationMatrix.from_dense([[3.0, 0.0], [1.0, 2.0]])
        aux = sample_auxiliary(initial_state(spec, 2, 2, 0), v, np.random.default_rng(0))
        np.testing.assert_array_equal(aux.s[:, 0], [3, 0, 1, 2])

    def test_zero_observation(self):
        spec = ModelSpec(beta=1, phi=1, k=3)
        v = ObservationMatrix.from_dense([[0.0]])
        aux = sample_auxiliary(initial_state(spec, 1, 1, 0), v, np.random.default_rng(0))
        np.testing.assert_array_equal(aux.s, 0)
        shape, rate = gibbs_conditionals(np.ones((3, 1)), aux, v, spec, "w")
        np.testing.assert_array_equal(shape, 1.0)
        np.testing.assert_array_equal(rate, 2.0)

    def test_sparse_sums_run_over_observed(self):
        spec = ModelSpec(beta=1, phi=1, lambda_w=0.5, k=2)
        dense = np.array([[1.0, 2.0, 0.0], [0.0, 4.0, 5.0]])
        mask = np.array([[True, True, False], [False, True, True]])
        v = ObservationMatrix.from_masked(dense, mask)
        h = np.array([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]])
        aux = AuxiliaryTensor(np.array([[1, 0], [1, 1], [2, 2], [5, 0]]))
        shape, rate = gibbs_conditionals(h, aux, v, spec, "w")
        np.testing.assert_allclose(rate, [[0.5 + 1 + 2, 0.5 + 4 + 5], [0.5 + 2 + 3, 0.5 + 5 + 6]])
        np.testing.assert_allclose(shape, [[1 + 2, 1 + 1], [1 + 7, 1 + 2]])

    def test_requires_poisson(self):
        v = ObservationMatrix.from_dense([[1.0]])
        with pytest.raises(ModelError):
            gibbs_iteration(FactorPair([[1.0]], [[1.0]]), None, v, ModelSpec(beta=0, k=1),
                            np.random.default_rng(0))
        with pytest.raises(ModelError):
            gibbs_iteration(FactorPair([[1.0]], [[1.0]]), None,
                            ObservationMatrix.from_dense([[1.5]]), ModelSpec(k=1),
                            np.random.default_rng(0))

    def test_posterior_of_product(self):
        # single observation: compare E[w h | v] from the chain with quadrature
        spec = ModelSpec(beta=1, phi=1, lambda_w=1.0, lambda_h=1.0, k=1)
        v = ObservationMatrix.from_dense([[4.0]])
        x = np.linspace(1e-4, 25, 1500)
        W, H = np.meshgrid(x, x, indexing="ij")
        dens = np.exp(stats.poisson.logpmf(4, W * H) - W - H)
        exact = (W * H * dens).sum() / dens.sum()
        samples = []
        run_gibbs(v, spec, SamplerConfig(T=20000, burn_in=1000, seed=1, metrics_every=0),
                  callback=lambda rec, st: samples.append(st.w[0, 0] * st.h[0, 0])
                  if rec.iteration > 1000 else None)
        s = np.array(samples)
        # batch means standard error
        se = s.reshape(50, -1).mean(axis=1).std(ddof=1) / np.sqrt(50)
        assert abs(s.mean() - exact) < 4 * se


class TestSgld:
    def test_subsample_gradient_unbiased(self):
        spec = ModelSpec(beta=1, k=2)
        v, _ = generate_synthetic(spec, 6, 6, seed=0)
        state = initial_state(spec, 6, 6, 1)
        full = full_gradients(v, state, spec)
        g = np.random.default_rng(0)
        n = 4000
        draws = []
        for _ in range(n):
            gw, _ = subsample_gradients(v, state, spec, draw_subsample(v, 5, g))
            draws.append(gw)
        draws = np.array(draws)
        mean = draws.mean(axis=0)
        se = draws.std(axis=0, ddof=1) / np.sqrt(n)
        assert np.all(np.abs(mean - full[0]) < 4.5 * se + 1e-12)

    def test_full_subsample_with_all_indices(self):
        spec = ModelSpec(beta=0.5, k=2)
        v, _ = generate_synthetic(spec, 5, 4, seed=2)
        state = initial_state(spec, 5, 4, 0)
        gw, gh = subsample_gradients(v, state, spec, SgldSubsample(np.arange(v.n_observed)))
        fw, fh = full_gradients(v, state, spec)
        np.testing.assert_allclose(gw, fw, rtol=1e-12)
        np.testing.assert_allclose(gh, fh, rtol=1e-12)

    def test_subsample_validation(self):
        v = ObservationMatrix.from_dense(np.ones((2, 2)))
        with pytest.raises(ConfigurationError):
            draw_subsample(v, 0, np.random.default_rng(0))
        with pytest.raises(ConfigurationError):
            SgldSubsample(np.array([], dtype=int))

    def test_default_size(self):
        assert default_subsample_size(ObservationMatrix.from_dense(np.ones((32, 32)))) == 32
        assert default_subsample_size(ObservationMatrix.from_dense(np.ones((2, 2)))) == 1

    def test_step_reproducible(self):
        spec = ModelSpec(beta=1, k=2)
        v, _ = generate_synthetic(spec, 8, 8, seed=0)
        state = initial_state(spec, 8, 8, 0)
        a = sgld_iteration(state, v, spec, 0.001, 10, np.random.default_rng(5))
        b = sgld_iteration(state, v, spec, 0.001, 10, np.random.default_rng(5))
        assert a.identical(b)
        assert a.w.min() >= 0


class TestLd:
    def test_noise_free_step_is_gradient_ascent(self):
        spec = ModelSpec(beta=2, k=2)
        v, _ = generate_synthetic(spec, 5, 5, seed=0)
        state = initial_state(spec, 5, 5, 0)
        out = ld_iteration(state, v, spec, 1e-3, None, mirroring=False)
        gw, gh = full_gradients(v, state, spec)
        np.testing.assert_allclose(out.w, state.w + 1e-3 * gw)
        np.testing.assert_allclose(out.h, state.h + 1e-3 * gh)

    def test_run(self, poisson_data):
        spec, v, _ = poisson_data
        records, mean = run_ld(v, spec, SamplerConfig(T=30, burn_in=10,
                                                      schedule=StepSchedule(constant_eps=1e-3)))
        assert len(records) == 30 and mean.is_finite()


class TestDsgd:
    def test_difference_is_noise(self, poisson_data):
        spec, v, _ = poisson_data
        state = initial_state(spec, 12, 12, 0)
        part = diagonal_parts(build_grid(12, 12, 3))[1]
        eps, seed, t = 0.01, 4, 3
        noisy = psgld_iteration(state, part, v, spec, eps, seed, t, mirroring=False)
        plain = dsgd_iteration(state, part, v, spec, eps, seed, t, mirroring=False)
        for blk in part.blocks:
            g = rngmod.block_stream(seed, t, blk.row_block, blk.col_block)
            nw = np.sqrt(2 * eps) * g.standard_normal((len(blk.rows), spec.k))
            nh = np.sqrt(2 * eps) * g.standard_normal((spec.k, len(blk.cols)))
            rs, cs = slice(blk.rows.start, blk.rows.stop), slice(blk.cols.start, blk.cols.stop)
            np.testing.assert_allclose(noisy.w[rs] - plain.w[rs], nw, atol=1e-12)
            np.testing.assert_allclose(noisy.h[:, cs] - plain.h[:, cs], nh, atol=1e-12)

    def test_rmse_decreases(self):
        spec = ModelSpec(beta=1, phi=1, k=4)
        v, _ = generate_synthetic(spec, 40, 40, seed=0, density=0.5)
        train, test = holdout_split(v, 0.1, 0)
        trace = []
        run_dsgd(train, spec, build_grid(40, 40, 4),
                 SamplerConfig(T=200, metrics_every=0, schedule=StepSchedule(0.01, 0.51)),
                 callback=lambda rec, st: trace.append(rmse(test, st)))
        assert np.mean(trace[-50:]) < np.mean(trace[:50])


def test_sgld_run_reproducible(poisson_data):
    spec, v, _ = poisson_data
    cfg = SamplerConfig(T=20, burn_in=5, seed=2, schedule=StepSchedule(0.001, 0.51))
    r1, m1 = run_sgld(v, spec, cfg)
    r2, m2 = run_sgld(v, spec, cfg)
    assert m1.identical(m2)
    assert [r.log_post for r in r1] == [r.log_post for r in r2]

import numpy as np
import pytest
from scipy import stats

import misalign.sampler as smp
from conftest import toy_spec, toy_state
from misalign.errors import ChainError, InvalidArgumentError, NumericalError
from misalign.geometry import build_grid_layer
from misalign.model import ChainState, ModelSpec, PriorSpec, log_joint
from misalign.sampler import (
    PosteriorSamples,
    SamplerConfig,
    beta_conditional,
    delta_conditional,
    gelman_rubin,
    hughes_haran_spec,
    initial_state,
    merge_samples,
    mu_conditional,
    phi_conditional,
    run_baseline_hughes_haran,
    run_chain,
    sigma2_conditional,
    sigma2_eta_conditional,
)


def cov_from_chol(L):
    Linv = np.linalg.inv(L)
    return Linv.T @ Linv


def resid_spec(n, y=None, r=1, vals=(2.0,)):
    return ModelSpec(np.ones((n, 1)), y, np.zeros((n, r)), np.eye(r), np.asarray(vals, dtype=float))


class TestMuConditional:
    def test_flat_process_prior(self):
        spec = toy_spec()
        s = toy_state(spec)
        s.sigma2_eta = 1e14
        mean, _ = mu_conditional(s, spec)
        np.testing.assert_allclose(mean, spec.y, atol=1e-10)

    def test_equal_variances(self):
        spec = ModelSpec(np.ones((1, 1)), np.array([2.0]), np.ones((1, 1)), np.eye(1), np.ones(1))
        s = ChainState(np.zeros(1), np.zeros(1), np.zeros(1), 0.8, 0.8, 1.0)
        mean, var = mu_conditional(s, spec)
        assert mean[0] == pytest.approx(1.0)
        assert var == pytest.approx(0.4)

    def test_degenerate_y_equals_m(self):
        spec = toy_spec()
        s = toy_state(spec)
        m = spec.X @ s.beta + spec.Lam @ s.delta
        spec2 = ModelSpec(spec.X, m, spec.Lam, spec.cov_vecs, spec.cov_vals)
        mean, _ = mu_conditional(s, spec2)
        np.testing.assert_array_equal(mean, m)


class TestBetaConditional:
    def test_no_data_effect_returns_prior(self):
        spec = toy_spec(priors=PriorSpec(beta_mean=(0.5, -1.0), beta_var=4.0))
        s = toy_state(spec)
        s.sigma2_eta = 1e14
        mean, L = beta_conditional(s, spec)
        np.testing.assert_allclose(mean, [0.5, -1.0], atol=1e-6)
        np.testing.assert_allclose(cov_from_chol(L), 4.0 * np.eye(2), atol=1e-6)

    def test_flat_prior_intercept_is_average(self):
        spec = toy_spec(n=5, p=1, r=2)
        s = toy_state(spec)
        mean, _ = beta_conditional(s, spec)
        assert mean[0] == pytest.approx(np.mean(s.mu - spec.Lam @ s.delta), abs=1e-8)

    def test_explicit_inverse_oracle(self):
        spec = toy_spec(n=5, p=2, r=2, seed=9, priors=PriorSpec(beta_mean=(0.3, 0.1), beta_var=2.5))
        s = toy_state(spec, seed=3)
        V = np.linalg.inv(spec.X.T @ spec.X / s.sigma2_eta + np.eye(2) / 2.5)
        m = V @ (spec.X.T @ (s.mu - spec.Lam @ s.delta) / s.sigma2_eta + np.array([0.3, 0.1]) / 2.5)
        mean, L = beta_conditional(s, spec)
        np.testing.assert_allclose(mean, m, rtol=1e-12)
        np.testing.assert_allclose(cov_from_chol(L), V, rtol=1e-10)


class TestDeltaConditional:
    def test_zero_basis_gives_prior(self):
        spec = toy_spec(r=2)
        spec = ModelSpec(spec.X, spec.y, np.zeros((spec.n, 2)), spec.cov_vecs, spec.cov_vals)
        s = toy_state(spec)
        mean, L = delta_conditional(s, spec)
        np.testing.assert_allclose(mean, 0.0, atol=1e-14)
        prior = s.phi * spec.cov_vecs @ np.diag(spec.cov_vals) @ spec.cov_vecs.T
        np.testing.assert_allclose(cov_from_chol(L), prior, rtol=1e-10)

    def test_scalar_hand_arithmetic(self):
        Lam = np.array([[1.0], [2.0]])
        spec = ModelSpec(np.ones((2, 1)), np.zeros(2), Lam, np.eye(1), np.array([3.0]))
        s = ChainState(np.array([0.5]), np.zeros(1), np.array([1.5, 2.5]), 1.0, 0.5, 2.0)
        prec = 5.0 / 0.5 + 1.0 / (2.0 * 3.0)
        mean_hand = (1.0 * 1.0 + 2.0 * 2.0) / 0.5 / prec
        mean, L = delta_conditional(s, spec)
        assert mean[0] == pytest.approx(mean_hand, rel=1e-12)
        assert L[0, 0] ** 2 == pytest.approx(prec, rel=1e-12)

    def test_vanishing_prior_precision_is_least_squares(self):
        spec = toy_spec(n=5, r=2, seed=2)
        s = toy_state(spec)
        s.phi = 1e14
        mean, _ = delta_conditional(s, spec)
        ls = np.linalg.lstsq(spec.Lam, s.mu - spec.X @ s.beta, rcond=None)[0]
        np.testing.assert_allclose(mean, ls, rtol=1e-6)

    def test_empty_basis(self):
        spec = ModelSpec(np.ones((3, 1)), np.zeros(3), np.zeros((3, 0)), np.zeros((0, 0)), np.zeros(0))
        s = ChainState(np.zeros(1), np.zeros(0), np.zeros(3), 1.0, 1.0, 1.0)
        assert smp.sample_delta(s, spec, np.random.default_rng(0)).shape == (0,)


class TestVarianceConditionals:
    def test_sigma2_prior_when_no_data(self):
        spec = resid_spec(3)
        s = ChainState(np.zeros(1), np.zeros(1), np.zeros(3), 1.0, 1.0, 1.0)
        a, b = sigma2_conditional(s, spec)
        assert (a, b) == (2.0, 1.0)
        assert b / (a - 1) == 1.0

    def test_sigma2_unit_residuals(self):
        spec = resid_spec(4, y=np.ones(4))
        s = ChainState(np.zeros(1), np.zeros(1), np.zeros(4), 1.0, 1.0, 1.0)
        assert sigma2_conditional(s, spec) == (4.0, 3.0)

    def test_sigma2_zero_residuals(self):
        spec = resid_spec(10, y=np.zeros(10))
        s = ChainState(np.zeros(1), np.zeros(1), np.zeros(10), 1.0, 1.0, 1.0)
        assert sigma2_conditional(s, spec) == (7.0, 1.0)

    def test_sigma2_eta_ignores_data(self):
        s = ChainState(np.zeros(1), np.zeros(1), np.ones(4), 1.0, 1.0, 1.0)
        assert sigma2_eta_conditional(s, resid_spec(4)) == sigma2_eta_conditional(s, resid_spec(4, y=np.zeros(4)))

    def test_sigma2_eta_unit_residuals(self):
        spec = resid_spec(4)
        s = ChainState(np.zeros(1), np.zeros(1), np.ones(4), 1.0, 1.0, 1.0)
        assert sigma2_eta_conditional(s, spec) == (4.0, 3.0)

    def test_sigma2_eta_zero_residuals(self):
        spec = resid_spec(10)
        s = ChainState(np.array([1.0]), np.zeros(1), np.ones(10), 1.0, 1.0, 1.0)
        assert sigma2_eta_conditional(s, spec) == (7.0, 1.0)

    def test_phi_zero_delta(self):
        spec = resid_spec(3, r=2, vals=(1.0, 2.0))
        s = ChainState(np.zeros(1), np.zeros(2), np.zeros(3), 1.0, 1.0, 1.0)
        assert phi_conditional(s, spec) == (3.0, 1.0)

    def test_phi_scalar_quadratic_form(self):
        spec = resid_spec(3, r=1, vals=(2.0,))
        s = ChainState(np.zeros(1), np.array([2.0]), np.zeros(3), 1.0, 1.0, 1.0)
        assert phi_conditional(s, spec) == (2.5, 2.0)

    def test_ig_draws_are_positive(self):
        spec = toy_spec()
        rng = np.random.default_rng(0)
        draws = [smp.sample_phi(toy_state(spec), spec, rng) for _ in range(200)]
        assert min(draws) > 0


class TestConfig:
    @pytest.mark.parametrize(
        "kw",
        [
            {"iterations": 0},
            {"burnin": 100, "iterations": 100},
            {"burnin": -1},
            {"thin": 0},
            {"chains": 0},
            {"seed": -1},
            {"seed": 2**64},
            {"init": "random"},
            {"iterations": 15, "burnin": 10},
        ],
    )
    def test_invalid(self, kw):
        with pytest.raises(InvalidArgumentError):
            SamplerConfig(**kw)

    def test_retained(self):
        assert SamplerConfig(5000, 1000, 3).retained == 1333


class TestRunChain:
    cfg = SamplerConfig(iterations=300, burnin=100, thin=2, seed=42, chains=2)

    def test_shapes(self):
        spec = toy_spec(n=5, p=2, r=2)
        s = run_chain(spec, self.cfg)
        assert s.beta.shape == (2, 100, 2)
        assert s.mu.shape == (2, 100, 5)
        assert s.sigma2.shape == (2, 100)
        assert s.acceptance == 1.0

    def test_bit_identical_rerun(self):
        spec = toy_spec()
        a, b = run_chain(spec, self.cfg), run_chain(spec, self.cfg)
        for block in PosteriorSamples.BLOCKS:
            np.testing.assert_array_equal(getattr(a, block), getattr(b, block))

    def test_worker_count_does_not_change_draws(self):
        spec = toy_spec()
        a, b = run_chain(spec, self.cfg, workers=1), run_chain(spec, self.cfg, workers=2)
        np.testing.assert_array_equal(a.mu, b.mu)

    def test_seed_and_chain_streams_differ(self):
        spec = toy_spec()
        a = run_chain(spec, self.cfg)
        b = run_chain(spec, SamplerConfig(300, 100, 2, seed=43, chains=2))
        assert not np.array_equal(a.sigma2, b.sigma2)
        assert not np.array_equal(a.sigma2[0], a.sigma2[1])

    def test_thinning_keeps_expected_iterations(self):
        spec = toy_spec()
        cfg = SamplerConfig(30, 10, 2, seed=1)
        kept = run_chain(spec, cfg).sigma2[0]
        rng = smp.stream(1, smp.STREAM_CHAIN, 0)
        state = initial_state(spec, cfg.init, rng)
        manual = []
        for t in range(30):
            state = smp.gibbs_sweep(state, spec, rng)
            if t >= 10 and (t - 10 + 1) % 2 == 0:
                manual.append(state.sigma2)
        np.testing.assert_array_equal(kept, manual)

    def test_initial_state_least_squares(self):
        spec = toy_spec(n=5)
        s = initial_state(spec, "least-squares", np.random.default_rng(0))
        np.testing.assert_allclose(s.beta, np.linalg.lstsq(spec.X, spec.y, rcond=None)[0])
        np.testing.assert_array_equal(s.mu, spec.y)
        np.testing.assert_array_equal(s.delta, 0.0)
        assert (s.sigma2, s.sigma2_eta, s.phi) == (1.0, 1.0, 1.0)

    def test_prior_draw_init_runs(self):
        spec = toy_spec()
        s = run_chain(spec, SamplerConfig(60, 20, 1, seed=3, init="prior-draw"))
        assert np.all(s.sigma2 > 0)

    def test_failure_reports_iteration_and_state(self, monkeypatch):
        spec = toy_spec()
        calls = {"n": 0}
        real = smp.sample_phi

        def flaky(state, spec, rng):
            calls["n"] += 1
            if calls["n"] == 7:
                raise NumericalError("synthetic")
            return real(state, spec, rng)

        monkeypatch.setattr(smp, "sample_phi", flaky)
        with pytest.raises(ChainError) as info:
            run_chain(spec, SamplerConfig(50, 10, 1, seed=0))
        assert info.value.iteration == 6
        info.value.last_state.validate()

    def test_prior_recovery(self):
        # no data: sigma2 is drawn from its prior every sweep
        spec = toy_spec(y=False)
        s = run_chain(spec, SamplerConfig(20000, 100, 1, seed=5)).pooled("sigma2")
        prec = 1.0 / s  # Gamma(2, 1): mean 2, variance 2
        se = np.sqrt(2.0 / prec.size)
        assert abs(prec.mean() - 2.0) < 4 * se
        assert abs(prec.var() - 2.0) < 0.1

    def test_no_trend_in_log_joint(self):
        spec = toy_spec(n=5, seed=8)
        s = run_chain(spec, SamplerConfig(3000, 1000, 5, seed=2))
        lj = [log_joint(s.state(0, i), spec) for i in range(s.n_draws)]
        tau, p = stats.kendalltau(np.arange(len(lj)), lj)
        assert p > 0.01


class TestSummaries:
    @pytest.fixture(scope="class")
    @staticmethod
    def samples():
        return run_chain(toy_spec(n=5), SamplerConfig(400, 100, 1, seed=9, chains=3))

    def test_column_names(self, samples):
        frame = samples.draws_frame()
        assert list(frame.columns) == ["chain", "draw", "beta[0]", "beta[1]", "delta[0]", "delta[1]", "sigma2", "sigma2_eta", "phi"]
        assert len(frame) == 900

    def test_quantiles_monotone_and_rhat(self, samples):
        summ = samples.summary()
        assert (summ["q2.5"] <= summ["q50"]).all() and (summ["q50"] <= summ["q97.5"]).all()
        assert "rhat" in summ.columns
        assert summ["rhat"].between(0.9, 1.2).all()

    def test_merge(self, samples):
        merged = merge_samples([samples, samples])
        assert merged.n_chains == 6
        np.testing.assert_array_equal(merged.pooled("phi")[: samples.n_draws * 3], samples.pooled("phi"))

    def test_gelman_rubin_identical_chains(self):
        a = np.tile(np.random.default_rng(0).standard_normal(50), (3, 1))
        assert gelman_rubin(a) == pytest.approx(np.sqrt(49 / 50))


class TestBaseline:
    @pytest.fixture(scope="class")
    @staticmethod
    def grid():
        layer = build_grid_layer(5, 4, (0, 0, 5, 4))
        rng = np.random.default_rng(0)
        X = np.column_stack([np.ones(20), rng.standard_normal(20)])
        return layer, X, X @ [1.0, 2.0] + 0.1 * rng.standard_normal(20)

    def test_q_zero_is_linear_model(self, grid):
        layer, X, y = grid
        s = run_baseline_hughes_haran(layer, X, y, SamplerConfig(2000, 500, 1, seed=1), q=0)
        assert s.delta.shape[2] == 0
        ols = np.linalg.lstsq(X, y, rcond=None)[0]
        np.testing.assert_allclose(s.pooled("beta").mean(axis=0), ols, atol=0.1)

    def test_two_unit_hand_conjugacy(self):
        layer = build_grid_layer(2, 1, (0, 0, 2, 1))
        X = np.array([[1.0], [2.0]])
        spec = hughes_haran_spec(layer, X, np.array([0.3, -0.2]), q=1)
        # the leading eigenvector spans X itself (eigenvalue 0): v = (1, 2)/sqrt(5)
        v = np.array([1.0, 2.0]) / np.sqrt(5)
        np.testing.assert_allclose(spec.Lam[:, 0], v, atol=1e-15)
        assert spec.cov_vals[0] == pytest.approx(5.0)  # (v'Qv)^-1 = (1/5)^-1
        s = ChainState(np.zeros(1), np.zeros(1), np.array([1.0, 1.0]), 1.0, 0.5, 2.0)
        mean, L = delta_conditional(s, spec)
        prec = 1.0 / 0.5 + (1.0 / 5.0) / 2.0
        assert L[0, 0] ** 2 == pytest.approx(prec)
        assert mean[0] == pytest.approx((v @ np.ones(2)) / 0.5 / prec)

    def test_constant_leading_vector_is_improper(self):
        # with an intercept the leading vector of a 2-unit chain is constant and Q kills it
        layer = build_grid_layer(2, 1, (0, 0, 2, 1))
        with pytest.raises(NumericalError):
            hughes_haran_spec(layer, np.ones((2, 1)), np.zeros(2), q=1)

    def test_q_out_of_range(self, grid):
        layer, X, y = grid
        with pytest.raises(InvalidArgumentError):
            hughes_haran_spec(layer, X, y, q=21)

    def test_uses_leading_eigenvectors(self, grid):
        layer, X, y = grid
        spec = hughes_haran_spec(layer, X, y, q=4)
        M = smp.moran_eigenvectors(layer, X)
        np.testing.assert_array_equal(spec.Lam, M[:, :4])
        assert spec.name == "moran-baseline"

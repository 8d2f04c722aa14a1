import math

import numpy as np
import pytest
from scipy import stats

from tenduq.calibrate import (
    LikelihoodSpec,
    PosteriorEnsemble,
    SamplerStuckError,
    cluster_and_prune,
    load_posterior_csv,
    log_likelihood_embedded,
    log_likelihood_plain,
    posterior_summary,
    predictive_check,
    run_ensemble_mcmc,
    run_two_phase,
)
from tenduq.core import ObservationSet, ParameterEntry, ParameterSpace, PriorSpec, lognormal_location_scale

from conftest import THETA_TRUE, make_prior_space, normalized_observations

_LOG_2PI = math.log(2.0 * math.pi)


def box_space(dim, lo=-10.0, hi=10.0):
    return ParameterSpace(
        entries=tuple(
            ParameterEntry(f"x{i}", lo, hi, PriorSpec("uniform", (lo, hi)))
            for i in range(dim)
        )
    )


def simple_obs(values, noise_std=0.5):
    values = np.asarray(values, dtype=float)
    pts = np.column_stack([np.arange(len(values), dtype=float), np.zeros(len(values))])
    return ObservationSet(points=pts, values=values, noise_std=noise_std)


class TestPlainLikelihood:
    def test_zero_residuals(self):
        obs = simple_obs(np.full(7, 2.5), noise_std=0.3)
        ll = log_likelihood_plain(np.array([0.0]), obs, lambda t: np.full(7, 2.5))
        assert ll == pytest.approx(-3.5 * math.log(2.0 * math.pi * 0.3**2))

    def test_one_sigma_residual_costs_half(self):
        obs = simple_obs([1.0], noise_std=0.3)
        base = log_likelihood_plain(np.array([0.0]), obs, lambda t: np.array([1.0]))
        off = log_likelihood_plain(np.array([0.0]), obs, lambda t: np.array([1.3]))
        assert base - off == pytest.approx(0.5)

    def test_maximized_at_truth_on_noise_free_data(self, surrogate_problem):
        # grid-search oracle: no random theta may beat theta_true
        ens = surrogate_problem["ensemble"]
        points, groups = surrogate_problem["points"], surrogate_problem["groups"]
        clean = np.asarray(
            ens.normalizer.denormalize_outputs(
                ens.predict_mean_normalized(THETA_TRUE[None, :])[0]
            )
        )
        obs = normalized_observations(ens, points, groups, clean, noise_std=0.01)
        emulator = lambda t: ens.predict_mean_normalized(np.atleast_2d(t))[0]
        ll_true = log_likelihood_plain(THETA_TRUE, obs, emulator)
        rng = np.random.default_rng(0)
        space = make_prior_space()
        grid = rng.uniform(space.lower, space.upper, size=(100, 4))
        for theta in grid:
            assert log_likelihood_plain(theta, obs, emulator) <= ll_true + 1e-9

    def test_rejects_zero_noise(self):
        obs = ObservationSet(points=np.zeros((1, 2)), values=np.zeros(1), noise_std=0.0)
        with pytest.raises(ValueError):
            log_likelihood_plain(np.zeros(1), obs, lambda t: np.zeros(1))


class TestEmbeddedLikelihood:
    def test_degenerate_spread_matches_plain(self):
        obs = simple_obs([3.0, 1.0, 2.0], noise_std=0.2)
        emulator = lambda t: np.array([t[0], 0.5 * t[0], t[0] ** 0.5])
        theta = np.array([2.0])
        plain = log_likelihood_plain(theta, obs, emulator)
        embedded = log_likelihood_embedded(
            np.array([2.0, 1e-7]), obs, emulator, pce_config=(2, 4), embedded_index=0
        )
        assert embedded == pytest.approx(plain, abs=1e-4)

    def test_constant_emulator_perfect_fit(self):
        obs = simple_obs([5.0, 5.0], noise_std=0.4)
        emulator = lambda t: np.array([5.0, 5.0])
        ll = log_likelihood_embedded(np.array([2.0, 0.3]), obs, emulator)
        assert ll == pytest.approx(-math.log(2.0 * math.pi * 0.4**2))

    def test_linear_emulator_variance_is_lognormal_variance(self):
        # analytic oracle: Var[b * theta~] = b^2 (exp(scale^2) - 1) m^2
        b = 1.7
        m, s = 1.0, 0.1
        obs = simple_obs([b * m], noise_std=0.05)
        emulator = lambda t: np.array([b * t[0]])
        spec = LikelihoodSpec("embedded", 0.05, lambda ts: b * ts[:, [0]],
                              pce_degree=2, pce_quad=6)
        _, var = spec.predict_moments(np.array([m, s]))
        loc, scale = lognormal_location_scale(m, s)
        exact = b**2 * (math.exp(scale**2) - 1.0) * math.exp(2 * loc + scale**2)
        assert var[0] == pytest.approx(exact, rel=5e-3)

    def test_scalar_op_agrees_with_batched_spec(self):
        obs = simple_obs([1.0, 2.0], noise_std=0.3)
        emulator = lambda t: np.array([t[0], t[0] ** 2])
        batch_emulator = lambda ts: np.column_stack([ts[:, 0], ts[:, 0] ** 2])
        spec = LikelihoodSpec("embedded", 0.3, batch_emulator, pce_degree=2, pce_quad=4)
        theta_ext = np.array([1.5, 0.2])
        scalar = log_likelihood_embedded(theta_ext, obs, emulator)
        batched = spec.loglike_batch(obs)(theta_ext[None, :])[0]
        assert scalar == pytest.approx(batched, rel=1e-12)


class TestEnsembleSampler:
    def test_standard_normal_target_moments(self):
        space = box_space(2)
        loglike = lambda ts: -0.5 * np.sum(ts**2, axis=1)
        ens = run_ensemble_mcmc(space, loglike, walkers=20, steps=3000,
                                rng=np.random.default_rng(1))
        samples = ens.flat_samples(burn_in=300)
        assert np.all(np.abs(samples.mean(axis=0)) < 0.1)
        cov = np.cov(samples.T)
        assert abs(cov[0, 0] - 1.0) < 0.15 and abs(cov[1, 1] - 1.0) < 0.15

    def test_uniform_box_histogram(self):
        space = box_space(2, 0.0, 1.0)
        loglike = lambda ts: np.zeros(len(ts))
        ens = run_ensemble_mcmc(space, loglike, walkers=16, steps=4000,
                                rng=np.random.default_rng(2))
        samples = ens.flat_samples(burn_in=200)
        for j in range(2):
            counts, _ = np.histogram(samples[:, j], bins=10, range=(0.0, 1.0))
            # thin to roughly independent draws for the chi-square check
            thin = samples[::40, j]
            counts, _ = np.histogram(thin, bins=10, range=(0.0, 1.0))
            assert stats.chisquare(counts).pvalue > 0.01

    def test_flat_likelihood_recovers_prior(self):
        space = ParameterSpace(entries=(
            ParameterEntry("a", -40.0, 40.0, PriorSpec("normal", (1.0, 2.0))),
            ParameterEntry("b", 0.0, 1.0, PriorSpec("uniform", (0.0, 1.0))),
        ))
        loglike = lambda ts: np.zeros(len(ts))
        ens = run_ensemble_mcmc(space, loglike, walkers=20, steps=6000,
                                rng=np.random.default_rng(3))
        samples = ens.flat_samples(burn_in=500)
        assert samples[:, 0].mean() == pytest.approx(1.0, abs=0.05 * 2.0 + 0.05)
        assert samples[:, 0].std() == pytest.approx(2.0, rel=0.05)
        assert samples[:, 1].mean() == pytest.approx(0.5, rel=0.05)

    def test_walker_count_constraints(self):
        space = box_space(3)
        loglike = lambda ts: np.zeros(len(ts))
        with pytest.raises(ValueError):
            run_ensemble_mcmc(space, loglike, walkers=4, steps=10, rng=np.random.default_rng(0))
        with pytest.raises(ValueError):
            run_ensemble_mcmc(space, loglike, walkers=7, steps=10, rng=np.random.default_rng(0))

    def test_stuck_ensemble_raises_diagnostic(self):
        space = box_space(2)
        init = np.column_stack([np.arange(8, dtype=float), np.zeros(8)])
        # finite only on the initial lattice: stretch proposals between
        # distinct points never land back on it, so nothing is accepted
        loglike = lambda ts: np.where(
            (ts[:, 1] == 0.0) & (ts[:, 0] == np.round(ts[:, 0])), 0.0, -np.inf
        )
        with pytest.raises(SamplerStuckError):
            run_ensemble_mcmc(space, loglike, walkers=8, steps=600,
                              rng=np.random.default_rng(4), init=init, stuck_limit=500)

    def test_chains_within_bounds(self):
        space = box_space(2, -1.0, 2.0)
        loglike = lambda ts: -0.5 * np.sum(ts**2, axis=1)
        ens = run_ensemble_mcmc(space, loglike, walkers=10, steps=500,
                                rng=np.random.default_rng(5))
        assert ens.chains.min() >= -1.0 and ens.chains.max() <= 2.0
        assert np.all(np.isfinite(ens.flat_logp()))

    def test_moment_error_shrinks_with_chain_length(self):
        # 10x more steps should halve the mean-error bound (bootstrap 95%)
        space = box_space(2)
        loglike = lambda ts: -0.5 * np.sum(ts**2, axis=1)

        def mean_errors(steps, n_rep):
            errs = []
            for rep in range(n_rep):
                ens = run_ensemble_mcmc(space, loglike, walkers=20, steps=steps,
                                        rng=np.random.default_rng(100 + rep))
                samples = ens.flat_samples(burn_in=steps // 5)
                errs.append(float(np.linalg.norm(samples.mean(axis=0))))
            return np.array(errs)

        short = mean_errors(1000, 8)
        long = mean_errors(10_000, 8)
        rng = np.random.default_rng(6)
        boot_long = np.array([
            rng.choice(long, size=long.size, replace=True).mean() for _ in range(2000)
        ])
        upper_long = np.quantile(boot_long, 0.95)
        assert upper_long <= 0.5 * short.mean()


class TestClusterAndPrune:
    def make_ensemble(self, ell_values, steps=10, dim=2, rng=None):
        walkers = len(ell_values)
        rng = rng or np.random.default_rng(0)
        chains = rng.normal(size=(walkers, steps, dim))
        logp = np.tile(np.asarray(ell_values, dtype=float)[:, None], (1, steps))
        return PosteriorEnsemble(chains=chains, logp=logp, retained=np.arange(walkers))

    def test_jump_detection_hand_trace(self):
        # sorted ell [-100, -99, -1.0, -0.9, -0.8]; diffs [1, 98, .1, .1];
        # median 0.55 -> threshold 2.75 -> single jump at 98 -> keep top 3
        ens = self.make_ensemble([-100.0, -99.0, -1.0, -0.9, -0.8])
        pruned = cluster_and_prune(ens, alpha=0.5, gamma=5.0)
        assert sorted(pruned.retained.tolist()) == [2, 3, 4]
        assert pruned.config["prune_threshold"] == pytest.approx(-1.0)

    def test_identical_walkers_all_retained(self):
        ens = self.make_ensemble([-3.0] * 6)
        pruned = cluster_and_prune(ens, alpha=0.5, gamma=5.0)
        assert pruned.retained.size == 6

    def test_threshold_consistency(self):
        rng = np.random.default_rng(7)
        ell = np.concatenate([rng.normal(-50, 0.5, 4), rng.normal(-1, 0.5, 12)])
        ens = self.make_ensemble(ell.tolist(), rng=rng)
        pruned = cluster_and_prune(ens, alpha=0.5, gamma=5.0)
        thr = pruned.config["prune_threshold"]
        window = ens.logp[:, -5:].mean(axis=1)
        assert np.all(window[pruned.retained] >= thr)
        dropped = np.setdiff1d(np.arange(16), pruned.retained)
        assert np.all(window[dropped] < thr)

    def test_resampled_states_in_retained_hull(self):
        rng = np.random.default_rng(8)
        ens = self.make_ensemble([-100.0, -99.0, -1.0, -0.9, -0.8], rng=rng)
        pruned = cluster_and_prune(ens, alpha=0.5, gamma=5.0,
                                   rng=np.random.default_rng(9), resample=True)
        last = ens.chains[:, -1, :]
        kept = last[[2, 3, 4]]
        for i in (0, 1):
            new = pruned.restart_states[i]
            assert np.all(new >= kept.min(axis=0) - 1e-12)
            assert np.all(new <= kept.max(axis=0) + 1e-12)
        for i in (2, 3, 4):
            np.testing.assert_array_equal(pruned.restart_states[i], last[i])

    def test_tie_goes_to_higher_cluster(self):
        ens = self.make_ensemble([-100.0, -99.5, -1.0, -0.5])
        pruned = cluster_and_prune(ens, alpha=0.5, gamma=1.5)
        assert sorted(pruned.retained.tolist()) == [2, 3]

    def test_window_must_be_positive(self):
        ens = self.make_ensemble([-1.0, -2.0], steps=3)
        with pytest.raises(ValueError):
            cluster_and_prune(ens, alpha=0.01, gamma=5.0)


class TestSummaries:
    def test_repeated_sample_collapses(self):
        chains = np.ones((4, 50, 2)) * 3.0
        logp = np.zeros((4, 50))
        ens = PosteriorEnsemble(chains=chains, logp=logp, retained=np.arange(4))
        table = posterior_summary(ens, names=["a", "b"])
        np.testing.assert_allclose(table.std, 0.0)
        np.testing.assert_allclose(table.ci_lo, 3.0)
        np.testing.assert_allclose(table.ci_hi, 3.0)

    def test_standard_normal_quantiles(self):
        rng = np.random.default_rng(10)
        chains = rng.normal(size=(8, 5000, 1))
        ens = PosteriorEnsemble(chains=chains, logp=np.zeros((8, 5000)),
                                retained=np.arange(8))
        table = posterior_summary(ens)
        assert table.ci_lo[0] == pytest.approx(-1.96, abs=0.05)
        assert table.ci_hi[0] == pytest.approx(1.96, abs=0.05)

    def test_schema_keys(self):
        ens = PosteriorEnsemble(chains=np.zeros((2, 5, 1)), logp=np.zeros((2, 5)),
                                retained=np.arange(2))
        doc = posterior_summary(ens, names=["E_cm"]).to_dict()
        assert doc["parameters"][0].keys() == {"name", "mean", "std", "ci95"}

    def test_burn_in_bound(self):
        ens = PosteriorEnsemble(chains=np.zeros((2, 5, 1)), logp=np.zeros((2, 5)),
                                retained=np.arange(2))
        with pytest.raises(ValueError):
            posterior_summary(ens, burn_in=5)


class TestPredictiveCheck:
    def make_ensemble_at(self, theta):
        theta = np.asarray(theta, dtype=float)
        chains = np.tile(theta, (4, 10, 1))
        return PosteriorEnsemble(chains=chains, logp=np.zeros((4, 10)),
                                 retained=np.arange(4))

    def test_perfect_plain_predictions(self):
        obs = simple_obs([1.0, 2.0, 3.0], noise_std=0.1)
        spec = LikelihoodSpec("plain", 0.1, lambda ts: np.tile([1.0, 2.0, 3.0], (len(ts), 1)))
        report = predictive_check(self.make_ensemble_at([0.0]), obs, spec)
        assert report.coverage_95_pct == 100.0
        np.testing.assert_allclose(report.z_values, 0.0)

    def test_z_definition_hand_values(self):
        obs = simple_obs([1.0, 0.0, -2.0], noise_std=0.5)
        spec = LikelihoodSpec("plain", 0.5, lambda ts: np.zeros((len(ts), 3)))
        report = predictive_check(self.make_ensemble_at([0.0]), obs, spec)
        np.testing.assert_allclose(report.z_values, [2.0, 0.0, -4.0])
        assert report.to_dict()["abs_z"]["pct_gt_2"] == pytest.approx(100.0 / 3.0)

    def test_embedded_z_uses_total_variance(self):
        obs = simple_obs([1.0], noise_std=0.3)
        b, m, s = 1.0, 1.0, 0.5
        spec = LikelihoodSpec("embedded", 0.3, lambda ts: b * ts[:, [0]],
                              pce_degree=2, pce_quad=6)
        report = predictive_check(self.make_ensemble_at([m, s]), obs, spec)
        mean, var = spec.predict_moments(np.array([m, s]))
        expected = (1.0 - mean[0]) / math.sqrt(var[0] + 0.09)
        assert report.z_values[0] == pytest.approx(expected, rel=1e-12)


class TestTwoPhaseProtocol:
    def test_phases_and_retention(self):
        space = box_space(2)
        loglike = lambda ts: -0.5 * np.sum(ts**2, axis=1)
        burn, final = run_two_phase(space, loglike, walkers=12, steps=400,
                                    rng=np.random.default_rng(11))
        assert burn.restart_states is not None and burn.restart_states.shape == (12, 2)
        assert final.restart_states is None
        assert final.n_steps == 400
        assert final.retained.size >= 1
        samples = final.flat_samples()
        assert abs(samples.mean()) < 0.3

    def test_posterior_csv_round_trip(self, tmp_path):
        space = box_space(2)
        loglike = lambda ts: -0.5 * np.sum(ts**2, axis=1)
        ens = run_ensemble_mcmc(space, loglike, walkers=8, steps=50,
                                rng=np.random.default_rng(12))
        path = tmp_path / "post.csv"
        ens.to_csv(path, names=["a", "b"])
        samples, logp, names = load_posterior_csv(path)
        assert names == ["a", "b"]
        assert samples.shape == (8 * 50, 2)
        np.testing.assert_array_equal(samples, ens.flat_samples())
        np.testing.assert_array_equal(logp, ens.flat_logp())

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from recursion import recursion_moments
from svctbench import guidance as gd
from svctbench.errors import BatchFailureError, InvalidArgumentError, NumericalFailureError
from svctbench.gmm import GmmPrior
from svctbench.guidance import (
    GuidanceConfig,
    NoiseSchedule,
    ancestral_sample,
    batch_sample,
    exact_likelihood_score,
    likelihood_score_dps,
    likelihood_score_mcg,
    likelihood_score_pig,
    log_likelihood_t,
    make_schedule,
    pig_rt2,
)
from svctbench.oracle import exact_posterior
from svctbench.tomo import DenseOperator, ImageGrid, NoiseModel, make_geometry


def small_problem(rng, side=8, p=3, k=1, c=0.02, sigma_y=0.05):
    grid = ImageGrid(side)
    geom = make_geometry(grid, p)
    if k == 1:
        prior = GmmPrior.isotropic([1.0], rng.random((1, grid.n)), c)
    else:
        prior = GmmPrior.isotropic(np.full(k, 1 / k), rng.random((k, grid.n)), c * (1 + np.arange(k)))
    x = prior.sample(1, rng)[0]
    y = geom.forward(x) + sigma_y * rng.standard_normal(geom.m)
    return prior, geom, NoiseModel(sigma_y), y


class TestSchedule:
    def test_two_levels(self):
        np.testing.assert_array_equal(make_schedule(0.01, 1348, 2).sigmas, [1348, 0.01])

    def test_geometric_midpoint(self):
        assert make_schedule(0.01, 1348, 3).sigmas[1] == pytest.approx(math.sqrt(13.48), rel=1e-14)

    @pytest.mark.parametrize("args", [(1, 1, 10), (2, 1, 10), (0, 1, 10), (0.1, 1, 1)])
    def test_invalid(self, args):
        with pytest.raises(InvalidArgumentError):
            make_schedule(*args)

    @given(lo=st.floats(1e-3, 1), ratio=st.floats(1.5, 1e5), k=st.integers(2, 300))
    def test_monotone_geometric(self, lo, ratio, k):
        s = NoiseSchedule(lo, lo * ratio, k).sigmas
        assert s[0] == lo * ratio and s[-1] == lo
        assert np.all(np.diff(s) < 0)
        np.testing.assert_allclose(s[1:] / s[:-1], ratio ** (-1 / (k - 1)), rtol=1e-9)


class TestConfig:
    def test_unknown_method(self):
        with pytest.raises(InvalidArgumentError):
            GuidanceConfig("tweedie")

    @pytest.mark.parametrize("alpha", [-1.0, float("inf"), float("nan")])
    def test_alpha(self, alpha):
        with pytest.raises(InvalidArgumentError):
            GuidanceConfig("dps", alpha_scale=alpha)

    def test_rt2(self):
        assert pig_rt2(1.0) == 0.5
        assert pig_rt2(0.0) == 0.0


@pytest.mark.parametrize("fn", [likelihood_score_mcg, likelihood_score_dps, likelihood_score_pig])
def test_zero_residual_gives_zero(fn, rng):
    prior, geom, noise, _ = small_problem(rng)
    x_t = prior.sample(1, rng)[0] + 0.3 * rng.standard_normal(prior.n)
    y = geom.forward(prior.tweedie_denoise(x_t, 0.3))
    out = fn(x_t, 0.3, y, geom, noise, prior)
    assert np.all(np.isfinite(out))
    assert np.linalg.norm(out) <= 1e-8


class TestMcg:
    def test_clean_endpoint(self, rng):
        prior, geom, noise, y = small_problem(rng)
        x = rng.random(prior.n)
        r = y - geom.forward(x)
        back = geom.fbp(r)
        want = 0.1 * back / np.linalg.norm(back)
        np.testing.assert_allclose(likelihood_score_mcg(x, 0.0, y, geom, noise, prior), want, rtol=1e-12)

    @pytest.mark.parametrize("p", [30, 90])
    def test_fbp_direction_follows_pseudo_inverse(self, p, rng):
        prior, geom, noise, _ = small_problem(rng, p=p, c=0.01, sigma_y=0.01)
        cos = []
        for _ in range(50):
            x_t = prior.sample(1, rng)[0] + 0.1 * rng.standard_normal(prior.n)
            y = geom.forward(prior.sample(1, rng)[0]) + 0.01 * rng.standard_normal(geom.m)
            a = likelihood_score_mcg(x_t, 0.1, y, geom, noise, prior)
            b = likelihood_score_mcg(x_t, 0.1, y, geom, noise, prior, GuidanceConfig("mcg", mcg_pseudo_inverse="dense"))
            cos.append(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))
        assert np.mean(cos) >= 0.9
        assert np.min(cos) >= 0.75

    def test_alpha_scale_is_linear(self, rng):
        prior, geom, noise, y = small_problem(rng)
        x = rng.random(prior.n)
        one = likelihood_score_mcg(x, 0.2, y, geom, noise, prior)
        three = likelihood_score_mcg(x, 0.2, y, geom, noise, prior, GuidanceConfig("mcg", alpha_scale=3.0))
        np.testing.assert_allclose(three, 3 * one, rtol=1e-13)


class TestDps:
    @pytest.mark.parametrize("sigma", [0.0, 0.1, 2.0])
    def test_scalar_identity_operator(self, sigma):
        c, mu, y, x = 0.3, 0.4, 1.1, -0.2
        prior = GmmPrior.isotropic([1.0], [[mu]], c)
        op = DenseOperator(np.eye(1))
        x0 = (c * x + sigma**2 * mu) / (c + sigma**2)
        r = y - x0
        want = (1 / abs(r)) * (c / (c + sigma**2)) * r
        got = likelihood_score_dps(np.array([x]), sigma, np.array([y]), op, 0.1, prior)
        assert got[0] == pytest.approx(want, rel=1e-14)

    @pytest.mark.parametrize("k", [1, 3])
    @pytest.mark.parametrize("sigma", [0.05, 0.5, 5.0])
    def test_negative_gradient_of_residual_norm(self, k, sigma, rng):
        prior, geom, noise, y = small_problem(rng, k=k)
        x = prior.sample(1, rng)[0] + sigma * rng.standard_normal(prior.n)

        def resid(z):
            return np.linalg.norm(y - geom.forward(prior.tweedie_denoise(z, sigma)))

        h = 1e-5 * max(1.0, sigma)
        fd = np.array([(resid(x + h * e) - resid(x - h * e)) / (2 * h) for e in np.eye(prior.n)])
        got = likelihood_score_dps(x, sigma, y, geom, noise, prior)
        assert np.linalg.norm(got + fd) <= 1e-4 * np.linalg.norm(got)

    def test_batch_rows_are_independent(self, rng):
        prior, geom, noise, y = small_problem(rng, k=2)
        xs = prior.sample(3, rng)
        ys = np.stack([y, 2 * y, y + 1])
        batch = likelihood_score_dps(xs, 0.4, ys, geom, noise, prior)
        for i in range(3):
            np.testing.assert_allclose(batch[i], likelihood_score_dps(xs[i], 0.4, ys[i], geom, noise, prior),
                                       rtol=1e-12, atol=1e-15)


class TestPig:
    def test_null_operator(self):
        prior = GmmPrior.isotropic([1.0], np.zeros((1, 4)), 1.0)
        op = DenseOperator(np.zeros((3, 4)))
        out = likelihood_score_pig(np.ones(4), 0.5, np.ones(3), op, 0.1, prior)
        np.testing.assert_array_equal(out, 0.0)

    def test_null_operator_solve(self):
        op = DenseOperator(np.zeros((3, 4)))
        np.testing.assert_allclose(op.solve_shifted_gram(np.array([1.0, 2.0, 3.0]), 0.7, 0.01), [100, 200, 300])

    @pytest.mark.parametrize("sigma", [0.01, 0.3, 4.0])
    def test_true_variance_recovers_exact_score_n2(self, sigma, rng):
        c = 0.2
        prior = GmmPrior.isotropic([1.0], rng.standard_normal((1, 2)), c)
        op = DenseOperator(rng.standard_normal((1, 2)))
        x, y = rng.standard_normal(2), rng.standard_normal(1)
        got = likelihood_score_pig(x, sigma, y, op, 0.1, prior, rt2=c * sigma**2 / (c + sigma**2))
        want = exact_likelihood_score(x, sigma, y, op, 0.1, prior)
        np.testing.assert_allclose(got, want, rtol=1e-8, atol=1e-12)

    def test_default_rt2_differs_from_true_variance(self, rng):
        prior = GmmPrior.isotropic([1.0], rng.standard_normal((1, 2)), 0.2)
        op = DenseOperator(rng.standard_normal((1, 2)))
        x, y = rng.standard_normal(2), rng.standard_normal(1)
        a = likelihood_score_pig(x, 1.0, y, op, 0.1, prior)
        b = exact_likelihood_score(x, 1.0, y, op, 0.1, prior)
        assert np.linalg.norm(a - b) > 1e-3 * np.linalg.norm(b)


class TestExact:
    @pytest.mark.parametrize("sigma", [0.0, 0.2, 3.0])
    def test_scalar_closed_form(self, sigma):
        c, mu, sy, y, x = 0.5, 0.3, 0.2, 0.9, -0.4
        prior = GmmPrior.isotropic([1.0], [[mu]], c)
        op = DenseOperator(np.eye(1))
        s2 = sigma**2
        m = (c * x + s2 * mu) / (c + s2)
        v = c * s2 / (c + s2) + sy**2
        want = (y - m) / v * c / (c + s2)
        assert exact_likelihood_score(np.array([x]), sigma, np.array([y]), op, sy, prior)[0] == pytest.approx(
            want, rel=1e-13
        )
        logl = log_likelihood_t(np.array([x]), sigma, np.array([y]), op, sy, prior)
        assert logl == pytest.approx(-0.5 * (math.log(2 * math.pi * v) + (y - m) ** 2 / v), rel=1e-13)

    @pytest.mark.parametrize("form", ["isotropic", "diagonal", "full"])
    @pytest.mark.parametrize("sigma", [0.05, 0.7])
    def test_finite_differences(self, form, sigma, rng):
        n = 9
        k = 2
        w = np.array([0.4, 0.6])
        mu = rng.random((k, n))
        if form == "isotropic":
            prior = GmmPrior.isotropic(w, mu, [0.02, 0.05])
        elif form == "diagonal":
            prior = GmmPrior.diagonal(w, mu, rng.uniform(0.01, 0.05, (k, n)))
        else:
            a = rng.normal(0, 0.1, (k, n, n))
            prior = GmmPrior.full(w, mu, a @ a.transpose(0, 2, 1) + 0.01 * np.eye(n))
        geom = make_geometry(ImageGrid(3), 2)
        y = geom.forward(prior.sample(1, rng)[0]) + 0.05 * rng.standard_normal(geom.m)
        x = prior.sample(1, rng)[0] + sigma * rng.standard_normal(n)
        h = 1e-5
        fd = np.array([
            (log_likelihood_t(x + h * e, sigma, y, geom, 0.05, prior) - log_likelihood_t(x - h * e, sigma, y, geom, 0.05, prior))
            / (2 * h)
            for e in np.eye(n)
        ])
        got = exact_likelihood_score(x, sigma, y, geom, 0.05, prior)
        assert np.linalg.norm(got - fd) <= 1e-6 * np.linalg.norm(got)

    @pytest.mark.parametrize("sigma", [0.01, 0.3, 10.0])
    def test_bayes_consistency(self, sigma, rng):
        prior, geom, noise, y = small_problem(rng, k=3)
        post = exact_posterior(prior, geom, noise, y).as_prior
        x = prior.sample(1, rng)[0] + sigma * rng.standard_normal(prior.n)
        lhs = exact_likelihood_score(x, sigma, y, geom, noise, prior) + prior.score_t(x, sigma)
        rhs = post.score_t(x, sigma)
        assert np.linalg.norm(lhs - rhs) <= 1e-8 * np.linalg.norm(rhs)

    def test_spectral_and_dense_paths_agree(self, rng):
        prior, geom, noise, y = small_problem(rng, side=4, p=2, k=2)
        full = GmmPrior.full(prior.weights, prior.means, np.stack([prior.covariance(k) for k in range(2)]))
        x = prior.sample(1, rng)[0]
        np.testing.assert_allclose(
            exact_likelihood_score(x, 0.4, y, geom, noise, prior),
            exact_likelihood_score(x, 0.4, y, geom, noise, full),
            rtol=1e-9,
        )


class TestAncestral:
    def test_alpha_zero_matches_unguided(self, rng):
        prior, geom, noise, y = small_problem(rng)
        sched = make_schedule(0.01, 20.0, 30)
        for method in ("mcg", "dps"):
            a = ancestral_sample(prior, sched, GuidanceConfig(method, alpha_scale=0.0), y, geom, noise, 5)
            b = ancestral_sample(prior, sched, GuidanceConfig("none"), None, None, None, 5)
            assert a.tobytes() == b.tobytes()

    def test_deterministic_limit_ascends(self, rng):
        prior = GmmPrior.isotropic([0.5, 0.5], rng.random((2, 4)), 0.05)
        traj = []
        ancestral_sample(prior, make_schedule(0.01, 10.0, 60), stochastic=False, x_init=rng.standard_normal(4),
                         trajectory=traj)
        logp = [prior.log_pt(x, 0.0) for x in traj[-10:]]
        assert np.all(np.diff(logp) > 0)

    def test_trajectory_shape(self, rng):
        prior, geom, noise, y = small_problem(rng)
        traj = []
        ancestral_sample(prior, make_schedule(0.01, 5.0, 12), GuidanceConfig("dps"), y, geom, noise, 1,
                         trajectory=traj)
        assert len(traj) == 11

    def test_needs_measurement(self, rng):
        prior, geom, noise, _ = small_problem(rng)
        with pytest.raises(InvalidArgumentError):
            ancestral_sample(prior, make_schedule(0.01, 5.0, 12), GuidanceConfig("dps"))

    def test_unguided_matches_recursion_moments(self):
        n, c, N = 6, 0.05, 4000
        mu = np.linspace(0.1, 0.9, n)
        prior = GmmPrior.isotropic([1.0], mu[None], c)
        sched = make_schedule(0.01, 10.0, 40)
        res = batch_sample(prior, sched, None, None, None, None, N, master_seed=3)
        m, p = recursion_moments(mu, c * np.eye(n), sched.sigmas)
        var = np.diag(p)
        assert np.all(np.abs(res.samples.mean(axis=0) - m) <= 4 * np.sqrt(var / N))
        assert np.all(np.abs(res.samples.var(axis=0, ddof=1) - var) <= 4 * var * math.sqrt(2 / (N - 1)))

    def test_exact_guidance_matches_recursion_moments(self, rng):
        c, N = 0.01, 3000
        prior, geom, noise, y = small_problem(rng, side=6, p=2, c=c, sigma_y=0.05)
        post = exact_posterior(prior, geom, noise, y)
        sched = make_schedule(0.01, 10.0, 30)
        res = batch_sample(prior, sched, GuidanceConfig("exact"), y, geom, noise, N, master_seed=8)
        m, p = recursion_moments(post.means[0], post.covariances[0], sched.sigmas,
                                 denoise_cov=c * np.eye(prior.n), denoise_mean=prior.means[0])
        var = np.diag(p)
        assert np.all(np.abs(res.samples.mean(axis=0) - m) <= 4 * np.sqrt(var / N))
        assert np.all(np.abs(res.samples.var(axis=0, ddof=1) - var) <= 4 * var * math.sqrt(2 / (N - 1)))

    def test_recursion_bias_vanishes_with_more_steps(self):
        # the ancestral update under-disperses by O(1/K); the terminal Tweedie
        # step adds a fixed deficit of sigma_min^2 / (c + sigma_min^2)
        c, mu = 0.01, np.array([0.5])
        floor = 0.01**2 / (c + 0.01**2)
        deficits = []
        for K in (50, 100, 400, 1600):
            _, p = recursion_moments(mu, c * np.eye(1), make_schedule(0.01, 100.0, K).sigmas)
            deficits.append(1 - p[0, 0] / c - floor)
        assert deficits[1] > 0.03
        assert all(a > b > 0 for a, b in zip(deficits, deficits[1:]))
        assert deficits[-1] < deficits[1] / 10


class TestBatch:
    def test_worker_count_does_not_matter(self, rng):
        prior, geom, noise, y = small_problem(rng, k=2)
        sched = make_schedule(0.01, 10.0, 15)
        kw = dict(master_seed=42, block_size=1)
        a = batch_sample(prior, sched, GuidanceConfig("dps"), y, geom, noise, 4, workers=1, **kw)
        b = batch_sample(prior, sched, GuidanceConfig("dps"), y, geom, noise, 4, workers=4, **kw)
        assert a.samples.tobytes() == b.samples.tobytes()

    def test_block_boundaries_do_not_matter(self, rng):
        prior, geom, noise, y = small_problem(rng)
        sched = make_schedule(0.01, 10.0, 15)
        a = batch_sample(prior, sched, GuidanceConfig("pig"), y, geom, noise, 10, master_seed=1, block_size=3)
        b = batch_sample(prior, sched, GuidanceConfig("pig"), y, geom, noise, 10, master_seed=1, block_size=10)
        np.testing.assert_allclose(a.samples, b.samples, rtol=1e-12, atol=1e-14)

    def test_zero_chains(self, rng):
        prior, geom, noise, y = small_problem(rng)
        with pytest.raises(InvalidArgumentError):
            batch_sample(prior, make_schedule(0.01, 1.0, 5), None, None, None, None, 0)

    def test_per_chain_measurements(self, rng):
        prior, geom, noise, y = small_problem(rng)
        sched = make_schedule(0.01, 10.0, 10)
        ys = np.stack([y, y])
        a = batch_sample(prior, sched, GuidanceConfig("exact"), ys, geom, noise, 2, master_seed=0)
        b = batch_sample(prior, sched, GuidanceConfig("exact"), y, geom, noise, 2, master_seed=0)
        np.testing.assert_array_equal(a.samples, b.samples)
        with pytest.raises(InvalidArgumentError):
            batch_sample(prior, sched, GuidanceConfig("exact"), ys, geom, noise, 3)

    def test_failed_chain_is_isolated(self, rng, monkeypatch):
        prior, geom, noise, y = small_problem(rng)
        sched = make_schedule(0.01, 10.0, 12)
        real = gd.likelihood_score
        calls = {"n": 0}

        def flaky(cfg, x_t, sigma_t, *args, **kw):
            out = np.array(real(cfg, x_t, sigma_t, *args, **kw))
            calls["n"] += 1
            if calls["n"] == 5:
                out[0] = np.inf
            return out

        monkeypatch.setattr(gd, "likelihood_score", flaky)
        res = batch_sample(prior, sched, GuidanceConfig("dps"), y, geom, noise, 200, master_seed=0,
                           block_size=200, max_failure_fraction=0.01)
        assert res.failure_count == 1
        assert res.failure_steps[0] == 4
        assert np.all(np.isnan(res.samples[0])) and np.all(np.isfinite(res.samples[1:]))
        assert res.report()["failed_chains"] == {0: 4}

    def test_too_many_failures(self, rng, monkeypatch):
        prior, geom, noise, y = small_problem(rng)
        real = gd.likelihood_score

        def broken(cfg, x_t, sigma_t, *args, **kw):
            out = np.array(real(cfg, x_t, sigma_t, *args, **kw))
            out[:2] = np.nan
            return out

        monkeypatch.setattr(gd, "likelihood_score", broken)
        with pytest.raises(BatchFailureError) as info:
            batch_sample(prior, make_schedule(0.01, 10.0, 6), GuidanceConfig("dps"), y, geom, noise, 20,
                         master_seed=0)
        assert info.value.report["failures"] >= 2

    def test_single_chain_failure_raises(self, rng, monkeypatch):
        prior, geom, noise, y = small_problem(rng)
        real = gd.likelihood_score

        def broken(cfg, x_t, sigma_t, *args, **kw):
            return np.full_like(np.atleast_2d(real(cfg, x_t, sigma_t, *args, **kw)), np.nan)

        monkeypatch.setattr(gd, "likelihood_score", broken)
        with pytest.raises(NumericalFailureError) as info:
            ancestral_sample(prior, make_schedule(0.01, 10.0, 6), GuidanceConfig("mcg"), y, geom, noise, 0)
        assert info.value.step == 0 and info.value.method == "mcg"

import numpy as np
import pytest
from scipy import integrate
from scipy.linalg import block_diag
from scipy.stats import multivariate_normal

from anchorgrf.errors import DegenerateSampleError
from anchorgrf.gaussian import GaussianMoments, condition_gaussian
from anchorgrf.mixtures import (
    KdeTuning,
    NormalMixture,
    WeightedSample,
    kde_fit,
    mixture_condition,
    mixture_linear_map,
)


def hand_mixture_2d():
    """Two 2-D components with hand-set parameters; dims are (theta, z)."""
    w = np.array([0.35, 0.65])
    means = np.array([[0.0, 1.0], [2.0, -0.5]])
    covs = np.array([
        [[1.0, 0.4], [0.4, 0.8]],
        [[0.6, -0.2], [-0.2, 1.2]],
    ])
    return NormalMixture(weights=w, means=means, covs=covs)


class TestLogpdfAndSampling:
    def test_standard_normal_at_mode(self):
        for d in (1, 2, 4):
            mix = NormalMixture(weights=np.array([1.0]), means=np.zeros((1, d)),
                                covs=np.eye(d)[None])
            assert mix.logpdf(np.zeros(d)) == pytest.approx(-0.5 * d * np.log(2 * np.pi), abs=1e-12)

    def test_matches_scipy_mixture(self):
        mix = hand_mixture_2d()
        pts = np.random.default_rng(0).normal(size=(20, 2))
        ref = np.log(
            mix.weights[0] * multivariate_normal(mix.means[0], mix.covs[0]).pdf(pts)
            + mix.weights[1] * multivariate_normal(mix.means[1], mix.covs[1]).pdf(pts)
        )
        assert np.allclose(mix.logpdf(pts), ref, atol=1e-10)

    def test_component_occupancy(self):
        w = np.array([0.2, 0.5, 0.3])
        means = np.array([[-10.0], [0.0], [10.0]])
        covs = np.tile(np.eye(1) * 0.01, (3, 1, 1))
        mix = NormalMixture(weights=w, means=means, covs=covs)
        draws = mix.sample(100_000, np.random.default_rng(5))
        centers = np.array([-10.0, 0.0, 10.0])
        occupancy = np.array([
            np.mean(np.abs(draws[:, 0] - c) < 5.0) for c in centers
        ])
        se = np.sqrt(w * (1 - w) / len(draws))
        assert np.all(np.abs(occupancy - w) <= 3 * se)

    def test_density_integrates_to_one(self):
        w = np.array([0.3, 0.7])
        means = np.array([[-1.0], [2.0]])
        covs = np.array([[[0.5]], [[2.0]]])
        mix = NormalMixture(weights=w, means=means, covs=covs)
        val, _ = integrate.quad(lambda t: np.exp(mix.logpdf(np.array([t]))), -40, 40,
                                limit=200)
        assert val == pytest.approx(1.0, abs=1e-6)

    def test_no_overflow_far_from_mass(self):
        mix = hand_mixture_2d()
        out = mix.logpdf(np.array([1e3, -1e3]))
        assert np.isfinite(out) and out < -1e5

    def test_sampling_deterministic(self):
        mix = hand_mixture_2d()
        a = mix.sample(100, np.random.default_rng(3))
        b = mix.sample(100, np.random.default_rng(3))
        assert np.array_equal(a, b)


class TestLinearMap:
    def test_identity(self):
        mix = hand_mixture_2d()
        out = mixture_linear_map(mix, np.eye(2), 0.0)
        assert np.allclose(out.means, mix.means)
        assert np.allclose(out.covs, mix.covs)

    def test_marginal_matches_quadrature(self):
        mix = hand_mixture_2d()
        marg = mixture_linear_map(mix, np.array([[1.0, 0.0]]))
        for theta in (-1.0, 0.3, 2.5):
            direct, _ = integrate.quad(
                lambda z, th=theta: np.exp(mix.logpdf(np.array([th, z]))), -30, 30,
                limit=200)
            assert np.exp(marg.logpdf(np.array([theta]))) == pytest.approx(direct, abs=1e-8)

    def test_composition(self):
        mix = hand_mixture_2d()
        B1 = np.array([[1.0, 0.5], [0.0, 2.0]])
        B2 = np.array([[0.3, -1.0]])
        once = mixture_linear_map(mixture_linear_map(mix, B1), B2)
        combined = mixture_linear_map(mix, B2 @ B1)
        assert np.allclose(once.means, combined.means, atol=1e-12)
        assert np.allclose(once.covs, combined.covs, atol=1e-12)


class TestCondition:
    def test_single_component_reduces_to_gaussian_conditioning(self):
        mean = np.array([1.0, -2.0, 0.5])
        B = np.random.default_rng(1).normal(size=(3, 3))
        cov = B @ B.T + np.eye(3)
        mix = NormalMixture(weights=np.array([1.0]), means=mean[None], covs=cov[None])
        z_obs = np.array([0.7])
        cond = mixture_condition(mix, z_obs, theta_dims=[0, 1], z_dims=[2])
        sel = np.array([[0.0, 0.0, 1.0]])
        ref = condition_gaussian(GaussianMoments(mean=mean, cov=cov), sel, z_obs)
        assert np.allclose(cond.means[0], ref.mean[:2], atol=1e-10)
        assert np.allclose(cond.covs[0], ref.cov[:2, :2], atol=1e-10)

    def test_two_component_quadrature_oracle(self):
        mix = hand_mixture_2d()
        z_obs = np.array([0.4])
        cond = mixture_condition(mix, z_obs, theta_dims=[0], z_dims=[1])
        norm, _ = integrate.quad(
            lambda th: np.exp(mix.logpdf(np.array([th, z_obs[0]]))), -30, 30, limit=400)
        thetas = np.linspace(-4, 6, 50)
        ours = np.exp(cond.logpdf(thetas[:, None]))
        direct = np.array([
            np.exp(mix.logpdf(np.array([th, z_obs[0]]))) / norm for th in thetas
        ])
        assert np.max(np.abs(ours - direct)) < 1e-6

    def test_large_error_makes_data_uninformative(self):
        mix = hand_mixture_2d()
        z_obs = np.array([0.4])
        gaps = []
        for scale in (0.0, 1.0, 100.0, 10_000.0):
            err = np.array([[scale]])
            cond = mixture_condition(mix, z_obs, [0], [1], err_cov=err)
            gaps.append(np.max(np.abs(cond.weights - mix.weights)))
        assert gaps[-1] < 1e-3
        assert all(a >= b - 1e-12 for a, b in zip(gaps, gaps[1:]))

    def test_weights_normalized_and_covs_psd(self):
        rng = np.random.default_rng(8)
        k, d = 30, 4
        means = rng.normal(size=(k, d))
        mats = rng.normal(size=(k, d, d))
        covs = np.einsum("kab,kcb->kac", mats, mats) + np.eye(d)
        w = rng.random(k)
        mix = NormalMixture(weights=w / w.sum(), means=means, covs=covs)
        cond = mixture_condition(mix, np.array([0.1, -0.2]), [0, 1], [2, 3])
        assert cond.weights.sum() == pytest.approx(1.0, abs=1e-12)
        for V in cond.covs:
            evals = np.linalg.eigvalsh(V)
            assert evals.min() > -1e-10 * max(evals.max(), 1.0)

    def test_map_commutes_with_conditioning_on_theta_block(self):
        rng = np.random.default_rng(21)
        k = 5
        means = rng.normal(size=(k, 3))
        mats = rng.normal(size=(k, 3, 3))
        covs = np.einsum("kab,kcb->kac", mats, mats) + np.eye(3)
        w = rng.random(k)
        mix = NormalMixture(weights=w / w.sum(), means=means, covs=covs)
        B_theta = np.array([[2.0, -1.0], [0.5, 0.3]])
        z_obs = np.array([0.25])

        cond_then_map = mixture_linear_map(
            mixture_condition(mix, z_obs, [0, 1], [2]), B_theta)
        mapped_joint = mixture_linear_map(mix, block_diag(B_theta, np.eye(1)))
        map_then_cond = mixture_condition(mapped_joint, z_obs, [0, 1], [2])
        assert np.allclose(cond_then_map.weights, map_then_cond.weights, atol=1e-10)
        assert np.allclose(cond_then_map.means, map_then_cond.means, atol=1e-10)
        assert np.allclose(cond_then_map.covs, map_then_cond.covs, atol=1e-10)


class TestKdeFit:
    def test_identical_points_become_point_mass(self):
        pts = np.tile([[1.5]], (40, 1))
        sample = WeightedSample(points=pts, weights=np.full(40, 1 / 40))
        fit = kde_fit(sample, KdeTuning(n_eff_floor=10))
        # after the mandatory jitter the mixture is a narrow spike at 1.5;
        # each component is a normalized Gaussian, so unit mass follows from
        # its own CDF (quadrature cannot resolve the spike numerically)
        sds = np.sqrt(fit.mixture.covs[:, 0, 0])
        assert np.all(sds > 0) and np.all(sds < 1e-10)
        from scipy.stats import norm
        mass = sum(
            w * (norm.cdf(1e-3 / sd) - norm.cdf(-1e-3 / sd))
            for w, sd in zip(fit.mixture.weights, sds)
        )
        assert mass == pytest.approx(1.0, abs=1e-12)
        assert fit.mixture.logpdf(np.array([1.5])) > 10.0

    def test_alpha_one_uses_global_covariance(self):
        # classic single-bandwidth KDE: every component shares the sample
        # covariance (point geometry; importance weights stay in the
        # component weights, where a lone heavy point cannot collapse the
        # kernel shape)
        rng = np.random.default_rng(2)
        pts = rng.normal(size=(120, 2)) @ np.array([[1.0, 0.3], [0.0, 0.7]])
        w = rng.random(120)
        w /= w.sum()
        sample = WeightedSample(points=pts, weights=w)
        fit = kde_fit(sample, KdeTuning(alpha_grid=(1.0,), h_grid=(0.5,)))
        global_cov = np.cov(pts.T, bias=True)
        assert np.allclose(fit.mixture.covs[0], 0.25 * global_cov, rtol=1e-6)
        assert np.allclose(fit.mixture.covs, fit.mixture.covs[0], rtol=1e-6)
        assert np.array_equal(fit.mixture.weights, w)

    def test_reduces_to_standard_kde_with_equal_weights(self):
        # equal weights + alpha = 1: the classic fixed-bandwidth estimator
        # with moment-preserving location shrinkage, built directly here
        rng = np.random.default_rng(4)
        pts = rng.normal(size=(80, 2))
        n = len(pts)
        sample = WeightedSample(points=pts, weights=np.full(n, 1 / n))
        h = 0.4
        fit = kde_fit(sample, KdeTuning(alpha_grid=(1.0,), h_grid=(h,)))
        cov = np.cov(pts.T, bias=True)
        center = pts.mean(axis=0)
        locs = center + np.sqrt(1 - h * h) * (pts - center)
        xs = rng.normal(size=(10, 2))
        direct = np.array([
            np.mean([multivariate_normal(p, h * h * cov).pdf(x) for p in locs]) for x in xs
        ])
        assert np.allclose(np.exp(fit.mixture.logpdf(xs)), direct, rtol=1e-6)
        # the smoothed mixture reproduces the sample moments
        mean, mcov = fit.mixture.moments()
        assert np.allclose(mean, center, atol=1e-12)
        assert np.allclose(mcov, cov, atol=1e-10)

    def test_recovers_known_gaussian(self):
        rng = np.random.default_rng(7)
        true_mean = np.array([1.0, -0.5])
        true_cov = np.array([[1.0, 0.6], [0.6, 1.5]])
        pts = rng.multivariate_normal(true_mean, true_cov, size=5000)
        n = len(pts)
        sample = WeightedSample(points=pts, weights=np.full(n, 1 / n))
        fit = kde_fit(sample, KdeTuning(h_grid=(0.3, 0.6), alpha_grid=(0.25, 1.0)))
        mean, cov = fit.mixture.moments()
        assert np.linalg.norm(mean - true_mean) < 0.05 * np.linalg.norm(true_mean)
        assert np.linalg.norm(cov - true_cov) / np.linalg.norm(true_cov) < 0.05

    def test_argmax_matches_exhaustive_grid_oracle(self):
        rng = np.random.default_rng(7)
        pts = rng.multivariate_normal([1.0, -0.5], [[1.0, 0.6], [0.6, 1.5]], size=400)
        n = len(pts)
        w = rng.random(n)
        w /= w.sum()
        sample = WeightedSample(points=pts, weights=w)
        tuning = KdeTuning(h_grid=tuple(np.geomspace(0.2, 1.2, 4)), alpha_grid=(0.25, 1.0))
        fit = kde_fit(sample, tuning)

        # independent exhaustive-grid oracle for the leave-one-out score
        def independent_score(h, alpha):
            refit = kde_fit(sample, tuning, fixed=(h, alpha))
            comp = np.empty((n, n))
            for j in range(n):
                comp[:, j] = multivariate_normal(
                    refit.mixture.means[j], refit.mixture.covs[j]).logpdf(pts)
            np.fill_diagonal(comp, -np.inf)
            logw = np.log(w)
            from scipy.special import logsumexp
            loo = logsumexp(comp + logw, axis=1) - np.log1p(-w)
            return float(np.sum(w * loo))

        chosen = independent_score(fit.h, fit.alpha)
        for h in tuning.h_grid:
            for alpha in tuning.alpha_grid:
                assert chosen >= independent_score(h, alpha) - 1e-9

    def test_fit_density_integrates_to_one(self):
        rng = np.random.default_rng(11)
        pts = np.concatenate([rng.normal(-2, 0.5, 60), rng.normal(1.5, 1.0, 60)])[:, None]
        w = rng.random(120)
        w /= w.sum()
        fit = kde_fit(WeightedSample(points=pts, weights=w))
        val, _ = integrate.quad(
            lambda t: np.exp(fit.mixture.logpdf(np.array([t]))), -25, 25, limit=400)
        assert val == pytest.approx(1.0, abs=1e-4)

    def test_degenerate_weight_rejected(self):
        pts = np.random.default_rng(0).normal(size=(50, 1))
        w = np.zeros(50)
        w[3] = 1.0
        with pytest.raises(DegenerateSampleError):
            kde_fit(WeightedSample(points=pts, weights=w))

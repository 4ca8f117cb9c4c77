import numpy as np
import pytest

from guidelab.classifier import BayesClassifier, TemperedLogits
from guidelab.guidance import GuidanceConfig
from guidelab.metrics import bayes_accuracy
from guidelab.mixture import GaussianMixture
from guidelab.samplers import (
    AnalyticDenoiser, SamplingError, cfg_sample, chain_noise, ddpm_guided_sample,
    edm_guided_sample,
)
from guidelab.schedule import GuidanceSchedule, make_edm_grid, make_linear_schedule

from oracles import ddpm_gaussian_moments, moments_within

TARGET_MEAN = np.array([1.0, -2.0])
TARGET_COV = np.array([[2.0, 0.5], [0.5, 1.0]])


@pytest.fixture
def gauss():
    return GaussianMixture([1.0], [TARGET_MEAN], [TARGET_COV])


def test_chain_noise_independent_of_batch():
    a = chain_noise(7, 5, (3, 2))
    b = chain_noise(7, 3, (3, 2))
    np.testing.assert_array_equal(a[:3], b)
    assert not np.array_equal(chain_noise(8, 3, (3, 2)), b)
    with pytest.raises(ValueError):
        chain_noise(-1, 2, (1,))


def test_denoiser_identities(rng, benchmark):
    s = make_linear_schedule(50, 1e-3, 0.2)
    den = AnalyticDenoiser(benchmark, s)
    x = rng.normal(size=(10, 2))
    t = 17
    eps = den.eps(x, t)
    mu = den.mean(x, t, eps)
    ref = (x - s.beta_at(t) / np.sqrt(1 - s.alpha_bar_at(t)) * eps) / np.sqrt(s.alpha_at(t))
    np.testing.assert_allclose(mu, ref, rtol=1e-14)
    half = AnalyticDenoiser(benchmark, s, conditioning=0.5)
    y = np.zeros(10, int)
    np.testing.assert_allclose(half.eps(x, t, y), 0.5 * den.eps(x, t) + 0.5 * den.eps(x, t, y),
                               rtol=1e-12)
    with pytest.raises(ValueError):
        AnalyticDenoiser(benchmark, s, conditioning=1.5)


def test_edm_denoise_single_gaussian(rng, gauss):
    den = AnalyticDenoiser(gauss)
    x = rng.normal(size=(4, 2))
    sigma = 0.7
    C = TARGET_COV + sigma**2 * np.eye(2)
    ref = x + sigma**2 * np.linalg.solve(C, (TARGET_MEAN - x).T).T
    np.testing.assert_allclose(den.edm_denoise(x, sigma), ref, rtol=1e-12)


def test_ddpm_unguided_matches_moment_propagation(gauss):
    s = make_linear_schedule(250, 4e-4, 0.08)
    run = ddpm_guided_sample(AnalyticDenoiser(gauss, s), None, s, 0, 10_000, seed=3,
                             keep_states=False)
    m, S = ddpm_gaussian_moments(TARGET_MEAN, TARGET_COV, s)
    assert moments_within(run.samples, m, S)
    # the exact-score chain is close to the target itself at this resolution
    np.testing.assert_allclose(m, TARGET_MEAN, atol=0.02)
    np.testing.assert_allclose(S, TARGET_COV, atol=0.03)


def test_ddpm_scale_zero_conditional(benchmark):
    s = make_linear_schedule(250, 4e-4, 0.08)
    den = AnalyticDenoiser(benchmark, s, conditioning=1.0)
    cfg = GuidanceConfig(BayesClassifier(benchmark), GuidanceSchedule.constant(0.0, 250))
    run = ddpm_guided_sample(den, cfg, s, 2, 10_000, seed=1, keep_states=False)
    m, S = ddpm_gaussian_moments(benchmark.means[2], benchmark.covs[2], s)
    assert moments_within(run.samples, m, S)
    unguided = ddpm_guided_sample(den, None, s, 2, 10_000, seed=1, keep_states=False)
    np.testing.assert_array_equal(run.samples, unguided.samples)


def test_ddpm_one_step_closed_form():
    g = GaussianMixture([1.0], [[0.0]], [[[1.0]]])
    s = make_linear_schedule(1, 0.3, 0.3)
    run = ddpm_guided_sample(AnalyticDenoiser(g, s), None, s, 0, 20_000, seed=0)
    # x_1 ~ N(0, 1) and the mean map is sqrt(alpha) x, so the output is N(0, 0.7)
    assert moments_within(run.samples, np.zeros(1), np.array([[0.7]]))
    assert run.num_steps == 1


def test_ddpm_determinism(benchmark):
    s = make_linear_schedule(30, 1e-3, 0.3)
    den = AnalyticDenoiser(benchmark, s, 0.5)
    cfg = GuidanceConfig(BayesClassifier(benchmark),
                         GuidanceSchedule.from_noise_schedule(s, 0.3, "sine"),
                         TemperedLogits(1, 0.5))
    a = ddpm_guided_sample(den, cfg, s, 0, 64, seed=5)
    b = ddpm_guided_sample(den, cfg, s, 0, 64, seed=5)
    for name in ("t", "scale", "xs", "x0s", "grad_norm", "applied_norm", "confidence", "samples"):
        np.testing.assert_array_equal(getattr(a, name), getattr(b, name))
    small = ddpm_guided_sample(den, cfg, s, 0, 16, seed=5)
    np.testing.assert_array_equal(small.samples, a.samples[:16])
    assert a.num_steps == 30 and list(a.t[:3]) == [30, 29, 28]


def test_ddpm_guidance_moves_mean(gauss):
    # constant guidance: a = const vector added each step -> oracle with the same shift
    s = make_linear_schedule(40, 1e-3, 0.2)

    class Const:
        dim, num_classes = 2, 1

        def logits(self, x):
            return np.atleast_2d(x) @ np.array([[1.0], [0.0]])

        def forward(self, x):
            x = np.atleast_2d(x)
            return self.logits(x), lambda v: v @ np.array([[1.0, 0.0]])

    # with one class the tempered objective is tau1 f - tau2 f, gradient (tau1 - tau2) e_0
    cfg = GuidanceConfig(Const(), GuidanceSchedule.constant(0.05, 40, 0.0, "linear"),
                         TemperedLogits(1.0, 0.0), input="noisy_sample")
    run = ddpm_guided_sample(AnalyticDenoiser(gauss, s), cfg, s, 0, 10_000, seed=2,
                             keep_states=False)
    m, S = ddpm_gaussian_moments(TARGET_MEAN, TARGET_COV, s, guide=lambda t: np.array([0.05, 0.0]))
    assert moments_within(run.samples, m, S)


def test_edm_unguided_resolution(gauss):
    den = AnalyticDenoiser(gauss)
    coarse = edm_guided_sample(den, None, make_edm_grid(36), 0, 4000, seed=4, keep_states=False)
    fine = edm_guided_sample(den, None, make_edm_grid(256), 0, 4000, seed=4, keep_states=False)
    for a, b in ((coarse.samples.mean(0), fine.samples.mean(0)),
                 (np.cov(coarse.samples.T), np.cov(fine.samples.T))):
        assert np.linalg.norm(a - b) / np.linalg.norm(b) < 0.02


def test_edm_zero_scale_bitwise(benchmark):
    den = AnalyticDenoiser(benchmark)
    grid = make_edm_grid(12)
    cfg = GuidanceConfig(BayesClassifier(benchmark), GuidanceSchedule.constant(0.0, 12))
    a = edm_guided_sample(den, cfg, grid, 1, 200, seed=9)
    b = edm_guided_sample(den, None, grid, 1, 200, seed=9)
    np.testing.assert_array_equal(a.samples, b.samples)


def test_edm_guidance_raises_target_fraction():
    mix = GaussianMixture([0.5, 0.5], [[-3.0, 0.0], [3.0, 0.0]], [np.eye(2), np.eye(2)])
    den = AnalyticDenoiser(mix)
    grid = make_edm_grid(36)
    cfg = GuidanceConfig(BayesClassifier(mix), GuidanceSchedule.constant(0.2, 36, 0.0, "linear"),
                         TemperedLogits(1.0, 0.0))
    guided = edm_guided_sample(den, cfg, grid, 1, 10_000, seed=0, keep_states=False)
    plain = edm_guided_sample(den, None, grid, 1, 10_000, seed=0, keep_states=False)
    assert bayes_accuracy(guided.samples, 1, mix) > bayes_accuracy(plain.samples, 1, mix)


def test_edm_schedule_length_checked(benchmark):
    cfg = GuidanceConfig(BayesClassifier(benchmark), GuidanceSchedule.constant(0.1, 10))
    with pytest.raises(ValueError):
        edm_guided_sample(AnalyticDenoiser(benchmark), cfg, make_edm_grid(12), 0, 4, seed=0)


def _cfg_setup(benchmark, T=40):
    s = make_linear_schedule(T, 1e-3, 0.25)
    return s, AnalyticDenoiser(benchmark, s, conditioning=0.5)


def test_cfg_s1_is_conditional_ddpm(benchmark):
    s, den = _cfg_setup(benchmark)
    a = cfg_sample(den, 1.0, s, 0, 500, seed=3)
    b = ddpm_guided_sample(den, None, s, 0, 500, seed=3, conditional=True)
    np.testing.assert_array_equal(a.samples, b.samples)


def test_cfg_zero_injection_is_plain(benchmark):
    s, den = _cfg_setup(benchmark)
    inj = GuidanceConfig(BayesClassifier(benchmark), GuidanceSchedule.constant(0.0, s.T),
                         normalization="match_cfg_delta")
    a = cfg_sample(den, 2.0, s, 1, 300, seed=1, cfg_guidance=inj)
    b = cfg_sample(den, 2.0, s, 1, 300, seed=1)
    np.testing.assert_array_equal(a.samples, b.samples)


def test_cfg_injection_norm_matches_delta(benchmark):
    s, den = _cfg_setup(benchmark)
    inj = GuidanceConfig(BayesClassifier(benchmark),
                         GuidanceSchedule.constant(1.0, s.T, 0.0, "linear"),
                         TemperedLogits(1, 0.5), normalization="match_cfg_delta")
    run = cfg_sample(den, 1.5, s, 0, 100, seed=2, cfg_guidance=inj)
    for k, t in enumerate(run.t):
        y = run.labels
        delta = den.eps_difference(run.xs[k], int(t), y)
        np.testing.assert_allclose(run.applied_norm[k], np.linalg.norm(delta, axis=1), rtol=1e-12)


def test_cfg_delta_direction(rng, benchmark):
    s, _ = _cfg_setup(benchmark)
    den = AnalyticDenoiser(benchmark, s, conditioning=1.0)
    for t in (3, 20, 39):
        x = rng.normal(size=(20, 2)) * 2
        y = rng.integers(0, 3, size=20)
        delta = den.eps(x, t, y) - den.eps(x, t)
        # eps_c - eps_u = -sqrt(1 - abar) grad log p_t(y | x)
        d = den.diffused(t)
        ref = -np.sqrt(1 - s.alpha_bar_at(t)) * d.log_posterior_grad(x, y)
        assert np.linalg.norm(delta - ref) / np.linalg.norm(ref) < 1e-6


def test_eps_difference_matches_subtraction(rng, benchmark):
    s, _ = _cfg_setup(benchmark)
    den = AnalyticDenoiser(benchmark, s, conditioning=0.5)
    for t in (1, 20, 40):
        x = rng.normal(size=(50, 2)) * 3
        y = rng.integers(0, 3, size=50)
        naive = den.eps(x, t, y) - den.eps(x, t)
        np.testing.assert_allclose(den.eps_difference(x, t, y), naive, rtol=0, atol=1e-12)
    plain = AnalyticDenoiser(benchmark, s, conditioning=0.0)
    assert not plain.eps_difference(x, 5, y).any()


def test_cfg_argument_checks(benchmark):
    s, den = _cfg_setup(benchmark)
    with pytest.raises(ValueError):
        cfg_sample(den, 0.5, s, 0, 4, seed=0)
    inj = GuidanceConfig(BayesClassifier(benchmark), GuidanceSchedule.constant(1.0, s.T))
    with pytest.raises(ValueError):
        cfg_sample(den, 2.0, s, 0, 4, seed=0, cfg_guidance=inj)


def test_label_range(benchmark):
    s, den = _cfg_setup(benchmark)
    with pytest.raises(ValueError):
        ddpm_guided_sample(den, None, s, 3, 4, seed=0)


def test_nonfinite_state_raises(benchmark):
    s, den = _cfg_setup(benchmark, T=5)
    cfg = GuidanceConfig(BayesClassifier(benchmark), GuidanceSchedule.constant(1e308, 5, 0.0, "linear"),
                         input="noisy_sample")
    with pytest.raises(ArithmeticError), np.errstate(all="ignore"):
        ddpm_guided_sample(den, cfg, s, 0, 8, seed=0)
    assert issubclass(SamplingError, ArithmeticError)

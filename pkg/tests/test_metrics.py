import warnings

import numpy as np
import pytest

from guidelab.classifier import BayesClassifier, TemperedLogits
from guidelab.guidance import GuidanceConfig
from guidelab.metrics import (
    DegenerateCovarianceWarning, bayes_accuracy, compare_runs, moment_distance, quality_report,
)
from guidelab.mixture import GaussianMixture
from guidelab.samplers import AnalyticDenoiser, ddpm_guided_sample
from guidelab.schedule import GuidanceSchedule, make_linear_schedule


@pytest.fixture
def separated():
    return GaussianMixture([0.5, 0.5], [[0.0, 0.0], [10.0, 0.0]], [np.eye(2), np.eye(2)])


def test_bayes_accuracy_own_and_other(separated):
    r = np.random.default_rng(0)
    x = separated.component(0).sample(20_000, r)[0]
    assert bayes_accuracy(x, 0, separated) > 0.999
    assert bayes_accuracy(x, 1, separated) < 0.001
    single = GaussianMixture([1.0], [[0.0]], [[[1.0]]])
    assert bayes_accuracy(np.linspace(-5, 5, 11)[:, None], 0, single) == 1.0
    with pytest.raises(ValueError):
        bayes_accuracy(np.zeros((0, 2)), 0, separated)


def test_moment_distance_point_mass():
    cov = np.array([[2.0, 0.3], [0.3, 1.5]])
    x = np.tile([1.0, 2.0], (10, 1))
    with pytest.warns(DegenerateCovarianceWarning):
        v = moment_distance(x, [1.0, 2.0], cov)
    assert v == pytest.approx(np.trace(cov), rel=1e-12)


def test_moment_distance_identical_and_concentration():
    r = np.random.default_rng(1)
    cov = np.array([[1.0, 0.4], [0.4, 2.0]])
    mean = np.array([3.0, -1.0])
    n = 100_000
    x = r.multivariate_normal(mean, cov, size=n)
    assert moment_distance(x, mean, cov) < 5 * 2 / np.sqrt(n)
    # moments matching exactly give zero
    z = r.normal(size=(500, 2))
    z = (z - z.mean(0)) @ np.linalg.inv(np.linalg.cholesky(np.cov(z.T))).T
    assert moment_distance(z, np.zeros(2), np.eye(2)) == pytest.approx(0.0, abs=1e-10)


def test_moment_distance_needs_samples():
    with pytest.raises(ValueError):
        moment_distance(np.zeros((2, 2)), np.zeros(2), np.eye(2))
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        moment_distance(np.random.default_rng(0).normal(size=(50, 2)), np.zeros(2), np.eye(2))


def test_quality_report_fields(benchmark):
    x = benchmark.sample(1000, np.random.default_rng(0))[0]
    q = quality_report(x, 1, benchmark)
    assert sum(q.coverage) == pytest.approx(1.0)
    assert q.coverage[1] == q.bayes_accuracy
    row = q.as_row()
    assert list(row)[-3:] == ["coverage_0", "coverage_1", "coverage_2"]


def _runs(benchmark, guided_tau2=None, seed=0, n=4000):
    s = make_linear_schedule(100, 1e-3, 0.2)
    den = AnalyticDenoiser(benchmark, s, conditioning=0.5)
    cfg = None
    if guided_tau2 is not None:
        cfg = GuidanceConfig(BayesClassifier(benchmark),
                             GuidanceSchedule.from_noise_schedule(s, 0.3, "sine", 0.3),
                             TemperedLogits(1.0, guided_tau2))
    return ddpm_guided_sample(den, cfg, s, 0, n, seed, keep_states=False,
                              config={"mixture": benchmark.to_dict()})


def test_compare_same_run_is_zero(benchmark):
    a = _runs(benchmark)
    c = compare_runs(a, a, benchmark, 0)
    assert all(v == 0 for k, v in c.delta.items() if k != "coverage")
    assert c.delta["coverage"] == [0.0, 0.0, 0.0]


def test_guided_beats_unguided(benchmark):
    c = compare_runs(_runs(benchmark), _runs(benchmark, 1.0), benchmark, 0)
    assert c.delta["bayes_accuracy"] > 0


def test_joint_strengthening_lowers_moment_distance(benchmark):
    c = compare_runs(_runs(benchmark, 1.0), _runs(benchmark, 0.5), benchmark, 0)
    assert c.delta["moment_distance"] <= 0


def test_compare_rejects_mismatch(benchmark):
    a = _runs(benchmark, n=100)
    b = _runs(benchmark, n=200)
    with pytest.raises(ValueError):
        compare_runs(a, b, benchmark, 0)
    b = _runs(benchmark, n=100)
    b.config = {"mixture": {"weights": [1.0]}}
    with pytest.raises(ValueError):
        compare_runs(a, b, benchmark, 0)

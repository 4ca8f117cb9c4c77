import numpy as np
import pytest

from guidelab.classifier import BayesClassifier, SmallNet, TemperedLogits, guidance_grad
from guidelab.guidance import (
    GuidanceConfig, GuidanceError, IdentityDecoder, LinearDecoder, compute_guidance,
    compute_guidance_through_decoder, predicted_x0,
)
from guidelab.mixture import GaussianMixture
from guidelab.schedule import GuidanceSchedule, make_linear_schedule

SCHED = make_linear_schedule(100, 1e-3, 0.1)


def _cfg(clf, value=0.5, **kw):
    return GuidanceConfig(clf, GuidanceSchedule.constant(value, SCHED.T, 0.0, "linear"), **kw)


def test_predicted_x0_inverts_forward(rng):
    x0 = rng.normal(size=(20, 3))
    eps = rng.normal(size=(20, 3))
    t = 40
    ab = SCHED.alpha_bar_at(t)
    xt = np.sqrt(ab) * x0 + np.sqrt(1 - ab) * eps
    np.testing.assert_allclose(predicted_x0(xt, eps, SCHED, t), x0, atol=1e-10)


def test_predicted_x0_no_noise_limit(rng):
    s = make_linear_schedule(10, 1e-9, 1e-9)
    x = rng.normal(size=(4, 2))
    np.testing.assert_allclose(predicted_x0(x, rng.normal(size=(4, 2)), s, 1), x, atol=1e-4)


def test_predicted_x0_hand_formula(rng):
    s = make_linear_schedule(1, 0.36, 0.36)
    assert s.alpha_bar_at(1) == pytest.approx(0.64)
    x, e = rng.normal(size=5), rng.normal(size=5)
    np.testing.assert_allclose(predicted_x0(x, e, s, 1), (x - 0.6 * e) / 0.8, rtol=1e-12)


def test_zero_scale_zero_vector(rng, benchmark):
    out = compute_guidance(_cfg(BayesClassifier(benchmark), 0.0), rng.normal(size=(6, 2)),
                           rng.normal(size=(6, 2)), 10, SCHED, 0)
    assert np.array_equal(out.gradient, np.zeros((6, 2)))
    assert out.scale == 0.0


def test_exact_eps_sees_true_x0(rng, benchmark):
    clf = BayesClassifier(benchmark)
    x0 = rng.normal(size=(8, 2)) * 2
    eps = rng.normal(size=(8, 2))
    t = 30
    ab = SCHED.alpha_bar_at(t)
    xt = np.sqrt(ab) * x0 + np.sqrt(1 - ab) * eps
    temps = TemperedLogits(1.0, 0.5)
    out = compute_guidance(_cfg(clf, 0.5, temps=temps), xt, eps, t, SCHED, 1)
    np.testing.assert_allclose(out.gradient, 0.5 * guidance_grad(clf, x0, 1, temps), rtol=1e-8)
    np.testing.assert_allclose(out.classifier_input, x0, atol=1e-10)


def test_unit_gradient_norm_equals_scale(rng, benchmark):
    out = compute_guidance(_cfg(BayesClassifier(benchmark), 0.37, normalization="unit_gradient"),
                           rng.normal(size=(10, 2)), rng.normal(size=(10, 2)), 5, SCHED, 2)
    np.testing.assert_allclose(np.linalg.norm(out.gradient, axis=1), 0.37, rtol=1e-14)


def test_match_cfg_delta_norm(rng, benchmark):
    target = rng.uniform(0.1, 2.0, size=10)
    out = compute_guidance(_cfg(BayesClassifier(benchmark), 1.0, normalization="match_cfg_delta"),
                           rng.normal(size=(10, 2)), rng.normal(size=(10, 2)), 5, SCHED, 0,
                           delta_eps_norm=target)
    np.testing.assert_allclose(np.linalg.norm(out.gradient, axis=1), target, rtol=1e-13)


def test_chain_rule_factor(rng, benchmark):
    clf = BayesClassifier(benchmark)
    x, e = rng.normal(size=(4, 2)), rng.normal(size=(4, 2))
    a = compute_guidance(_cfg(clf), x, e, 50, SCHED, 0)
    b = compute_guidance(_cfg(clf, chain_rule=True), x, e, 50, SCHED, 0)
    np.testing.assert_allclose(b.gradient, a.gradient / np.sqrt(SCHED.alpha_bar_at(50)))


def test_recurrence_accumulates(rng, benchmark):
    clf = BayesClassifier(benchmark)
    x, e = rng.normal(size=(4, 2)), rng.normal(size=(4, 2))
    one = compute_guidance(_cfg(clf, input="noisy_sample"), x, e, 20, SCHED, 0)
    three = compute_guidance(_cfg(clf, input="noisy_sample", recurrence=3), x, e, 20, SCHED, 0,
                             eps_fn=lambda z: e)
    # manual unrolled reference
    total = np.zeros_like(x)
    for _ in range(3):
        total += 0.5 * guidance_grad(clf, x + total, 0, TemperedLogits())
    np.testing.assert_allclose(three.gradient, total, rtol=1e-12)
    np.testing.assert_allclose(three.grad_norm, one.grad_norm)
    with pytest.raises(ValueError):
        compute_guidance(_cfg(clf, recurrence=2), x, e, 20, SCHED, 0)


def test_diagnostics(rng, benchmark):
    clf = BayesClassifier(benchmark)
    x = rng.normal(size=(5, 2))
    out = compute_guidance(_cfg(clf, input="noisy_sample"), x, np.zeros_like(x), 3, SCHED, 0)
    post = benchmark.posterior(x)
    np.testing.assert_allclose(out.confidence, post[:, 0], rtol=1e-12)
    f = clf.logits(x)
    np.testing.assert_allclose(out.logit_margin, f[:, 0] - f[:, 1:].max(axis=1))


def test_nonfinite_gradient_raises():
    net = SmallNet.init((2, 4, 2), seed=0)
    bad = SmallNet(tuple(w * np.inf for w in net.weights), net.biases)
    with pytest.raises(GuidanceError, match="step 7"), np.errstate(invalid="ignore"):
        compute_guidance(_cfg(bad, input="noisy_sample"), np.ones((2, 2)), np.zeros((2, 2)), 7,
                         SCHED, 0)


def test_config_validation(benchmark):
    clf = BayesClassifier(benchmark)
    for kw in ({"input": "x"}, {"normalization": "x"}, {"recurrence": 0}):
        with pytest.raises(ValueError):
            _cfg(clf, **kw)


def test_identity_decoder_matches(rng, benchmark):
    cfg = _cfg(BayesClassifier(benchmark), 0.8, input="noisy_sample", temps=TemperedLogits(1, 0.5))
    z = rng.normal(size=(6, 2))
    a = compute_guidance_through_decoder(cfg, z, IdentityDecoder(), 12, 1)
    b = compute_guidance(cfg, z, np.zeros_like(z), 12, SCHED, 1)
    np.testing.assert_allclose(a.gradient, b.gradient, rtol=0, atol=1e-12)


def test_linear_decoder_chain_rule(rng, benchmark):
    clf = BayesClassifier(benchmark)
    cfg = _cfg(clf, 1.0, temps=TemperedLogits(1, 0.5))
    A = rng.normal(size=(2, 3))
    z = rng.normal(size=(5, 3))
    out = compute_guidance_through_decoder(cfg, z, LinearDecoder(A), 4, 2)
    pix = guidance_grad(clf, z @ A.T, 2, TemperedLogits(1, 0.5))
    np.testing.assert_allclose(out.gradient, pix @ A, rtol=0, atol=1e-10)


def test_scaled_decoder(rng, benchmark):
    clf = BayesClassifier(benchmark)
    cfg = _cfg(clf, 1.0)
    z = rng.normal(size=(5, 2))
    c = 2.5
    out = compute_guidance_through_decoder(cfg, z, LinearDecoder(c * np.eye(2)), 4, 0)
    np.testing.assert_allclose(out.gradient, c * guidance_grad(clf, c * z, 0, TemperedLogits()),
                               rtol=1e-12)


def test_decoder_rejects_recurrence(benchmark):
    cfg = _cfg(BayesClassifier(benchmark), recurrence=2)
    with pytest.raises(ValueError):
        compute_guidance_through_decoder(cfg, np.zeros((1, 2)), IdentityDecoder(), 1, 0)

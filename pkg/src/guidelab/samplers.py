"""Guided DDPM, EDM (Heun ODE) and classifier-free samplers over an analytic denoiser."""

from __future__ import annotations

import numpy as np

from guidelab.classifier import guidance_eval
from guidelab.guidance import GuidanceConfig, compute_guidance, predicted_x0
from guidelab.mixture import GaussianMixture, diffuse_ve, diffuse_vp
from guidelab.records import RunRecord
from guidelab.schedule import EdmTimeGrid, NoiseSchedule, guidance_scale_at


class SamplingError(ArithmeticError):
    """The chain left the finite reals, or a required normalization was undefined."""


def chain_noise(seed: int, n: int, shape: tuple[int, ...]) -> np.ndarray:
    """Standard normal draws of ``shape`` for each of ``n`` chains.

    Chain ``i`` reads from a Philox stream keyed by ``(seed, i)``, so its noise
    does not depend on the batch size or on how chains are split across workers.
    """
    if not 0 <= seed < 2**64:
        raise ValueError("seed must be an unsigned 64-bit integer")
    out = np.empty((n, *shape))
    for i in range(n):
        bitgen = np.random.Philox(key=np.array([i, seed], dtype=np.uint64))
        out[i] = np.random.Generator(bitgen).standard_normal(shape)
    return out


class AnalyticDenoiser:
    """Exact noise predictions for a Gaussian-mixture data distribution.

    Unconditional predictions use the whole diffused mixture. Conditional ones
    (``c`` given, one class per chain) use the score
    ``(1 - w) * grad log p_t(x) + w * grad log p_t(x | c)`` with ``w = conditioning``:
    ``w = 1`` is the exact class-conditional model, smaller values mimic a model
    whose conditioning is only partly learned.
    """

    def __init__(
        self, mixture: GaussianMixture, sched: NoiseSchedule | None = None,
        conditioning: float = 1.0,
    ):
        if not 0.0 <= conditioning <= 1.0:
            raise ValueError(f"conditioning must lie in [0, 1], got {conditioning!r}")
        self.mixture = mixture
        self.sched = sched
        self.conditioning = float(conditioning)
        self._vp = {}

    def diffused(self, t: int):
        if t not in self._vp:
            self._vp[t] = diffuse_vp(self.mixture, self.sched.alpha_bar_at(t))
        return self._vp[t]

    def _score(self, mix: GaussianMixture, x: np.ndarray, c) -> np.ndarray:
        w = self.conditioning
        if c is None or w == 0.0:
            return mix.score(x)
        if w == 1.0:
            return mix.joint_grad(x, c)
        return (1.0 - w) * mix.score(x) + w * mix.joint_grad(x, c)

    def score(self, x, t: int, c=None) -> np.ndarray:
        return self._score(self.diffused(t), np.atleast_2d(x), c)

    def eps(self, x, t: int, c=None) -> np.ndarray:
        """-sqrt(1 - abar_t) * grad log p_t(x [| c])."""
        abar = self.sched.alpha_bar_at(t)
        return -np.sqrt(1.0 - abar) * self.score(x, t, c)

    def eps_difference(self, x, t: int, c) -> np.ndarray:
        """eps(x, t, c) - eps(x, t), formed directly as -sqrt(1 - abar_t) w grad log p_t(c | x).

        Subtracting the two predictions loses all precision once the class
        posterior saturates; this form keeps it.
        """
        abar = self.sched.alpha_bar_at(t)
        x = np.atleast_2d(x)
        if self.conditioning == 0.0:
            return np.zeros_like(x, dtype=np.float64)
        grad = self.diffused(t).log_posterior_grad(x, c)
        return -np.sqrt(1.0 - abar) * self.conditioning * grad

    def mean(self, x, t: int, eps) -> np.ndarray:
        """Reverse mean (x - beta_t / sqrt(1 - abar_t) * eps) / sqrt(alpha_t)."""
        s = self.sched
        coef = s.beta_at(t) / np.sqrt(1.0 - s.alpha_bar_at(t))
        return (np.asarray(x) - coef * np.asarray(eps)) / np.sqrt(s.alpha_at(t))

    def edm_denoise(self, x, sigma: float, c=None) -> np.ndarray:
        """D(x; sigma) = x + sigma^2 grad log p_sigma(x [| c]) under the VE convention."""
        x = np.atleast_2d(x)
        return x + sigma**2 * self._score(diffuse_ve(self.mixture, sigma), x, c)


def _labels(y, n: int, K: int) -> np.ndarray:
    y = np.array(np.broadcast_to(np.asarray(y, dtype=np.int64), (n,)))
    if np.any((y < 0) | (y >= K)):
        raise ValueError(f"class labels must lie in [0, {K})")
    return y


class _Recorder:
    def __init__(self, steps: int, n: int, d: int, keep_states: bool):
        self.t = np.zeros(steps, dtype=np.int64)
        self.level = np.zeros(steps)
        self.scale = np.zeros(steps)
        self.xs = np.zeros((steps, n, d)) if keep_states else None
        self.x0s = np.zeros((steps, n, d)) if keep_states else None
        self.grad_norm = np.zeros((steps, n))
        self.applied = np.zeros((steps, n))
        self.conf = np.full((steps, n), np.nan)

    def put(self, k, t, level, x, x0, scale=0.0, gnorm=None, applied=None, conf=None):
        self.t[k], self.level[k], self.scale[k] = t, level, scale
        if self.xs is not None:
            self.xs[k], self.x0s[k] = x, x0
        if gnorm is not None:
            self.grad_norm[k] = gnorm
        if applied is not None:
            self.applied[k] = np.linalg.norm(applied, axis=1)
        if conf is not None:
            self.conf[k] = conf

    def finish(self, sampler, samples, labels, seed, config) -> RunRecord:
        return RunRecord(
            sampler=sampler, t=self.t, noise_level=self.level, scale=self.scale,
            xs=self.xs, x0s=self.x0s, grad_norm=self.grad_norm, applied_norm=self.applied,
            confidence=self.conf, samples=samples, labels=labels, seed=int(seed),
            config=dict(config or {}),
        )


def _check_state(x: np.ndarray, step: int) -> None:
    if not np.all(np.isfinite(x)):
        raise SamplingError(f"non-finite state after step {step}")


def ddpm_guided_sample(
    denoiser: AnalyticDenoiser,
    cfg: GuidanceConfig | None,
    sched: NoiseSchedule,
    y,
    n: int,
    seed: int,
    conditional: bool = True,
    keep_states: bool = True,
    config: dict | None = None,
) -> RunRecord:
    """Ancestral DDPM with the guidance vector added to the reverse mean.

    The final step (t = 1) returns the guided mean without injected noise.
    """
    mix = denoiser.mixture
    d = mix.dim
    y = _labels(y, n, mix.K)
    c = y if conditional else None
    if cfg is not None and cfg.classifier.dim != d:
        raise ValueError("classifier and data dimensions differ")
    T = sched.T
    tape = chain_noise(seed, n, (T + 1, d))
    x = tape[:, 0].copy()
    rec = _Recorder(T, n, d, keep_states)

    for k, t in enumerate(range(T, 0, -1)):
        eps = denoiser.eps(x, t, c)
        mu = denoiser.mean(x, t, eps)
        x0 = predicted_x0(x, eps, sched, t)
        if cfg is not None:
            out = compute_guidance(
                cfg, x, eps, t, sched, y, eps_fn=lambda z, t=t: denoiser.eps(z, t, c)
            )
            rec.put(k, t, sched.alpha_bar_at(t), x, x0, out.scale, out.grad_norm,
                    out.gradient, out.confidence)
            if out.scale != 0.0:
                mu = mu + out.gradient
        else:
            rec.put(k, t, sched.alpha_bar_at(t), x, x0)
        x = mu + sched.sigma_at(t) * tape[:, k + 1] if t > 1 else mu
        _check_state(x, t)

    return rec.finish("ddpm", x, y, seed, config)


def edm_guided_sample(
    denoiser: AnalyticDenoiser,
    cfg: GuidanceConfig | None,
    grid: EdmTimeGrid,
    y,
    n: int,
    seed: int,
    conditional: bool = False,
    keep_states: bool = True,
    config: dict | None = None,
) -> RunRecord:
    """Deterministic EDM sampler (Euler step plus Heun correction) with normalized guidance.

    The classifier sees the per-chain normalized state x / |x|; its gradient is
    normalized to unit length and scaled by the schedule value for the step. The
    guidance displacement is kept through the Heun correction.
    """
    mix = denoiser.mixture
    d = mix.dim
    y = _labels(y, n, mix.K)
    c = y if conditional else None
    N = grid.N
    if cfg is not None and cfg.schedule.T != N:
        raise ValueError(f"guidance schedule has T={cfg.schedule.T}, grid has N={N}")
    x = grid.t[0] * chain_noise(seed, n, (d,))
    rec = _Recorder(N, n, d, keep_states)

    for i in range(N):
        t_cur, t_next = float(grid.t[i]), float(grid.t[i + 1])
        denoised = denoiser.edm_denoise(x, t_cur, c)
        d_cur = (x - denoised) / t_cur
        x_next = x + (t_next - t_cur) * d_cur

        shift = None
        scale = guidance_scale_at(cfg.schedule, N - i) if cfg is not None else 0.0
        if cfg is not None and scale != 0.0:
            xnorm = np.linalg.norm(x, axis=1, keepdims=True)
            if np.any(xnorm == 0):
                raise SamplingError(f"zero-norm sample at grid index {i}; cannot normalize")
            ev = guidance_eval(cfg.classifier, x / xnorm, y, cfg.temps)
            gnorm = np.linalg.norm(ev.grad, axis=1, keepdims=True)
            if not np.all(np.isfinite(gnorm)):
                raise SamplingError(f"non-finite classifier gradient at grid index {i}")
            if np.any(gnorm == 0):
                raise SamplingError(f"zero classifier gradient at grid index {i}; cannot normalize")
            shift = scale * (ev.grad / gnorm)
            conf = np.exp(ev.logits - ev.logits.max(axis=1, keepdims=True))
            conf = conf[np.arange(n), y] / conf.sum(axis=1)
            rec.put(i, i, t_cur, x, denoised, scale, gnorm[:, 0], shift, conf)
            x_next = x_next + shift
        else:
            rec.put(i, i, t_cur, x, denoised, scale)

        if t_next != 0.0:
            d_next = (x_next - denoiser.edm_denoise(x_next, t_next, c)) / t_next
            x_next = x + (t_next - t_cur) * (0.5 * d_cur + 0.5 * d_next)
            if shift is not None:
                x_next = x_next + shift
        x = x_next
        _check_state(x, i)

    return rec.finish("edm", x, y, seed, config)


def cfg_sample(
    denoiser: AnalyticDenoiser,
    s: float,
    sched: NoiseSchedule,
    y,
    n: int,
    seed: int,
    cfg_guidance: GuidanceConfig | None = None,
    keep_states: bool = True,
    config: dict | None = None,
) -> RunRecord:
    """Classifier-free guidance, optionally with a normalized classifier gradient injected.

    eps* = eps_c + (s - 1) (delta - gamma_t * gbar), delta = eps_c - eps_uncond
    (taken from :meth:`AnalyticDenoiser.eps_difference`),
    gbar = g / |g| * |delta|. The minus sign converts the classifier gradient
    (an ascent direction on log p(y|x)) into noise space, where eps points
    against the score.
    """
    if s < 1:
        raise ValueError(f"classifier-free scale must be >= 1, got {s!r}")
    if cfg_guidance is not None and cfg_guidance.normalization != "match_cfg_delta":
        raise ValueError("classifier injection into CFG uses normalization='match_cfg_delta'")
    mix = denoiser.mixture
    d = mix.dim
    y = _labels(y, n, mix.K)
    T = sched.T
    tape = chain_noise(seed, n, (T + 1, d))
    x = tape[:, 0].copy()
    rec = _Recorder(T, n, d, keep_states)

    for k, t in enumerate(range(T, 0, -1)):
        eps_c = denoiser.eps(x, t, y)
        delta = denoiser.eps_difference(x, t, y)
        x0 = predicted_x0(x, eps_c, sched, t)
        if cfg_guidance is not None:
            out = compute_guidance(
                cfg_guidance, x, eps_c, t, sched, y,
                eps_fn=lambda z, t=t: denoiser.eps(z, t, y),
                delta_eps_norm=np.linalg.norm(delta, axis=1),
            )
            rec.put(k, t, sched.alpha_bar_at(t), x, x0, out.scale, out.grad_norm,
                    out.gradient, out.confidence)
            eps_star = eps_c + (s - 1.0) * (delta - out.gradient)
        else:
            rec.put(k, t, sched.alpha_bar_at(t), x, x0)
            eps_star = eps_c + (s - 1.0) * delta
        mu = denoiser.mean(x, t, eps_star)
        x = mu + sched.sigma_at(t) * tape[:, k + 1] if t > 1 else mu
        _check_state(x, t)

    return rec.finish("cfg", x, y, seed, config)

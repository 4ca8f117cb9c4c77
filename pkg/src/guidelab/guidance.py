"""Per-step classifier guidance vectors."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Literal

import numpy as np
from scipy.special import softmax

from guidelab.classifier import Classifier, TemperedLogits, guidance_eval
from guidelab.schedule import GuidanceSchedule, NoiseSchedule, guidance_scale_at

InputKind = Literal["noisy_sample", "predicted_x0"]
Normalization = Literal["none", "unit_gradient", "match_cfg_delta"]


class GuidanceError(ArithmeticError):
    """The classifier produced a non-finite gradient."""


@dataclass(frozen=True)
class GuidanceConfig:
    classifier: Classifier
    schedule: GuidanceSchedule
    temps: TemperedLogits = field(default_factory=TemperedLogits)
    input: InputKind = "predicted_x0"
    normalization: Normalization = "none"
    recurrence: int = 1
    # multiply predicted-x0 gradients by d x0_hat / d x_t = 1 / sqrt(abar_t)
    chain_rule: bool = False

    def __post_init__(self) -> None:
        if self.input not in ("noisy_sample", "predicted_x0"):
            raise ValueError(f"unknown classifier input {self.input!r}")
        if self.normalization not in ("none", "unit_gradient", "match_cfg_delta"):
            raise ValueError(f"unknown normalization {self.normalization!r}")
        if int(self.recurrence) != self.recurrence or self.recurrence < 1:
            raise ValueError(f"recurrence must be an integer >= 1, got {self.recurrence!r}")


@dataclass
class GuidanceStepOutput:
    gradient: np.ndarray      # (n, d) vector added to the reverse mean
    scale: float
    grad_norm: np.ndarray     # |g| of the raw classifier gradient, per chain
    logit_margin: np.ndarray  # f_y minus the best other logit
    confidence: np.ndarray    # softmax(f)_y at the classifier input
    classifier_input: np.ndarray


def predicted_x0(x_t, eps, sched: NoiseSchedule, t: int) -> np.ndarray:
    """Invert the forward marginal: (x_t - sqrt(1 - abar_t) eps) / sqrt(abar_t)."""
    abar = sched.alpha_bar_at(t)
    return (np.asarray(x_t) - np.sqrt(1.0 - abar) * np.asarray(eps)) / np.sqrt(abar)


def _normalize(g: np.ndarray, mode: Normalization, target_norm) -> np.ndarray:
    if mode == "none":
        return g
    norm = np.linalg.norm(g, axis=1, keepdims=True)
    safe = np.where(norm > 0, norm, 1.0)
    unit = np.where(norm > 0, g / safe, 0.0)
    if mode == "unit_gradient":
        return unit
    if target_norm is None:
        raise ValueError("match_cfg_delta normalization needs the noise-difference norm")
    return unit * np.asarray(target_norm, dtype=np.float64).reshape(-1, 1)


def _diagnostics(logits: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    rows = np.arange(logits.shape[0])
    conf = softmax(logits, axis=1)[rows, y]
    if logits.shape[1] == 1:
        return np.full(rows.size, np.inf), conf
    others = logits.copy()
    others[rows, y] = -np.inf
    return logits[rows, y] - others.max(axis=1), conf


def _check_finite(g: np.ndarray, inp: np.ndarray, t: int) -> None:
    bad = ~np.all(np.isfinite(g), axis=1)
    if np.any(bad):
        i = int(np.flatnonzero(bad)[0])
        raise GuidanceError(
            f"non-finite classifier gradient at step {t} "
            f"(chain {i}, input norm {np.linalg.norm(inp[i]):.6g})"
        )


def compute_guidance(
    cfg: GuidanceConfig,
    x_t,
    eps,
    t: int,
    sched: NoiseSchedule,
    y,
    eps_fn: Callable[[np.ndarray], np.ndarray] | None = None,
    delta_eps_norm=None,
) -> GuidanceStepOutput:
    """Scaled guidance vector for DDPM step ``t``.

    With ``recurrence > 1`` the vector is re-evaluated after provisionally moving
    the sample by the accumulated guidance; ``eps_fn`` supplies the fresh noise
    estimate at the moved sample, from which x0_hat is re-derived.
    """
    x_t = np.atleast_2d(np.asarray(x_t, dtype=np.float64))
    eps = np.atleast_2d(np.asarray(eps, dtype=np.float64))
    n = x_t.shape[0]
    y = np.broadcast_to(np.asarray(y, dtype=np.int64), (n,))
    if cfg.recurrence > 1 and eps_fn is None:
        raise ValueError("recurrent guidance needs eps_fn to re-derive the denoised sample")

    scale = guidance_scale_at(cfg.schedule, t)
    abar = sched.alpha_bar_at(t)
    total = np.zeros_like(x_t)
    x, e = x_t, eps
    for r in range(cfg.recurrence):
        if r > 0:
            x = x_t + total
            e = np.atleast_2d(eps_fn(x))
        inp = predicted_x0(x, e, sched, t) if cfg.input == "predicted_x0" else x
        ev = guidance_eval(cfg.classifier, inp, y, cfg.temps)
        g = ev.grad
        if r == 0:
            first = (inp, ev, np.linalg.norm(g, axis=1))
        if scale == 0.0:
            break
        _check_finite(g, inp, t)
        if cfg.chain_rule and cfg.input == "predicted_x0":
            g = g / np.sqrt(abar)
        total = total + scale * _normalize(g, cfg.normalization, delta_eps_norm)

    inp, ev, gnorm = first
    margin, conf = _diagnostics(ev.logits, y)
    return GuidanceStepOutput(total, scale, gnorm, margin, conf, inp)


class IdentityDecoder:
    def __call__(self, z: np.ndarray) -> np.ndarray:
        return np.asarray(z, dtype=np.float64)

    def vjp(self, z: np.ndarray, v: np.ndarray) -> np.ndarray:
        return np.asarray(v, dtype=np.float64)


class LinearDecoder:
    """z -> A z for a fixed matrix A of shape (out_dim, latent_dim)."""

    def __init__(self, A):
        self.A = np.atleast_2d(np.asarray(A, dtype=np.float64))

    def __call__(self, z: np.ndarray) -> np.ndarray:
        z = np.atleast_2d(z)
        if z.shape[1] != self.A.shape[1]:
            raise ValueError(f"latent dimension {z.shape[1]} != decoder input {self.A.shape[1]}")
        return z @ self.A.T

    def vjp(self, z: np.ndarray, v: np.ndarray) -> np.ndarray:
        return np.atleast_2d(v) @ self.A


def compute_guidance_through_decoder(
    cfg: GuidanceConfig, z, decoder, t: int, y, delta_eps_norm=None
) -> GuidanceStepOutput:
    """Guidance with respect to a latent ``z`` when the classifier sees ``decoder(z)``.

    ``z`` is the latent the classifier input is decoded from (e.g. the predicted
    clean latent); the decoder provides ``vjp(z, v)``. Single evaluation only.
    """
    if cfg.recurrence != 1:
        raise ValueError("recurrent guidance is not defined through a decoder")
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    x = np.atleast_2d(decoder(z))
    if x.shape[1] != cfg.classifier.dim:
        raise ValueError(
            f"decoder output dimension {x.shape[1]} != classifier input {cfg.classifier.dim}"
        )
    n = z.shape[0]
    y = np.broadcast_to(np.asarray(y, dtype=np.int64), (n,))
    scale = guidance_scale_at(cfg.schedule, t)
    ev = guidance_eval(cfg.classifier, x, y, cfg.temps)
    g = np.atleast_2d(decoder.vjp(z, ev.grad))
    gnorm = np.linalg.norm(g, axis=1)
    margin, conf = _diagnostics(ev.logits, y)
    if scale == 0.0:
        return GuidanceStepOutput(np.zeros_like(z), scale, gnorm, margin, conf, x)
    _check_finite(g, z, t)
    out = scale * _normalize(g, cfg.normalization, delta_eps_norm)
    return GuidanceStepOutput(out, scale, gnorm, margin, conf, x)

"""Time discretizations for the DDPM and EDM samplers and the guidance scale schedule.

DDPM steps are 1-indexed (t = 1..T) as in the usual notation; the arrays on
:class:`NoiseSchedule` are stored 0-indexed, so ``beta[t - 1]`` is beta_t.
Accessors taking a step ``t`` accept ``t = 0`` where it has a natural meaning
(alpha_bar_0 = 1).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal

import numpy as np

VarianceKind = Literal["beta", "beta_tilde"]
ScheduleMode = Literal["linear", "sine"]


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float64)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class NoiseSchedule:
    """Discrete variance-preserving coefficient tables.

    ``variance`` holds the reverse-process variance per step (beta_t or the
    posterior beta_tilde_t) and ``sigma`` its square root, the standard
    deviation of the noise injected by ancestral sampling.
    """

    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    variance: np.ndarray
    sigma: np.ndarray
    variance_kind: VarianceKind = "beta"

    def _check_step(self, t: int, allow_zero: bool = False) -> None:
        lo = 0 if allow_zero else 1
        if not lo <= t <= self.T:
            raise IndexError(f"step {t} outside [{lo}, {self.T}]")

    def beta_at(self, t: int) -> float:
        self._check_step(t)
        return float(self.beta[t - 1])

    def alpha_at(self, t: int) -> float:
        self._check_step(t)
        return float(self.alpha[t - 1])

    def alpha_bar_at(self, t: int) -> float:
        self._check_step(t, allow_zero=True)
        return 1.0 if t == 0 else float(self.alpha_bar[t - 1])

    def variance_at(self, t: int) -> float:
        self._check_step(t)
        return float(self.variance[t - 1])

    def sigma_at(self, t: int) -> float:
        self._check_step(t)
        return float(self.sigma[t - 1])


def make_linear_schedule(
    T: int,
    beta_start: float = 1e-4,
    beta_end: float = 0.02,
    variance: VarianceKind = "beta",
) -> NoiseSchedule:
    """Linear beta schedule with derived alpha, alpha_bar and reverse variances.

    With ``variance="beta_tilde"`` the posterior variance
    ``(1 - abar_{t-1}) / (1 - abar_t) * beta_t`` is used, except that step 1
    (where it is exactly zero) takes the step-2 value so every step keeps a
    positive standard deviation.
    """
    if int(T) != T or T < 1:
        raise ValueError(f"T must be a positive integer, got {T!r}")
    T = int(T)
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(
            f"need 0 < beta_start <= beta_end < 1, got {beta_start!r}, {beta_end!r}"
        )
    if variance not in ("beta", "beta_tilde"):
        raise ValueError(f"unknown variance kind {variance!r}")

    if T == 1:
        beta = np.array([beta_start], dtype=np.float64)
    else:
        beta = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)

    if variance == "beta":
        var = beta.copy()
    else:
        abar_prev = np.concatenate([[1.0], alpha_bar[:-1]])
        var = (1.0 - abar_prev) / (1.0 - alpha_bar) * beta
        var[0] = var[1] if T > 1 else beta[0]

    return NoiseSchedule(
        T=T,
        beta=_frozen(beta),
        alpha=_frozen(alpha),
        alpha_bar=_frozen(alpha_bar),
        variance=_frozen(var),
        sigma=_frozen(np.sqrt(var)),
        variance_kind=variance,
    )


@dataclass(frozen=True)
class EdmTimeGrid:
    """Noise levels ``t[0] = sigma_max > ... > t[N-1] = sigma_min > t[N] = 0``."""

    N: int
    t: np.ndarray
    rho: float
    sigma_min: float
    sigma_max: float


def make_edm_grid(
    N: int, sigma_min: float = 0.002, sigma_max: float = 80.0, rho: float = 7.0
) -> EdmTimeGrid:
    if int(N) != N or N < 2:
        raise ValueError(f"N must be an integer >= 2, got {N!r}")
    if sigma_min <= 0 or sigma_max <= 0:
        raise ValueError("noise levels must be positive")
    if not sigma_min < sigma_max:
        raise ValueError(f"need sigma_min < sigma_max, got {sigma_min!r}, {sigma_max!r}")
    if rho <= 0:
        raise ValueError(f"rho must be positive, got {rho!r}")
    N = int(N)
    i = np.arange(N, dtype=np.float64)
    inv = 1.0 / rho
    levels = (sigma_max**inv + i / (N - 1) * (sigma_min**inv - sigma_max**inv)) ** rho
    t = np.concatenate([levels, [0.0]])
    return EdmTimeGrid(N=N, t=_frozen(t), rho=float(rho), sigma_min=float(sigma_min),
                       sigma_max=float(sigma_max))


@dataclass(frozen=True)
class GuidanceSchedule:
    """Per-step guidance scale ``scale * (base_t + gamma * base_T * sin(pi t / T))``.

    ``base`` has length T + 1 and is indexed by t = 0..T. ``scale`` is an
    overall multiplier (1 leaves the base schedule untouched).
    """

    base: np.ndarray
    gamma: float = 0.0
    mode: ScheduleMode = "linear"
    scale: float = 1.0
    T: int = field(init=False)

    def __post_init__(self) -> None:
        base = _frozen(self.base)
        if base.ndim != 1 or base.size < 2:
            raise ValueError("base must be a 1-D array with at least two entries")
        if not np.all(np.isfinite(base)):
            raise ValueError("base schedule must be finite")
        if self.mode not in ("linear", "sine"):
            raise ValueError(f"unknown schedule mode {self.mode!r}")
        if self.gamma < 0:
            raise ValueError(f"gamma must be >= 0, got {self.gamma!r}")
        object.__setattr__(self, "base", base)
        object.__setattr__(self, "T", base.size - 1)

    @classmethod
    def from_noise_schedule(
        cls, sched: NoiseSchedule, gamma: float = 0.0, mode: ScheduleMode = "sine",
        scale: float = 1.0,
    ) -> "GuidanceSchedule":
        # base_t is the reverse variance at step t; t = 0 reuses step 1.
        base = np.concatenate([[sched.variance[0]], sched.variance])
        return cls(base=base, gamma=gamma, mode=mode, scale=scale)

    @classmethod
    def constant(
        cls, value: float, T: int, gamma: float = 0.0, mode: ScheduleMode = "sine",
        scale: float = 1.0,
    ) -> "GuidanceSchedule":
        return cls(base=np.full(T + 1, float(value)), gamma=gamma, mode=mode, scale=scale)


def guidance_scale_at(sched: GuidanceSchedule, t: int, T: int | None = None) -> float:
    T = sched.T if T is None else T
    if T != sched.T:
        raise ValueError(f"schedule has T={sched.T}, asked for T={T}")
    if not 0 <= t <= T:
        raise IndexError(f"step {t} outside [0, {T}]")
    value = sched.base[t]
    if sched.mode == "sine" and sched.gamma != 0.0:
        value = value + sched.gamma * sched.base[T] * sine_bump(t, T)
    return float(sched.scale * value)


def sine_bump(t: int, T: int) -> float:
    """sin(pi t / T), folded so that t and T - t give identical floats and both ends are 0."""
    return float(np.sin(np.pi * min(t, T - t) / T))


def guidance_curve(sched: GuidanceSchedule) -> np.ndarray:
    """The scale at every t = 0..T."""
    return np.array([guidance_scale_at(sched, t) for t in range(sched.T + 1)])

"""Closed-form Gaussian-mixture analytics.

Every function accepts a single point of shape ``(d,)`` or a batch ``(n, d)``
and returns results with the matching leading shape. Class indices are
0-based.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal

import numpy as np
from scipy.special import logsumexp, softmax

from guidelab.schedule import EdmTimeGrid, NoiseSchedule


class NotSPDError(ValueError):
    """A covariance matrix failed the symmetric-positive-definite check."""


def _readonly(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class GaussianMixture:
    weights: np.ndarray
    means: np.ndarray
    covs: np.ndarray
    log_weights: np.ndarray = field(init=False, repr=False)
    chol: np.ndarray = field(init=False, repr=False)
    prec: np.ndarray = field(init=False, repr=False)
    logdet: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        w = np.array(self.weights, dtype=np.float64).reshape(-1)
        mu = np.array(self.means, dtype=np.float64)
        if mu.ndim == 1:
            mu = mu[:, None]
        K, d = mu.shape
        cov = np.array(self.covs, dtype=np.float64)
        if cov.ndim == 1 and d == 1:
            cov = cov.reshape(K, 1, 1)
        if w.shape != (K,) or cov.shape != (K, d, d):
            raise ValueError(
                f"inconsistent shapes: weights {w.shape}, means {mu.shape}, covs {cov.shape}"
            )
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(mu)) and np.all(np.isfinite(cov))):
            raise ValueError("mixture parameters must be finite")
        if np.any(w <= 0):
            raise ValueError("mixture weights must be positive")
        if abs(w.sum() - 1.0) > 1e-12:
            raise ValueError(f"mixture weights sum to {w.sum()!r}, not 1")

        chol = np.empty_like(cov)
        for k in range(K):
            if not np.allclose(cov[k], cov[k].T, rtol=0.0, atol=1e-12 * max(1.0, np.abs(cov[k]).max())):
                raise NotSPDError(f"covariance {k} is not symmetric")
            try:
                chol[k] = np.linalg.cholesky(cov[k])
            except np.linalg.LinAlgError:
                raise NotSPDError(f"covariance {k} is not positive definite") from None
        chol_inv = np.linalg.inv(chol)
        prec = np.einsum("kji,kjl->kil", chol_inv, chol_inv)
        prec = 0.5 * (prec + np.swapaxes(prec, 1, 2))
        logdet = 2.0 * np.log(np.diagonal(chol, axis1=1, axis2=2)).sum(axis=1)

        for name, value in [
            ("weights", w), ("means", mu), ("covs", cov), ("log_weights", np.log(w)),
            ("chol", chol), ("prec", prec), ("logdet", logdet),
        ]:
            object.__setattr__(self, name, _readonly(value))

    @property
    def K(self) -> int:
        return self.means.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    # -- internal helpers ---------------------------------------------------

    def _batch(self, x) -> tuple[np.ndarray, bool]:
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim <= 1
        xb = np.atleast_2d(x)
        if self.dim == 1 and x.ndim == 1 and x.size > 1:
            # a 1-D mixture evaluated at a vector of scalars
            xb, single = x[:, None], False
        if xb.ndim != 2 or xb.shape[1] != self.dim:
            raise ValueError(f"expected points of dimension {self.dim}, got shape {x.shape}")
        if not np.all(np.isfinite(xb)):
            raise ValueError("input points must be finite")
        return xb, single

    def component_scores(self, x) -> np.ndarray:
        """Sigma_k^{-1} (mu_k - x) for every component, shape (n, K, d)."""
        xb, _ = self._batch(x)
        diff = self.means[None, :, :] - xb[:, None, :]
        return np.einsum("kij,nkj->nki", self.prec, diff)

    def _log_joint_and_scores(self, xb: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        diff = self.means[None, :, :] - xb[:, None, :]
        scores = np.einsum("kij,nkj->nki", self.prec, diff)
        maha = np.einsum("nki,nki->nk", diff, scores)
        log_norm = -0.5 * (self.dim * np.log(2.0 * np.pi) + self.logdet)
        return self.log_weights + log_norm - 0.5 * maha, scores

    # -- public operations --------------------------------------------------

    def log_joint(self, x) -> np.ndarray:
        """log(b_k f_k(x)) for every component: shape (n, K) or (K,)."""
        xb, single = self._batch(x)
        lj, _ = self._log_joint_and_scores(xb)
        return lj[0] if single else lj

    def log_density(self, x):
        xb, single = self._batch(x)
        lj, _ = self._log_joint_and_scores(xb)
        out = logsumexp(lj, axis=1)
        return float(out[0]) if single else out

    def posterior(self, x) -> np.ndarray:
        xb, single = self._batch(x)
        lj, _ = self._log_joint_and_scores(xb)
        post = softmax(lj, axis=1)
        return post[0] if single else post

    def score(self, x) -> np.ndarray:
        xb, single = self._batch(x)
        lj, scores = self._log_joint_and_scores(xb)
        w = softmax(lj, axis=1)
        out = np.einsum("nk,nki->ni", w, scores)
        return out[0] if single else out

    def log_posterior_grad(self, x, l) -> np.ndarray:
        """grad_x log P(Z=l | x) = Sigma_l^{-1}(mu_l - x) - score(x)."""
        xb, single = self._batch(x)
        lj, scores = self._log_joint_and_scores(xb)
        w = softmax(lj, axis=1)
        l = self._labels(l, xb.shape[0])
        out = self._gap_sum(w, scores, l)
        return out[0] if single else out

    def conditional_grad(self, x, l) -> np.ndarray:
        """Exact grad_x P(Z=l | x) (not merely up to proportionality)."""
        xb, single = self._batch(x)
        lj, scores = self._log_joint_and_scores(xb)
        w = softmax(lj, axis=1)
        l = self._labels(l, xb.shape[0])
        rows = np.arange(xb.shape[0])
        out = w[rows, l][:, None] * self._gap_sum(w, scores, l)
        return out[0] if single else out

    @staticmethod
    def _gap_sum(w: np.ndarray, scores: np.ndarray, l: np.ndarray) -> np.ndarray:
        # sum_k w_k (s_l - s_k); equal to s_l - sum_k w_k s_k but without the
        # cancellation that formula suffers once w_l is close to 1
        own = scores[np.arange(scores.shape[0]), l]
        return np.einsum("nk,nki->ni", w, own[:, None, :] - scores)

    def joint_grad(self, x, l, exact: bool = False) -> np.ndarray:
        """grad_x log(b_l f_l(x)) = Sigma_l^{-1}(mu_l - x).

        With ``exact=True`` returns the gradient of b_l f_l(x) itself.
        """
        xb, single = self._batch(x)
        lj, scores = self._log_joint_and_scores(xb)
        l = self._labels(l, xb.shape[0])
        rows = np.arange(xb.shape[0])
        out = scores[rows, l]
        if exact:
            out = np.exp(lj[rows, l])[:, None] * out
        return out[0] if single else out

    def fading_constant(self, x, l) -> np.ndarray:
        """max_{k != l} |Sigma_l^{-1}(mu_l - x) - Sigma_k^{-1}(mu_k - x)|.

        Bounds the log-posterior gradient: |grad log P(l|x)| <= (1 - P(l|x)) * this.
        For shared covariances it is the largest natural-parameter gap
        |Sigma^{-1}(mu_l - mu_k)| and does not depend on x.
        """
        xb, single = self._batch(x)
        scores = self.component_scores(xb)
        l = self._labels(l, xb.shape[0])
        rows = np.arange(xb.shape[0])
        gaps = np.linalg.norm(scores[rows, l][:, None, :] - scores, axis=2)
        out = gaps.max(axis=1) if self.K > 1 else np.zeros(xb.shape[0])
        return float(out[0]) if single else out

    def sample(self, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        """n draws and their component labels."""
        labels = rng.choice(self.K, size=n, p=self.weights)
        z = rng.standard_normal((n, self.dim))
        x = self.means[labels] + np.einsum("nij,nj->ni", self.chol[labels], z)
        return x, labels

    def component(self, k: int) -> "GaussianMixture":
        return GaussianMixture(np.ones(1), self.means[k : k + 1], self.covs[k : k + 1])

    def to_dict(self) -> dict:
        return {
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "covariances": self.covs.tolist(),
        }

    @classmethod
    def from_dict(cls, spec: dict) -> "GaussianMixture":
        return cls(spec["weights"], spec["means"], spec["covariances"])

    def _labels(self, l, n: int) -> np.ndarray:
        l = np.broadcast_to(np.asarray(l, dtype=np.int64), (n,))
        if np.any((l < 0) | (l >= self.K)):
            raise IndexError(f"class index outside [0, {self.K})")
        return l


@dataclass(frozen=True, eq=False)
class DiffusedMixture(GaussianMixture):
    """A mixture pushed through the forward process.

    ``convention`` is ``"vp"`` (level = alpha_bar) or ``"ve"`` (level = noise std).
    """

    convention: Literal["vp", "ve"] = "vp"
    level: float = 1.0


def diffuse_vp(gmm: GaussianMixture, alpha_bar: float) -> DiffusedMixture:
    if not 0.0 <= alpha_bar <= 1.0:
        raise ValueError(f"alpha_bar must lie in [0, 1], got {alpha_bar!r}")
    if alpha_bar == 1.0:
        means, covs = gmm.means, gmm.covs
    else:
        eye = np.eye(gmm.dim)
        means = np.sqrt(alpha_bar) * gmm.means
        covs = alpha_bar * gmm.covs + (1.0 - alpha_bar) * eye
    return DiffusedMixture(gmm.weights, means, covs, convention="vp", level=float(alpha_bar))


def diffuse_ve(gmm: GaussianMixture, sigma: float) -> DiffusedMixture:
    if sigma < 0:
        raise ValueError(f"noise level must be >= 0, got {sigma!r}")
    covs = gmm.covs if sigma == 0 else gmm.covs + sigma**2 * np.eye(gmm.dim)
    return DiffusedMixture(gmm.weights, gmm.means, covs, convention="ve", level=float(sigma))


def diffuse(gmm: GaussianMixture, sched: NoiseSchedule | EdmTimeGrid, t: int) -> DiffusedMixture:
    """Noised mixture at DDPM step ``t`` (0..T) or EDM grid index ``t`` (0..N)."""
    if isinstance(sched, NoiseSchedule):
        return diffuse_vp(gmm, sched.alpha_bar_at(t))
    if isinstance(sched, EdmTimeGrid):
        if not 0 <= t <= sched.N:
            raise IndexError(f"grid index {t} outside [0, {sched.N}]")
        return diffuse_ve(gmm, float(sched.t[t]))
    raise TypeError(f"unsupported schedule type {type(sched).__name__}")

"""Sample-quality metrics against a known mixture."""

from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass

import numpy as np

from guidelab.mixture import GaussianMixture
from guidelab.records import RunRecord


class DegenerateCovarianceWarning(UserWarning):
    pass


def bayes_labels(samples, truth: GaussianMixture) -> np.ndarray:
    return np.argmax(truth.log_joint(np.atleast_2d(samples)), axis=1)


def bayes_accuracy(samples, y: int, truth: GaussianMixture) -> float:
    """Fraction of samples whose Bayes class under ``truth`` is ``y``."""
    samples = np.atleast_2d(samples)
    if samples.shape[0] == 0:
        raise ValueError("empty batch")
    return float(np.mean(bayes_labels(samples, truth) == y))


def _psd_sqrt(a: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(0.5 * (a + a.T))
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def moment_distance(samples, mean, cov) -> float:
    """Squared 2-Wasserstein distance between N(sample mean, sample cov) and N(mean, cov).

    The sample covariance uses the n - 1 normalization. A rank-deficient sample
    covariance is reported with a :class:`DegenerateCovarianceWarning`, not regularized.
    """
    x = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    n, d = x.shape
    if n < d + 1:
        raise ValueError(f"need at least d + 1 = {d + 1} samples, got {n}")
    mean = np.asarray(mean, dtype=np.float64).reshape(d)
    cov = np.asarray(cov, dtype=np.float64).reshape(d, d)
    m_hat = x.mean(axis=0)
    c_hat = np.cov(x, rowvar=False, ddof=1).reshape(d, d)
    if np.linalg.matrix_rank(c_hat) < d:
        warnings.warn("sample covariance is rank deficient", DegenerateCovarianceWarning,
                      stacklevel=2)
    root = _psd_sqrt(cov)
    cross = _psd_sqrt(root @ c_hat @ root)
    mean_term = float(np.sum((m_hat - mean) ** 2))
    cov_term = float(np.trace(c_hat) + np.trace(cov) - 2.0 * np.trace(cross))
    return mean_term + max(cov_term, 0.0)


@dataclass
class QualityReport:
    target: int
    bayes_accuracy: float
    moment_distance: float
    mean_target_loglik: float
    coverage: list[float]  # fraction of samples Bayes-assigned to each class

    def as_row(self) -> dict:
        row = asdict(self)
        cov = row.pop("coverage")
        row.update({f"coverage_{k}": v for k, v in enumerate(cov)})
        return row


def quality_report(samples, y: int, truth: GaussianMixture) -> QualityReport:
    samples = np.atleast_2d(samples)
    labels = bayes_labels(samples, truth)
    comp = truth.component(y)
    return QualityReport(
        target=int(y),
        bayes_accuracy=float(np.mean(labels == y)),
        moment_distance=moment_distance(samples, truth.means[y], truth.covs[y]),
        mean_target_loglik=float(np.mean(comp.log_density(samples))),
        coverage=(np.bincount(labels, minlength=truth.K) / samples.shape[0]).tolist(),
    )


@dataclass
class RunComparison:
    a: QualityReport
    b: QualityReport
    delta: dict  # b minus a, per scalar field


def compare_runs(a: RunRecord, b: RunRecord, truth: GaussianMixture, y: int) -> RunComparison:
    """Quality of two runs against the same target class; deltas are b - a."""
    mix_a = a.config.get("mixture")
    mix_b = b.config.get("mixture")
    if mix_a is not None and mix_b is not None and mix_a != mix_b:
        raise ValueError("runs were generated from different mixtures")
    if a.n != b.n:
        raise ValueError(f"runs have different batch sizes ({a.n} vs {b.n})")
    ra, rb = quality_report(a.samples, y, truth), quality_report(b.samples, y, truth)
    delta = {
        key: getattr(rb, key) - getattr(ra, key)
        for key in ("bayes_accuracy", "moment_distance", "mean_target_loglik")
    }
    delta["coverage"] = [vb - va for va, vb in zip(ra.coverage, rb.coverage)]
    return RunComparison(ra, rb, delta)

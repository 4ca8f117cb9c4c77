"""Expected calibration error along sampling trajectories, and the
density-vs-score convergence diagnostic."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np
from scipy.special import softmax

from guidelab.classifier import Classifier
from guidelab.mixture import GaussianMixture
from guidelab.records import RunRecord


@dataclass(frozen=True)
class ReliabilityBins:
    """Equal-width confidence bins; bin m covers (m/M, (m+1)/M], bin 0 also holds 0."""

    M: int
    counts: np.ndarray
    confidence: np.ndarray  # mean confidence per bin (nan when empty)
    accuracy: np.ndarray    # empirical accuracy per bin (nan when empty)

    @property
    def edges(self) -> np.ndarray:
        return bin_edges(self.M)


@dataclass(frozen=True)
class CalibrationCurve:
    t: np.ndarray
    ece: np.ndarray
    bins: tuple[ReliabilityBins, ...]

    @property
    def integral(self) -> float:
        """Mean of ECE_t over the recorded steps."""
        return float(self.ece.mean())


def bin_edges(M: int) -> np.ndarray:
    return np.arange(M + 1) / M


def bin_index(confidences: np.ndarray, M: int) -> np.ndarray:
    idx = np.searchsorted(bin_edges(M), confidences, side="left") - 1
    return np.clip(idx, 0, M - 1)


def ece(confidences, correct, M: int = 10) -> tuple[float, ReliabilityBins]:
    """Binned |accuracy - confidence| weighted by bin occupancy."""
    conf = np.asarray(confidences, dtype=np.float64).reshape(-1)
    corr = np.asarray(correct, dtype=bool).reshape(-1)
    if conf.size == 0:
        raise ValueError("ece needs at least one prediction")
    if conf.shape != corr.shape:
        raise ValueError("confidences and correctness must have equal length")
    if int(M) != M or M < 1:
        raise ValueError(f"M must be a positive integer, got {M!r}")
    if np.any((conf < 0) | (conf > 1)) or not np.all(np.isfinite(conf)):
        raise ValueError("confidences must lie in [0, 1]")

    n = conf.size
    idx = bin_index(conf, M)
    counts = np.bincount(idx, minlength=M)
    conf_sum = np.bincount(idx, weights=conf, minlength=M)
    acc_sum = np.bincount(idx, weights=corr.astype(np.float64), minlength=M)
    occupied = counts > 0
    mean_conf = np.full(M, np.nan)
    mean_acc = np.full(M, np.nan)
    mean_conf[occupied] = conf_sum[occupied] / counts[occupied]
    mean_acc[occupied] = acc_sum[occupied] / counts[occupied]
    gaps = np.abs(mean_acc[occupied] - mean_conf[occupied])
    value = float(np.sum(counts[occupied] / n * gaps))
    return value, ReliabilityBins(M, counts, mean_conf, mean_acc)


def top_class(clf: Classifier, x) -> tuple[np.ndarray, np.ndarray]:
    """(confidence of the predicted class, predicted class)."""
    p = softmax(clf.logits(np.atleast_2d(x)), axis=1)
    return p.max(axis=1), p.argmax(axis=1)


def trajectory_ece(
    run: RunRecord,
    clf: Classifier,
    true_mixture: GaussianMixture,
    input: Literal["noisy_sample", "predicted_x0"] = "predicted_x0",
    M: int = 10,
    labels: Literal["conditioning", "bayes_final"] = "conditioning",
) -> CalibrationCurve:
    """ECE_t of ``clf`` at every recorded step of ``run``.

    ``labels="conditioning"`` scores against each chain's conditioning class;
    ``"bayes_final"`` uses the Bayes class of the chain's final sample under
    ``true_mixture``.
    """
    if run.num_steps == 0:
        raise ValueError("run has no steps")
    if input not in ("noisy_sample", "predicted_x0"):
        raise ValueError(f"unknown classifier input {input!r}")
    states = run.x0s if input == "predicted_x0" else run.xs
    if states is None:
        raise ValueError("run was recorded without per-step states")
    if clf.dim != true_mixture.dim or states.shape[-1] != clf.dim:
        raise ValueError("classifier, mixture and run dimensions disagree")
    if labels == "conditioning":
        truth = run.labels
    elif labels == "bayes_final":
        truth = np.argmax(true_mixture.log_joint(run.samples), axis=1)
    else:
        raise ValueError(f"unknown labeling rule {labels!r}")

    values, bins = [], []
    for k in range(run.num_steps):
        conf, pred = top_class(clf, states[k])
        v, b = ece(conf, pred == truth, M)
        values.append(v)
        bins.append(b)
    return CalibrationCurve(run.t.copy(), np.array(values), tuple(bins))


# -- density vs score convergence ---------------------------------------------


def default_directions(K: int, d: int) -> np.ndarray:
    """Unit shift direction per component, rotating in the first coordinate plane."""
    out = np.zeros((K, d))
    if d == 1:
        out[:, 0] = 1.0
        return out
    angles = 2.0 * np.pi * (np.arange(K) + 0.25) / K
    out[:, 0], out[:, 1] = np.cos(angles), np.sin(angles)
    return out


def shifted_mixture(p: GaussianMixture, delta: float, directions=None) -> GaussianMixture:
    dirs = default_directions(p.K, p.dim) if directions is None else np.asarray(directions, float)
    return GaussianMixture(p.weights, p.means + delta * dirs, p.covs)


@dataclass(frozen=True)
class Prop1Row:
    delta: float
    density_l2: float
    score_l2: float


def _box(p: GaussianMixture, width: float) -> tuple[np.ndarray, np.ndarray]:
    sd = np.sqrt(np.diagonal(p.covs, axis1=1, axis2=2))
    return (p.means - width * sd).min(axis=0), (p.means + width * sd).max(axis=0)


def prop1_diagnostic(
    p: GaussianMixture,
    deltas,
    points_per_axis: int = 64,
    directions=None,
    width: float = 6.0,
    chunk: int = 65536,
) -> list[Prop1Row]:
    """L2 distances between p and mean-shifted copies p_n, for densities and scores.

    Both norms use midpoint quadrature on a box extending ``width`` standard
    deviations past every component mean (the box is fixed by ``p`` alone).
    """
    if int(points_per_axis) != points_per_axis or points_per_axis < 32:
        raise ValueError("quadrature needs at least 32 points per axis")
    deltas = [float(v) for v in deltas]
    if any(v < 0 for v in deltas):
        raise ValueError("perturbation sizes must be non-negative")
    lo, hi = _box(p, width)
    h = (hi - lo) / points_per_axis
    axes = [lo[j] + h[j] * (np.arange(points_per_axis) + 0.5) for j in range(p.dim)]
    cell = float(np.prod(h))
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, p.dim)

    rows = []
    for delta in deltas:
        q = shifted_mixture(p, delta, directions)
        dens = 0.0
        scor = 0.0
        for start in range(0, grid.shape[0], chunk):
            g = grid[start : start + chunk]
            dens += np.sum((np.exp(p.log_density(g)) - np.exp(q.log_density(g))) ** 2)
            scor += np.sum((p.score(g) - q.score(g)) ** 2)
        rows.append(Prop1Row(delta, float(np.sqrt(dens * cell)), float(np.sqrt(scor * cell))))
    return rows

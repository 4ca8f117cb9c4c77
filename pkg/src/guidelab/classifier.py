"""Logit providers for guidance and the tempered guidance objective.

A classifier exposes ``logits(x)`` and ``forward(x) -> (logits, backward)``,
where ``backward(v)`` returns the input gradient of ``sum_k v[:, k] * logits[:, k]``
(a vector-Jacobian product). That is all guidance needs.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Literal, Protocol

import numpy as np
from scipy.special import expit, logsumexp, softmax

from guidelab.mixture import GaussianMixture

Activation = Literal["relu", "softplus"]
Backward = Callable[[np.ndarray], np.ndarray]


class Classifier(Protocol):
    num_classes: int
    dim: int

    def logits(self, x: np.ndarray) -> np.ndarray: ...

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, Backward]: ...


@dataclass(frozen=True)
class TemperedLogits:
    """Joint temperature ``tau1`` and marginal temperature ``tau2``."""

    tau1: float = 1.0
    tau2: float = 1.0

    def __post_init__(self) -> None:
        if not self.tau1 > 0:
            raise ValueError(f"tau1 must be > 0, got {self.tau1!r}")
        if not self.tau2 >= 0:
            raise ValueError(f"tau2 must be >= 0, got {self.tau2!r}")


def _as_batch(x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    return np.atleast_2d(x), x.ndim == 1


class BayesClassifier:
    """Exact classifier of a mixture; logits are the log-joints log(b_l f_l(x))."""

    def __init__(self, mixture: GaussianMixture):
        self.mixture = mixture
        self.num_classes = mixture.K
        self.dim = mixture.dim

    def logits(self, x) -> np.ndarray:
        return self.mixture.log_joint(x)

    def forward(self, x) -> tuple[np.ndarray, Backward]:
        xb, _ = _as_batch(x)
        f = self.mixture.log_joint(xb)
        jac = self.mixture.component_scores(xb)  # (n, K, d): grad of each logit

        def backward(v: np.ndarray) -> np.ndarray:
            return np.einsum("nk,nki->ni", v, jac)

        return f, backward


def softplus(z: np.ndarray, beta: float) -> np.ndarray:
    """(1/beta) log(1 + exp(beta z)), evaluated without overflow."""
    return np.logaddexp(0.0, beta * z) / beta


@dataclass(frozen=True, eq=False)
class SmallNet:
    """Fully connected classifier ``d -> h1 -> h2 -> K``.

    The activation applies to the hidden layers only; the logit layer is affine.
    """

    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]
    activation: Activation = "relu"
    beta: float = 3.0
    sizes: tuple[int, ...] = field(init=False)

    def __post_init__(self) -> None:
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("need matching, nonempty weight and bias lists")
        ws = tuple(np.array(w, dtype=np.float64) for w in self.weights)
        bs = tuple(np.array(b, dtype=np.float64).reshape(-1) for b in self.biases)
        sizes = [ws[0].shape[0]]
        for w, b in zip(ws, bs):
            if w.ndim != 2 or w.shape[0] != sizes[-1] or b.shape != (w.shape[1],):
                raise ValueError("layer shapes do not chain")
            sizes.append(w.shape[1])
        if self.activation not in ("relu", "softplus"):
            raise ValueError(f"unknown activation {self.activation!r}")
        if not self.beta > 0:
            raise ValueError(f"softplus beta must be > 0, got {self.beta!r}")
        object.__setattr__(self, "weights", ws)
        object.__setattr__(self, "biases", bs)
        object.__setattr__(self, "sizes", tuple(sizes))

    @classmethod
    def init(cls, sizes, seed: int = 0, activation: Activation = "relu", beta: float = 3.0) -> "SmallNet":
        rng = np.random.default_rng(seed)
        ws, bs = [], []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            ws.append(rng.standard_normal((fan_in, fan_out)) * np.sqrt(2.0 / fan_in))
            bs.append(np.zeros(fan_out))
        return cls(tuple(ws), tuple(bs), activation, beta)

    @property
    def dim(self) -> int:
        return self.sizes[0]

    @property
    def num_classes(self) -> int:
        return self.sizes[-1]

    def with_activation(self, activation: Activation, beta: float | None = None) -> "SmallNet":
        """Same weights, different hidden activation (post-hoc swap)."""
        return replace(self, activation=activation, beta=self.beta if beta is None else beta)

    def _act(self, z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        if self.activation == "relu":
            return np.maximum(z, 0.0), (z > 0).astype(np.float64)
        return softplus(z, self.beta), expit(self.beta * z)

    def _forward_cache(self, xb: np.ndarray):
        h = xb
        cache = []
        for w, b in zip(self.weights[:-1], self.biases[:-1]):
            a, da = self._act(h @ w + b)
            cache.append((h, da))
            h = a
        logits = h @ self.weights[-1] + self.biases[-1]
        return logits, h, cache

    def logits(self, x) -> np.ndarray:
        xb, single = _as_batch(x)
        out, _, _ = self._forward_cache(xb)
        return out[0] if single else out

    def forward(self, x) -> tuple[np.ndarray, Backward]:
        xb, _ = _as_batch(x)
        logits, _, cache = self._forward_cache(xb)

        def backward(v: np.ndarray) -> np.ndarray:
            g = v @ self.weights[-1].T
            for (h_in, da), w in zip(reversed(cache), reversed(self.weights[:-1])):
                g = (g * da) @ w.T
            return g

        return logits, backward

    def param_grads(self, xb: np.ndarray, dlogits: np.ndarray):
        """Gradients of sum(dlogits * logits) with respect to weights and biases."""
        logits, h_last, cache = self._forward_cache(xb)
        gw = [h_last.T @ dlogits]
        gb = [dlogits.sum(axis=0)]
        g = dlogits @ self.weights[-1].T
        for (h_in, da), w in zip(reversed(cache), reversed(self.weights[:-1])):
            g = g * da
            gw.append(h_in.T @ g)
            gb.append(g.sum(axis=0))
            g = g @ w.T
        return gw[::-1], gb[::-1]


def guidance_logprob(clf: Classifier, x, y, temps: TemperedLogits) -> np.ndarray:
    """tau1 f_y(x) - log sum_i exp(tau2 f_i(x)); at tau2 = 0 the marginal is log K."""
    xb, single = _as_batch(x)
    f = clf.logits(xb)
    y = np.broadcast_to(np.asarray(y, dtype=np.int64), (xb.shape[0],))
    out = temps.tau1 * f[np.arange(xb.shape[0]), y] - logsumexp(temps.tau2 * f, axis=1)
    return float(out[0]) if single else out


@dataclass
class GuidanceEval:
    grad: np.ndarray
    logits: np.ndarray
    value: np.ndarray


def guidance_eval(clf: Classifier, x, y, temps: TemperedLogits) -> GuidanceEval:
    """Value, input gradient and raw logits of the tempered guidance objective (batched)."""
    xb, _ = _as_batch(x)
    n = xb.shape[0]
    f, backward = clf.forward(xb)
    y = np.broadcast_to(np.asarray(y, dtype=np.int64), (n,))
    rows = np.arange(n)
    p2 = softmax(temps.tau2 * f, axis=1)
    v = -temps.tau2 * p2
    v[rows, y] += temps.tau1
    value = temps.tau1 * f[rows, y] - logsumexp(temps.tau2 * f, axis=1)
    return GuidanceEval(grad=backward(v), logits=f, value=value)


def guidance_grad(clf: Classifier, x, y, temps: TemperedLogits) -> np.ndarray:
    """Exact x-gradient of :func:`guidance_logprob`."""
    x = np.asarray(x, dtype=np.float64)
    g = guidance_eval(clf, x, y, temps).grad
    return g[0] if x.ndim == 1 else g


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainResult:
    net: SmallNet
    losses: list[float]


def train(
    net: SmallNet,
    x: np.ndarray,
    y: np.ndarray,
    epochs: int = 200,
    lr: float = 1e-2,
    batch_size: int = 64,
    seed: int = 0,
    decay_at: float = 2.0 / 3.0,
    momentum: float = 0.9,
) -> TrainResult:
    """Minibatch SGD on softmax cross-entropy.

    The learning rate drops by 10x after ``decay_at`` of the epochs. Deterministic
    given ``seed`` and the data order. ``losses`` holds the mean loss per epoch.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if x.ndim != 2 or x.shape[0] == 0 or x.shape[0] != y.shape[0]:
        raise ValueError("need a nonempty (n, d) input with one label per row")
    if x.shape[1] != net.dim:
        raise ValueError(f"inputs have dimension {x.shape[1]}, net expects {net.dim}")
    if np.any((y < 0) | (y >= net.num_classes)):
        raise ValueError(f"labels must lie in [0, {net.num_classes})")

    rng = np.random.default_rng(seed)
    ws = [w.copy() for w in net.weights]
    bs = [b.copy() for b in net.biases]
    vw = [np.zeros_like(w) for w in ws]
    vb = [np.zeros_like(b) for b in bs]
    n = x.shape[0]
    losses: list[float] = []
    decay_epoch = int(round(decay_at * epochs))

    for epoch in range(epochs):
        step = lr * (0.1 if epoch >= decay_epoch else 1.0)
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            cur = replace(net, weights=tuple(ws), biases=tuple(bs))
            logits = cur.logits(x[idx])
            logp = logits - logsumexp(logits, axis=1, keepdims=True)
            rows = np.arange(idx.size)
            loss = -logp[rows, y[idx]].sum()
            if not np.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}")
            total += loss
            dlogits = np.exp(logp)
            dlogits[rows, y[idx]] -= 1.0
            dlogits /= idx.size
            gw, gb = cur.param_grads(x[idx], dlogits)
            for i in range(len(ws)):
                vw[i] = momentum * vw[i] - step * gw[i]
                vb[i] = momentum * vb[i] - step * gb[i]
                ws[i] = ws[i] + vw[i]
                bs[i] = bs[i] + vb[i]
        losses.append(total / n)

    return TrainResult(replace(net, weights=tuple(ws), biases=tuple(bs)), losses)


def accuracy(clf: Classifier, x, y) -> float:
    return float(np.mean(np.argmax(clf.logits(x), axis=1) == np.asarray(y)))


# -- weight file format -------------------------------------------------------
#
#   smallnet 1
#   sizes <d> <h1> ... <K>
#   activation <relu|softplus>
#   beta <float>
#   W<i> <rows> <cols>      followed by <rows> lines of <cols> values
#   b<i> <len>              followed by one line of <len> values
#
# Values are written with 17 significant digits, so loading reproduces the
# weights bit for bit.

def _fmt(values) -> str:
    return " ".join(f"{v:.17g}" for v in values)


def save_smallnet(net: SmallNet, path) -> None:
    lines = [
        "smallnet 1",
        "sizes " + " ".join(str(s) for s in net.sizes),
        f"activation {net.activation}",
        f"beta {net.beta:.17g}",
    ]
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        lines.append(f"W{i} {w.shape[0]} {w.shape[1]}")
        lines.extend(_fmt(row) for row in w)
        lines.append(f"b{i} {b.size}")
        lines.append(_fmt(b))
    Path(path).write_text("\n".join(lines) + "\n")


def load_smallnet(path) -> SmallNet:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0].split() != ["smallnet", "1"]:
        raise ValueError(f"{path}: not a smallnet v1 file")
    header = {}
    pos = 1
    for key in ("sizes", "activation", "beta"):
        name, *rest = lines[pos].split()
        if name != key:
            raise ValueError(f"{path}: expected '{key}' on line {pos + 1}")
        header[key] = rest
        pos += 1
    sizes = [int(s) for s in header["sizes"]]
    ws, bs = [], []
    for i in range(len(sizes) - 1):
        tag, rows, cols = lines[pos].split()
        if tag != f"W{i}":
            raise ValueError(f"{path}: expected W{i} on line {pos + 1}")
        rows, cols = int(rows), int(cols)
        w = np.array([[float(v) for v in lines[pos + 1 + r].split()] for r in range(rows)])
        pos += 1 + rows
        tag, length = lines[pos].split()
        if tag != f"b{i}":
            raise ValueError(f"{path}: expected b{i} on line {pos + 1}")
        b = np.array([float(v) for v in lines[pos + 1].split()]) if int(length) else np.zeros(0)
        pos += 2
        if w.shape != (sizes[i], sizes[i + 1]) or b.shape != (sizes[i + 1],):
            raise ValueError(f"{path}: layer {i} shape disagrees with header")
        ws.append(w)
        bs.append(b)
    return SmallNet(tuple(ws), tuple(bs), header["activation"][0], float(header["beta"][0]))

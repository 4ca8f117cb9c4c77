"""Self-verification: closed forms checked against independent numerical oracles."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from guidelab.calibration import ece, prop1_diagnostic
from guidelab.classifier import SmallNet, TemperedLogits, guidance_grad
from guidelab.config import DEFAULT_MIXTURE
from guidelab.mixture import GaussianMixture, NotSPDError, diffuse_vp
from guidelab.samplers import AnalyticDenoiser, cfg_sample, ddpm_guided_sample
from guidelab.schedule import make_linear_schedule

SEED = 20240917


@dataclass
class Check:
    name: str
    value: float
    tolerance: float
    passed: bool
    detail: str = ""


def random_spd(rng: np.random.Generator, d: int) -> np.ndarray:
    a = rng.normal(size=(d, d))
    return a @ a.T / d + 0.3 * np.eye(d)


def random_mixture(rng: np.random.Generator, K: int, d: int, spread: float = 2.0) -> GaussianMixture:
    w = rng.dirichlet(np.ones(K) * 2.0)
    return GaussianMixture(w, rng.normal(scale=spread, size=(K, d)),
                           np.stack([random_spd(rng, d) for _ in range(K)]))


def central_diff(f: Callable[[np.ndarray], float], x: np.ndarray, h: float) -> np.ndarray:
    g = np.zeros_like(x)
    for j in range(x.size):
        e = np.zeros_like(x)
        e[j] = h
        g[j] = (f(x + e) - f(x - e)) / (2.0 * h)
    return g


def rel_err(a: np.ndarray, b: np.ndarray, floor: float = 0.0) -> float:
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), floor, 1e-300))


def _fd_cases(count: int, seed: int):
    """(mixture, point, class) triples with points drawn near the bulk of the mixture."""
    rng = np.random.default_rng(seed)
    for _ in range(count):
        K, d = int(rng.integers(2, 6)), int(rng.integers(1, 5))
        mix = random_mixture(rng, K, d)
        k = int(rng.integers(K))
        x = mix.means[k] + rng.normal(size=d)
        yield mix, x, int(rng.integers(K))


def _posterior_component(mix: GaussianMixture, l: int, complement: bool):
    """P(l|x), or -sum_{k != l} P(k|x) which has the same gradient but keeps full
    relative precision where P(l|x) is close to 1."""
    if not complement:
        return lambda z: mix.posterior(z)[l]
    others = [k for k in range(mix.K) if k != l]
    return lambda z: -mix.posterior(z)[others].sum()


def check_prop2_conditional(count: int = 200, h: float = 1e-5) -> Check:
    """grad P(l|x) vs central differences of the posterior, at every sampled point."""
    worst = 0.0
    for mix, x, l in _fd_cases(count, SEED):
        an = mix.conditional_grad(x, l)
        fd = central_diff(_posterior_component(mix, l, mix.posterior(x)[l] > 0.5), x, h)
        if np.linalg.norm(an) == 0.0 and np.linalg.norm(fd) == 0.0:
            continue
        worst = max(worst, rel_err(fd, an))
    return Check("prop2_conditional_fd", worst, 1e-5, worst < 1e-5)


def check_prop2_joint(count: int = 200, h: float = 1e-5) -> Check:
    worst = 0.0
    for mix, x, l in _fd_cases(count, SEED + 1):
        fd = central_diff(lambda z: mix.log_joint(z)[l], x, h)
        worst = max(worst, rel_err(fd, mix.joint_grad(x, l), floor=1e-3))
        fd = central_diff(lambda z: np.exp(mix.log_joint(z)[l]), x, h)
        an = mix.joint_grad(x, l, exact=True)
        if np.linalg.norm(an) > 1e-6:
            worst = max(worst, rel_err(fd, an))
    return Check("prop2_joint_fd", worst, 1e-5, worst < 1e-5)


def check_eq3_identity(count: int = 200) -> Check:
    """joint-minus-marginal gradient vs the responsibility-weighted mode differences."""
    rng = np.random.default_rng(SEED + 2)
    worst = 0.0
    for _ in range(count):
        K, d = int(rng.integers(2, 6)), int(rng.integers(1, 5))
        mix = random_mixture(rng, K, d)
        x = rng.normal(scale=3.0, size=d)
        l = int(rng.integers(K))
        recon = mix.joint_grad(x, l) - mix.score(x)
        # direct: sum_k P(k|x) (Delta_l - Delta_k) with Delta_k = Sigma_k^{-1}(mu_k - x)
        deltas = np.stack([np.linalg.solve(mix.covs[k], mix.means[k] - x) for k in range(K)])
        lj = np.array([
            np.log(mix.weights[k]) - 0.5 * (mix.means[k] - x) @ deltas[k]
            - 0.5 * np.linalg.slogdet(2 * np.pi * mix.covs[k])[1]
            for k in range(K)
        ])
        post = np.exp(lj - lj.max())
        post /= post.sum()
        direct = (post[:, None] * (deltas[l] - deltas)).sum(axis=0)
        worst = max(worst, rel_err(recon, direct, floor=1.0))
    return Check("eq3_identity", worst, 1e-8, worst < 1e-8)


def check_eps_mu_identity() -> Check:
    """Reverse mean from the noise prediction vs the posterior-mean form in (x_t, x0_hat)."""
    rng = np.random.default_rng(SEED + 3)
    mix = random_mixture(rng, 3, 2)
    sched = make_linear_schedule(250, 4e-4, 0.08, "beta_tilde")
    den = AnalyticDenoiser(mix, sched)
    worst = 0.0
    for t in (2, 10, 60, 125, 249, 250):
        x = rng.normal(size=(64, 2)) * 2.0
        eps = den.eps(x, t)
        ab, ab_prev = sched.alpha_bar_at(t), sched.alpha_bar_at(t - 1)
        b, a = sched.beta_at(t), sched.alpha_at(t)
        x0 = (x - np.sqrt(1 - ab) * eps) / np.sqrt(ab)
        post = (np.sqrt(ab_prev) * b / (1 - ab)) * x0 + (np.sqrt(a) * (1 - ab_prev) / (1 - ab)) * x
        worst = max(worst, rel_err(den.mean(x, t, eps), post))
    return Check("eps_mu_identity", worst, 1e-10, worst < 1e-10)


def brute_force_ece(conf: np.ndarray, correct: np.ndarray, M: int) -> float:
    """Loop-per-bin ECE; bin m holds (m/M, (m+1)/M], with 0 falling in the first bin."""
    n = conf.size
    total = 0.0
    for m in range(M):
        lo, hi = m / M, (m + 1) / M
        members = [i for i in range(n) if (lo < conf[i] <= hi) or (m == 0 and conf[i] == 0.0)]
        if not members:
            continue
        acc = sum(float(correct[i]) for i in members) / len(members)
        cf = sum(float(conf[i]) for i in members) / len(members)
        total += len(members) / n * abs(acc - cf)
    return total


def check_ece(batches: int = 50) -> Check:
    rng = np.random.default_rng(SEED + 4)
    worst = 0.0
    for b in range(batches):
        n, M = int(rng.integers(20, 400)), int(rng.integers(1, 21))
        conf = rng.uniform(size=n)
        if b % 3 == 0:  # exercise exact bin edges
            conf = rng.integers(0, M + 1, size=n) / M
        correct = rng.uniform(size=n) < conf
        worst = max(worst, abs(ece(conf, correct, M)[0] - brute_force_ece(conf, correct, M)))
    return Check("ece_brute_force", worst, 1e-12, worst < 1e-12)


def check_semigroup() -> Check:
    rng = np.random.default_rng(SEED + 5)
    worst = 0.0
    for _ in range(20):
        mix = random_mixture(rng, 3, 3)
        a1, a2 = rng.uniform(0.01, 1.0, size=2)
        two = diffuse_vp(diffuse_vp(mix, a1), a2)
        one = diffuse_vp(mix, a1 * a2)
        worst = max(worst, float(np.max(np.abs(two.means - one.means))),
                    float(np.max(np.abs(two.covs - one.covs))))
    return Check("diffusion_semigroup", worst, 1e-10, worst < 1e-10)


def check_softplus_limit() -> Check:
    rng = np.random.default_rng(SEED + 6)
    relu = SmallNet.init((2, 64, 64, 3), seed=7)
    soft = relu.with_activation("softplus", 1e4)
    x = rng.uniform(-3, 3, size=(1000, 2))
    gap = float(np.max(np.abs(soft.logits(x) - relu.logits(x))))
    # gradient of the tempered objective vs differences, under both activations
    temps = TemperedLogits(1.0, 0.5)
    worst = 0.0
    for net in (relu, soft, relu.with_activation("softplus", 3.0)):
        for x0 in x[:40]:
            # pre-activations within 1e-3 of zero are kinks for relu and near-kinks at beta=1e4
            if _near_kink(relu, x0, 1e-3):
                continue
            g = guidance_grad(net, x0[None], 0, temps)[0]
            fd = central_diff(lambda z: _tempered_value(net, z, 0, temps), x0, 1e-6)
            worst = max(worst, rel_err(fd, g, floor=1e-6))
    ok = gap < 1e-3 and worst < 1e-4
    return Check("softplus_relu_limit", gap, 1e-3, ok, f"grad fd rel err {worst:.2e}")


def _tempered_value(net: SmallNet, z: np.ndarray, y: int, temps: TemperedLogits) -> float:
    f = net.logits(z[None])[0]
    a = temps.tau2 * f
    return float(temps.tau1 * f[y] - (a.max() + np.log(np.exp(a - a.max()).sum())))


def _near_kink(net: SmallNet, x: np.ndarray, margin: float) -> bool:
    if net.activation != "relu":
        return False
    h = x[None]
    for W, b in zip(net.weights[:-1], net.biases[:-1]):
        z = h @ W + b
        if np.min(np.abs(z)) < margin:
            return True
        h = np.maximum(z, 0.0)
    return False


def check_cfg_s1() -> Check:
    mix = GaussianMixture.from_dict(DEFAULT_MIXTURE)
    sched = make_linear_schedule(50, 2e-3, 0.4)
    den = AnalyticDenoiser(mix, sched, conditioning=0.5)
    a = cfg_sample(den, 1.0, sched, 0, 256, seed=11, keep_states=False)
    b = ddpm_guided_sample(den, None, sched, 0, 256, seed=11, conditional=True, keep_states=False)
    same = bool(np.array_equal(a.samples, b.samples))
    diff = float(np.max(np.abs(a.samples - b.samples)))
    return Check("cfg_s1_equivalence", diff, 0.0, same)


def check_prop1() -> Check:
    mix = GaussianMixture.from_dict(DEFAULT_MIXTURE)
    rows = prop1_diagnostic(mix, [0.4, 0.2, 0.1, 0.05], points_per_axis=96)
    dens = [r.density_l2 for r in rows]
    scor = [r.score_l2 for r in rows]
    mono = all(a > b for a, b in zip(dens, dens[1:])) and all(a > b for a, b in zip(scor, scor[1:]))
    fine = prop1_diagnostic(mix, [0.4, 0.2, 0.1, 0.05], points_per_axis=192)
    drift = max(
        max(abs(r.density_l2 - f.density_l2) / f.density_l2,
            abs(r.score_l2 - f.score_l2) / f.score_l2)
        for r, f in zip(rows, fine)
    )
    return Check("prop1_monotone", drift, 1e-2, mono and drift < 1e-2,
                 "value is the relative change under grid refinement")


def check_spd(corrupt: bool = False) -> Check:
    spec = {k: np.array(v, dtype=float) for k, v in DEFAULT_MIXTURE.items()}
    if corrupt:
        spec["covariances"][1] = np.array([[1.0, 2.0], [2.0, 1.0]])
    try:
        GaussianMixture(spec["weights"], spec["means"], spec["covariances"])
    except NotSPDError as exc:
        return Check("spd_covariances", np.nan, 0.0, False, f"NotSPDError: {exc}")
    return Check("spd_covariances", 0.0, 0.0, True)


def run_checks(corrupt_spd: bool = False) -> list[Check]:
    return [
        check_spd(corrupt_spd),
        check_prop2_conditional(),
        check_prop2_joint(),
        check_eq3_identity(),
        check_eps_mu_identity(),
        check_ece(),
        check_semigroup(),
        check_softplus_limit(),
        check_cfg_s1(),
        check_prop1(),
    ]


def format_report(checks: list[Check]) -> str:
    lines = [f"{'check':<24} {'value':>12} {'tolerance':>12}  status"]
    for c in checks:
        status = "PASS" if c.passed else "FAIL"
        line = f"{c.name:<24} {c.value:>12.3e} {c.tolerance:>12.1e}  {status}"
        if c.detail:
            line += f"  ({c.detail})"
        lines.append(line)
    failed = [c.name for c in checks if not c.passed]
    lines.append("all checks passed" if not failed else "failed: " + ", ".join(failed))
    return "\n".join(lines) + "\n"

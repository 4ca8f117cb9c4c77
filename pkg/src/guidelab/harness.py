"""Build samplers from a :class:`RunConfig`, run them, and write run directories."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from guidelab.calibration import CalibrationCurve, trajectory_ece
from guidelab.classifier import (
    BayesClassifier, Classifier, SmallNet, TemperedLogits, load_smallnet, train,
)
from guidelab.config import ConfigError, RunConfig, with_axis
from guidelab.guidance import GuidanceConfig
from guidelab.metrics import QualityReport, quality_report
from guidelab.records import (
    RunRecord, StagedDir, csv_text, dumps_json, stage_run, write_file_atomic,
)
from guidelab.samplers import AnalyticDenoiser, cfg_sample, ddpm_guided_sample, edm_guided_sample
from guidelab.schedule import (
    GuidanceSchedule, NoiseSchedule, guidance_scale_at, make_edm_grid, make_linear_schedule,
    sine_bump,
)

_TRAINED: dict[str, SmallNet] = {}

CALIBRATION_COLUMNS = ["step", "t", "ece"]
RELIABILITY_COLUMNS = ["bin", "lower", "upper", "count", "conf", "acc"]
SWEEP_COLUMNS = [
    "axis", "value", "seed", "bayes_accuracy", "moment_distance", "mean_target_loglik",
    "integral_ece", "late_grad_norm",
]


def build_schedule(cfg: RunConfig) -> NoiseSchedule:
    s = cfg.schedule
    return make_linear_schedule(s.T, s.beta_start, s.beta_end, s.variance)


def trained_smallnet(cfg: RunConfig) -> SmallNet:
    """The ReLU net trained on clean mixture draws; cached per (mixture, training) setup."""
    c = cfg.classifier
    key = json.dumps([cfg.mixture, c.hidden, c.train.__dict__], sort_keys=True)
    if key not in _TRAINED:
        mix = cfg.build_mixture()
        t = c.train
        x, y = mix.sample(t.samples, np.random.default_rng(t.seed))
        net = SmallNet.init((mix.dim, *c.hidden, mix.K), seed=t.seed)
        _TRAINED[key] = train(net, x, y, epochs=t.epochs, lr=t.lr, batch_size=t.batch_size,
                              seed=t.seed).net
    return _TRAINED[key]


def build_classifier(cfg: RunConfig) -> Classifier:
    mix = cfg.build_mixture()
    c = cfg.classifier
    if c.kind == "bayes":
        return BayesClassifier(mix)
    net = load_smallnet(c.path) if c.path else trained_smallnet(cfg)
    if net.dim != mix.dim or net.num_classes != mix.K:
        raise ValueError(f"classifier shape {net.sizes} does not fit the mixture")
    return net.with_activation(c.activation, c.softplus_beta)


def build_guidance(cfg: RunConfig, clf: Classifier, sched: NoiseSchedule) -> GuidanceConfig | None:
    g = cfg.guidance
    if not g.enabled:
        return None
    if cfg.sampler == "edm":
        gs = GuidanceSchedule.constant(cfg.edm.guidance_base, cfg.edm.N, g.sine_gamma,
                                       g.schedule_mode)
    else:
        gs = GuidanceSchedule.from_noise_schedule(sched, g.sine_gamma, g.schedule_mode, g.scale)
    normalization = "match_cfg_delta" if cfg.sampler == "cfg" else g.normalization
    return GuidanceConfig(
        classifier=clf, schedule=gs, temps=TemperedLogits(g.tau1, g.tau2), input=g.input,
        normalization=normalization, recurrence=g.recurrence, chain_rule=g.chain_rule,
    )


def run_config(cfg: RunConfig, clf: Classifier | None = None, keep_states: bool = True) -> RunRecord:
    mix = cfg.build_mixture()
    sched = build_schedule(cfg)
    clf = build_classifier(cfg) if clf is None else clf
    guidance = build_guidance(cfg, clf, sched)
    den = AnalyticDenoiser(mix, sched, conditioning=cfg.denoiser.conditioning)
    snapshot = cfg.snapshot()
    n, y, seed = cfg.batch_size, cfg.target_class, cfg.seed
    if cfg.sampler == "ddpm":
        return ddpm_guided_sample(den, guidance, sched, y, n, seed, conditional=True,
                                  keep_states=keep_states, config=snapshot)
    if cfg.sampler == "edm":
        e = cfg.edm
        grid = make_edm_grid(e.N, e.sigma_min, e.sigma_max, e.rho)
        return edm_guided_sample(den, guidance, grid, y, n, seed, conditional=True,
                                 keep_states=keep_states, config=snapshot)
    return cfg_sample(den, cfg.cfg_scale, sched, y, n, seed, cfg_guidance=guidance,
                      keep_states=keep_states, config=snapshot)


@dataclass
class RunSummary:
    quality: QualityReport
    calibration: CalibrationCurve
    late_grad_norm: float

    def line(self) -> str:
        return (
            f"accuracy={self.quality.bayes_accuracy:.4f} "
            f"moment_distance={self.quality.moment_distance:.6g} "
            f"integral_ece={self.calibration.integral:.6g}"
        )


def late_grad_norm(run: RunRecord, fraction: float = 0.2) -> float:
    """Mean raw guidance-gradient norm over the final ``fraction`` of steps."""
    k = max(1, int(round(fraction * run.num_steps)))
    return float(run.grad_norm[-k:].mean())


def summarize(run: RunRecord, cfg: RunConfig, clf: Classifier) -> RunSummary:
    mix = cfg.build_mixture()
    curve = trajectory_ece(run, clf, mix, input=cfg.guidance.input, M=cfg.calibration.bins,
                           labels=cfg.calibration.labels)
    return RunSummary(quality_report(run.samples, cfg.target_class, mix), curve,
                      late_grad_norm(run))


def reliability_indices(num_steps: int, count: int) -> list[int]:
    if count <= 0:
        return []
    return sorted(set(int(round(v)) for v in np.linspace(0, num_steps - 1, min(count, num_steps))))


def calibration_files(curve: CalibrationCurve, count: int) -> dict[str, str]:
    files = {
        "calibration.csv": csv_text(
            CALIBRATION_COLUMNS,
            ([k, int(t), float(e)] for k, (t, e) in enumerate(zip(curve.t, curve.ece))),
        )
    }
    for k in reliability_indices(curve.ece.size, count):
        b = curve.bins[k]
        edges = b.edges
        rows = (
            [m, float(edges[m]), float(edges[m + 1]), int(b.counts[m]),
             float(b.confidence[m]), float(b.accuracy[m])]
            for m in range(b.M)
        )
        files[f"reliability_t{int(curve.t[k])}.csv"] = csv_text(RELIABILITY_COLUMNS, rows)
    return files


def write_run_dir(run: RunRecord, cfg: RunConfig, summary: RunSummary, out) -> Path:
    with StagedDir(out) as staged:
        stage_run(run, staged)
        staged.write("config.json", dumps_json(cfg.snapshot()))
        for name, text in calibration_files(summary.calibration,
                                            cfg.calibration.reliability_steps).items():
            staged.write(name, text)
        row = summary.quality.as_row()
        row["integral_ece"] = summary.calibration.integral
        row["late_grad_norm"] = summary.late_grad_norm
        staged.write("quality.csv", csv_text(list(row), [list(row.values())]))
        return staged.commit()


def write_calibration(run_dir, curve: CalibrationCurve, count: int) -> None:
    for name, text in calibration_files(curve, count).items():
        write_file_atomic(Path(run_dir) / name, text)


def sweep(cfg: RunConfig, axis: str, values, seeds=None) -> list[list]:
    """Runs every value under the same seeds (paired); one row per (seed, value).

    Rows follow :data:`SWEEP_COLUMNS` plus one ``coverage_k`` column per class.
    """
    values = list(values)
    if not values:
        raise ConfigError("sweep needs at least one value")
    seeds = [cfg.seed] if seeds is None else list(seeds)
    rows = []
    for seed in seeds:
        for value in values:
            vcfg = with_axis(cfg, axis, value)
            vcfg.seed = int(seed)
            clf = build_classifier(vcfg)
            s = summarize(run_config(vcfg, clf, keep_states=True), vcfg, clf)
            q = s.quality
            rows.append([axis, value, int(seed), q.bayes_accuracy, q.moment_distance,
                         q.mean_target_loglik, s.calibration.integral, s.late_grad_norm,
                         *q.coverage])
    return rows


def sweep_header(K: int) -> list[str]:
    return SWEEP_COLUMNS + [f"coverage_{k}" for k in range(K)]


SCHEDULE_COLUMNS = ["t", "linear", "sine", "sine_term"]


def schedule_curves(cfg: RunConfig) -> list[list]:
    """Guidance scale per step t = 0..T under the linear and the sine schedule."""
    g = cfg.guidance
    if cfg.sampler == "edm":
        lin = GuidanceSchedule.constant(cfg.edm.guidance_base, cfg.edm.N, 0.0, "linear")
    else:
        lin = GuidanceSchedule.from_noise_schedule(build_schedule(cfg), 0.0, "linear", g.scale)
    sine = GuidanceSchedule(lin.base, g.sine_gamma, "sine", lin.scale)
    T = lin.T
    return [
        [t, guidance_scale_at(lin, t), guidance_scale_at(sine, t),
         sine.scale * sine.gamma * sine.base[T] * sine_bump(t, T)]
        for t in range(T + 1)
    ]

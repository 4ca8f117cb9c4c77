"""Run configuration: a JSON document with explicit, validated keys.

Unknown keys are rejected so that typos in sweep files fail loudly. ``to_dict``
of a loaded config reproduces the file (with defaults filled in) exactly.
"""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Any

import numpy as np

from guidelab.mixture import GaussianMixture


class ConfigError(ValueError):
    pass


# Three well-separated classes on a circle of radius 4; illustrative only.
DEFAULT_MIXTURE = {
    "weights": [0.3, 0.3, 0.4],
    "means": [[0.0, 4.0], [-3.4641016151377544, -2.0], [3.4641016151377544, -2.0]],
    "covariances": [
        [[1.0, 0.0], [0.0, 1.0]],
        [[1.0, 0.0], [0.0, 1.0]],
        [[1.0, 0.0], [0.0, 1.0]],
    ],
}


@dataclass
class ScheduleConfig:
    T: int = 250
    # linear betas of a 1000-step schedule rescaled by 1000 / T
    beta_start: float = 4e-4
    beta_end: float = 0.08
    variance: str = "beta"


@dataclass
class EdmConfig:
    N: int = 36
    sigma_min: float = 0.002
    sigma_max: float = 80.0
    rho: float = 7.0
    guidance_base: float = 0.0018


@dataclass
class DenoiserConfig:
    conditioning: float = 0.5


@dataclass
class GuidanceSection:
    enabled: bool = True
    input: str = "predicted_x0"
    tau1: float = 1.0
    tau2: float = 0.5
    scale: float = 0.15
    sine_gamma: float = 0.3
    schedule_mode: str = "sine"
    normalization: str = "none"
    recurrence: int = 1
    chain_rule: bool = False


@dataclass
class TrainConfig:
    samples: int = 3000
    epochs: int = 200
    lr: float = 0.01
    batch_size: int = 64
    seed: int = 0


@dataclass
class ClassifierConfig:
    kind: str = "bayes"
    path: str | None = None
    hidden: list = field(default_factory=lambda: [64, 64])
    activation: str = "softplus"
    softplus_beta: float = 3.0
    train: TrainConfig = field(default_factory=TrainConfig)


@dataclass
class CalibrationConfig:
    bins: int = 10
    labels: str = "conditioning"
    reliability_steps: int = 5


@dataclass
class RunConfig:
    mixture: dict = field(default_factory=lambda: copy.deepcopy(DEFAULT_MIXTURE))
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    edm: EdmConfig = field(default_factory=EdmConfig)
    sampler: str = "ddpm"
    denoiser: DenoiserConfig = field(default_factory=DenoiserConfig)
    guidance: GuidanceSection = field(default_factory=GuidanceSection)
    cfg_scale: float = 1.5
    classifier: ClassifierConfig = field(default_factory=ClassifierConfig)
    calibration: CalibrationConfig = field(default_factory=CalibrationConfig)
    target_class: int = 0
    batch_size: int = 10000
    seed: int = 0
    out: str = "runs/default"

    def to_dict(self) -> dict:
        return asdict(self)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def snapshot(self) -> dict:
        """Everything that affects results; the output location is left out."""
        data = self.to_dict()
        del data["out"]
        return data

    def build_mixture(self) -> GaussianMixture:
        return GaussianMixture.from_dict(self.mixture)


_CHOICES = {
    ("schedule", "variance"): ("beta", "beta_tilde"),
    ("sampler",): ("ddpm", "edm", "cfg"),
    ("guidance", "input"): ("noisy_sample", "predicted_x0"),
    ("guidance", "schedule_mode"): ("linear", "sine"),
    ("guidance", "normalization"): ("none", "unit_gradient", "match_cfg_delta"),
    ("classifier", "kind"): ("bayes", "smallnet"),
    ("classifier", "activation"): ("relu", "softplus"),
    ("calibration", "labels"): ("conditioning", "bayes_final"),
}


def _coerce(value, default, where: str):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"{where}: expected a list, got {value!r}")
        return value
    return value


def _build(cls, data: dict, path: tuple[str, ...]):
    if not isinstance(data, dict):
        raise ConfigError(f"{'.'.join(path) or 'config'}: expected an object")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"{'.'.join(path) or 'config'}: unknown keys {unknown}")
    inst = cls()
    for name, f in known.items():
        if name not in data:
            continue
        where = ".".join(path + (name,))
        default = getattr(inst, name)
        value = data[name]
        if is_dataclass(default):
            value = _build(type(default), value, path + (name,))
        elif default is None:
            if value is not None and not isinstance(value, str):
                raise ConfigError(f"{where}: expected a string or null")
        elif isinstance(default, dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{where}: expected an object")
        else:
            value = _coerce(value, default, where)
        setattr(inst, name, value)
    return inst


def _get(cfg: RunConfig, path: tuple[str, ...]):
    obj: Any = cfg
    for p in path:
        obj = getattr(obj, p)
    return obj


def validate(cfg: RunConfig) -> RunConfig:
    for path, choices in _CHOICES.items():
        value = _get(cfg, path)
        if value not in choices:
            raise ConfigError(f"{'.'.join(path)}: {value!r} not one of {list(choices)}")
    try:
        mix = cfg.build_mixture()
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"mixture: malformed ({exc})") from None
    except ValueError as exc:
        raise ConfigError(f"mixture: {exc}") from None

    s = cfg.schedule
    if s.T < 1 or not (0 < s.beta_start <= s.beta_end < 1):
        raise ConfigError("schedule: need T >= 1 and 0 < beta_start <= beta_end < 1")
    e = cfg.edm
    if e.N < 2 or not (0 < e.sigma_min < e.sigma_max) or e.rho <= 0 or e.guidance_base < 0:
        raise ConfigError("edm: need N >= 2, 0 < sigma_min < sigma_max, rho > 0, guidance_base >= 0")
    if not 0.0 <= cfg.denoiser.conditioning <= 1.0:
        raise ConfigError("denoiser.conditioning must lie in [0, 1]")
    g = cfg.guidance
    if g.tau1 <= 0 or g.tau2 < 0:
        raise ConfigError("guidance: need tau1 > 0 and tau2 >= 0")
    if g.sine_gamma < 0 or not np.isfinite(g.scale) or g.recurrence < 1:
        raise ConfigError("guidance: need sine_gamma >= 0, finite scale, recurrence >= 1")
    if cfg.cfg_scale < 1:
        raise ConfigError("cfg_scale must be >= 1")
    c = cfg.classifier
    if c.softplus_beta <= 0 or not c.hidden or any(
        isinstance(h, bool) or not isinstance(h, int) or h < 1 for h in c.hidden
    ):
        raise ConfigError("classifier: need softplus_beta > 0 and positive integer hidden widths")
    t = c.train
    if t.samples < 1 or t.epochs < 0 or t.lr <= 0 or t.batch_size < 1:
        raise ConfigError("classifier.train: invalid training hyperparameters")
    if cfg.calibration.bins < 1 or cfg.calibration.reliability_steps < 0:
        raise ConfigError("calibration: need bins >= 1 and reliability_steps >= 0")
    if not 0 <= cfg.target_class < mix.K:
        raise ConfigError(f"target_class must lie in [0, {mix.K})")
    if cfg.batch_size < mix.dim + 1:
        raise ConfigError(f"batch_size must be at least {mix.dim + 1}")
    if not 0 <= cfg.seed < 2**64:
        raise ConfigError("seed must be an unsigned 64-bit integer")
    return cfg


def from_dict(data: dict) -> RunConfig:
    return validate(_build(RunConfig, data, ()))


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return from_dict(data)


# sweep axis -> (section, key)
SWEEP_AXES = {
    "tau2": ("guidance", "tau2"),
    "tau1": ("guidance", "tau1"),
    "sine_gamma": ("guidance", "sine_gamma"),
    "scale": ("guidance", "scale"),
    "recurrence": ("guidance", "recurrence"),
    "input": ("guidance", "input"),
    "softplus_beta": ("classifier", "softplus_beta"),
    "bins": ("calibration", "bins"),
    "conditioning": ("denoiser", "conditioning"),
}


def with_axis(cfg: RunConfig, axis: str, value) -> RunConfig:
    if axis not in SWEEP_AXES:
        raise ConfigError(f"unknown sweep axis {axis!r}; valid axes: {sorted(SWEEP_AXES)}")
    data = cfg.to_dict()
    section, key = SWEEP_AXES[axis]
    data[section][key] = value
    return from_dict(data)


def parse_axis_value(axis: str, text: str):
    """Parse one sweep value using the type of the axis's default."""
    section, key = SWEEP_AXES[axis]
    default = getattr(getattr(RunConfig(), section), key)
    text = text.strip()
    try:
        if isinstance(default, bool):
            return text.lower() in ("1", "true", "yes")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
    except ValueError:
        raise ConfigError(f"axis {axis}: cannot parse value {text!r}") from None
    return text

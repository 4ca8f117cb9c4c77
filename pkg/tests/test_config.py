import json

import pytest

from guidelab.config import (
    SWEEP_AXES, ConfigError, RunConfig, from_dict, load_config, parse_axis_value, with_axis,
)


def test_defaults_validate():
    cfg = from_dict({})
    assert cfg.guidance.tau1 == 1.0 and cfg.guidance.tau2 == 0.5
    assert cfg.classifier.softplus_beta == 3.0 and cfg.guidance.sine_gamma == 0.3


def test_round_trip_byte_identical(tmp_path):
    cfg = from_dict({"guidance": {"tau2": 0.7}, "seed": 12, "sampler": "edm"})
    p = tmp_path / "c.json"
    p.write_text(cfg.dumps())
    again = load_config(p)
    assert again.dumps() == cfg.dumps()
    shuffled = json.dumps(dict(reversed(list(json.loads(cfg.dumps()).items()))))
    p.write_text(shuffled)
    assert load_config(p).dumps() == cfg.dumps()


def test_snapshot_drops_output_location():
    cfg = RunConfig()
    assert "out" not in cfg.snapshot()
    assert from_dict(cfg.snapshot()).dumps() == cfg.dumps()


@pytest.mark.parametrize("data", [
    {"unknown": 1},
    {"guidance": {"tau_2": 0.5}},
    {"guidance": {"tau2": "high"}},
    {"guidance": {"tau1": 0}},
    {"seed": -1},
    {"seed": 1.5},
    {"sampler": "ode"},
    {"batch_size": 2},
    {"target_class": 3},
    {"schedule": {"T": 0}},
    {"classifier": {"hidden": [64, 0]}},
    {"mixture": {"weights": [1.0]}},
    {"mixture": {"weights": [1.0], "means": [[0.0]], "covariances": [[[-1.0]]]}},
    {"denoiser": {"conditioning": 2}},
    {"cfg_scale": 0.5},
    {"guidance": []},
])
def test_rejects_malformed(data):
    with pytest.raises(ConfigError):
        from_dict(data)


def test_load_errors(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.json")
    p = tmp_path / "bad.json"
    p.write_text("{not json")
    with pytest.raises(ConfigError):
        load_config(p)


def test_axes():
    cfg = RunConfig()
    assert with_axis(cfg, "tau2", 0.7).guidance.tau2 == 0.7
    assert with_axis(cfg, "bins", 15).calibration.bins == 15
    assert with_axis(cfg, "input", "noisy_sample").guidance.input == "noisy_sample"
    with pytest.raises(ConfigError, match="valid axes"):
        with_axis(cfg, "gamma2", 1)
    with pytest.raises(ConfigError):
        with_axis(cfg, "input", "latent")
    assert parse_axis_value("recurrence", "3") == 3
    assert parse_axis_value("tau2", "0.5") == 0.5
    with pytest.raises(ConfigError):
        parse_axis_value("bins", "ten")
    for axis in SWEEP_AXES:
        section, key = SWEEP_AXES[axis]
        assert hasattr(getattr(cfg, section), key)

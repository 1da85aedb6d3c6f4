"""Tests for configuration parsing, precedence and settings"""

import pytest

from specfm.config import (
    EncoderConfig,
    RunConfig,
    Settings,
    SynthConfig,
    TrainConfig,
    build_run_config,
    dump_run_config,
    load_run_config,
    parse_key_values,
)
from specfm.errors import ConfigError


def test_defaults():
    cfg = RunConfig()
    assert cfg.encoder.d_model == 64
    assert cfg.head.lr == 1e-3
    assert cfg.e2e.lr == 1e-4
    assert cfg.pretrain.label_smoothing == 0.0
    assert cfg.multitask.lr == 1e-5
    assert cfg.gbdt.max_depth == 6 and cfg.gbdt.eta == 0.3
    assert cfg.preprocess.bin_width == pytest.approx(18.6)


def test_parse_key_values_skips_comments():
    lines = ["# header", "", "encoder.d_model = 32  # smaller", "synth.task=glyco"]
    assert parse_key_values(lines) == {"encoder.d_model": "32", "synth.task": "glyco"}


@pytest.mark.parametrize("line", ["encoder.d_model 32", "d_model = 32"])
def test_parse_key_values_rejects(line):
    with pytest.raises(ConfigError):
        parse_key_values([line])


def test_build_run_config_values():
    cfg = build_run_config({"encoder.d_model": "32", "e2e.layer_sweep": "1,2,4", "synth.charges": "2,3,4"})
    assert cfg.encoder.d_model == 32
    assert cfg.e2e.layer_sweep == [1, 2, 4]
    assert cfg.synth.charges == [2, 3, 4]
    assert cfg.head.lr == 1e-3


@pytest.mark.parametrize(
    "values",
    [{"nosuch.key": "1"}, {"encoder.nosuch": "1"}, {"encoder.d_model": "abc"}, {"encoder.d_model": "33"}],
)
def test_build_run_config_errors(values):
    with pytest.raises(ConfigError):
        build_run_config(values)


def test_file_then_overrides(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("encoder.d_model = 32\nencoder.n_layers = 3\n", encoding="utf-8")
    cfg = load_run_config(path, ["encoder.n_layers=1"])
    assert cfg.encoder.d_model == 32
    assert cfg.encoder.n_layers == 1


def test_config_file_invalid_utf8(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_bytes(b"encoder.d_model = 32\n# caf\xe9\n")
    with pytest.raises(ConfigError, match="byte offset 26"):
        load_run_config(path)


def test_dump_round_trip():
    cfg = build_run_config({"synth.task": "glyco", "e2e.layer_sweep": "2,4", "decoder.ff_dim": "64"})
    text = dump_run_config(cfg)
    assert "synth.task = glyco" in text.splitlines()
    assert "decoder.vocabulary = " in text.splitlines()
    assert build_run_config(parse_key_values(text.splitlines())) == cfg


def test_encoder_shape_validation():
    assert EncoderConfig().feedforward_dim == 256
    with pytest.raises(ValueError):
        EncoderConfig(d_model=15, n_heads=1)
    with pytest.raises(ValueError):
        EncoderConfig(lambda_min=10.0, lambda_max=1.0)


def test_train_config_layer_sweep():
    assert TrainConfig(layer_sweep="3, 1").layer_sweep == [3, 1]
    with pytest.raises(ValueError):
        TrainConfig(layer_sweep=[0])


def test_synth_positive_rate_defaults():
    assert SynthConfig(task="phospho").rate == 0.54
    assert SynthConfig(task="glyco").rate == pytest.approx(0.102)
    assert SynthConfig(task="denovo", positive_rate=0.5).rate == 0.5


def test_settings_from_environment(monkeypatch):
    monkeypatch.setenv("SPECFM_LOG_LEVEL", "DEBUG")
    monkeypatch.setenv("SPECFM_NUM_WORKERS", "4")
    s = Settings(_env_file=None)
    assert s.log_level == "DEBUG"
    assert s.num_workers == 4
    assert s.torch_threads is None

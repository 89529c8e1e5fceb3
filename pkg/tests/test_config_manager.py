import json

import pytest

import rsdkit
from conftest import MINIMAL_CONFIG
from rsdcommon import ConfigError


def test_env_override_wins_for_string(config, monkeypatch):
    monkeypatch.setenv("RSDKIT_PRESET", "bypass")
    assert config.get("dataset.preset") == "bypass"


def test_int_conversion(config, monkeypatch):
    monkeypatch.setenv("RSDKIT_SEED", "42")
    value = config.get("experiment.seed")
    assert value == 42
    assert isinstance(value, int)


def test_float_conversion(config, monkeypatch):
    monkeypatch.setenv("RSDKIT_TIME_SCALE", "0.5")
    value = config.get("dataset.time_scale")
    assert value == 0.5
    assert isinstance(value, float)


def test_invalid_int_falls_back_to_file_value(config, monkeypatch):
    monkeypatch.setenv("RSDKIT_THREADS", "not-a-number")
    # Conversion fails -> override returns None -> file value (1) is used.
    assert config.get("experiment.threads") == 1


def test_no_override_returns_file_value(config):
    assert config.get("dataset.preset") == "cholec"


def test_missing_key_returns_default(config):
    assert config.get("lstm.nonexistent", "fallback") == "fallback"


def test_flag_override_beats_env(config, monkeypatch):
    monkeypatch.setenv("RSDKIT_PRESET", "bypass")
    config.set_override("dataset.preset", "cholec")
    assert config.get("dataset.preset") == "cholec"


def test_none_override_is_ignored(config):
    config.set_override("dataset.preset", None)
    assert config.get("dataset.preset") == "cholec"


def test_missing_section_is_config_error(config_factory):
    cfg = json.loads(json.dumps(MINIMAL_CONFIG))
    del cfg["lstm"]
    with pytest.raises(ConfigError, match="lstm"):
        config_factory(cfg)


def test_unknown_version_is_config_error(config_factory):
    cfg = json.loads(json.dumps(MINIMAL_CONFIG))
    cfg["version"] = 2
    with pytest.raises(ConfigError, match="version"):
        config_factory(cfg)


def test_missing_file_is_config_error(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        rsdkit.ConfigManager(str(tmp_path / "absent.json"))


def test_invalid_json_is_config_error(tmp_path):
    path = tmp_path / "config.json"
    path.write_text("{not json")
    with pytest.raises(ConfigError, match="Invalid JSON"):
        rsdkit.ConfigManager(str(path))


def test_hash_is_stable_and_twelve_hex_chars(config):
    digest = config.config_hash()
    assert digest == config.config_hash()
    assert len(digest) == 12
    int(digest, 16)


def test_hash_ignores_logging_threads_and_out_dir(config, monkeypatch):
    before = config.config_hash()
    monkeypatch.setenv("RSDKIT_THREADS", "4")
    monkeypatch.setenv("LOG_LEVEL", "DEBUG")
    config.set_override("experiment.out_dir", "/elsewhere")
    config.set_override("experiment.methods", ["naive-mean"])
    assert config.config_hash() == before


def test_hash_follows_result_relevant_overrides(config):
    before = config.config_hash()
    config.set_override("dataset.time_scale", 0.3)
    assert config.config_hash() != before


def test_resolved_applies_overrides(config, monkeypatch):
    monkeypatch.setenv("RSDKIT_SEED", "9")
    config.set_override("splits.folds", 4)
    resolved = config.resolved()
    assert resolved["experiment"]["seed"] == 9
    assert resolved["splits"]["folds"] == 4
    # the file config itself is untouched
    assert config.config["splits"]["folds"] == 1


def test_preset_manager_known_and_unknown(presets):
    assert presets.get_preset("cholec")["end_signal_phase"] == 4
    assert len(presets.get_preset("bypass")["phase_names"]) == 9
    with pytest.raises(ConfigError, match="Available"):
        presets.get_preset("appendectomy")


def test_with_override_leaves_original_untouched(config):
    before = config.config_hash()
    bypass = config.with_override("dataset.preset", "bypass")
    assert bypass.get("dataset.preset") == "bypass"
    assert config.get("dataset.preset") == "cholec"
    assert config.config_hash() == before
    assert bypass.config_hash() != before

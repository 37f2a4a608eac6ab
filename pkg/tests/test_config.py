import os

import pytest

from config import (
    DEFAULT_CONFIG, apply_overrides, default_config, load_config, parse_bool, render_config, validate_config,
    write_resolved_config,
)
from errors import ConfigError


def test_defaults_are_typed_and_valid(tmp_path):
    cfg = default_config(str(tmp_path))
    assert cfg["conv_filters"] == (16, 32, 64)
    assert cfg["extra_sensitivity_targets"] == (0.7, 0.9)
    assert cfg["dump_views"] is False and cfg["colored_output"] is True
    assert (cfg["n_normotensive"], cfg["n_hypertensive"]) == (742, 33)
    assert (cfg["n_scales"], cfg["n_time_bins"], cfg["windows_per_sample"]) == (40, 250, 10)
    assert cfg["data_dir"] == os.path.join(str(tmp_path), "cohort")
    assert validate_config(cfg) == []


def test_missing_file_writes_defaults_and_asks_for_review(tmp_path):
    path = tmp_path / "conf" / "config.ini"
    with pytest.raises(ConfigError, match="Review"):
        load_config(str(path))
    assert path.read_text() == DEFAULT_CONFIG


def test_load_resolves_paths_against_the_file(tmp_path):
    path = tmp_path / "exp.ini"
    path.write_text("[paths]\ndata_dir = ./data\n\n[train]\nfolds = 3\n")
    cfg = load_config(str(tmp_path / "exp"))
    assert cfg["data_dir"] == os.path.join(str(tmp_path), "data")
    assert cfg["folds"] == 3
    assert cfg["pretrain_epochs"] == 100


def test_unknown_keys_and_sections_are_rejected(tmp_path):
    path = tmp_path / "bad.ini"
    path.write_text("[train]\nfolds = 3\nepochz = 4\n\n[extras]\nx = 1\n")
    with pytest.raises(ConfigError) as e:
        load_config(str(path))
    assert "train.epochz" in str(e.value) and "[extras]" in str(e.value)


def test_bad_values_name_their_key(tmp_path):
    path = tmp_path / "bad.ini"
    path.write_text("[train]\nfolds = five\n")
    with pytest.raises(ConfigError, match="train.folds"):
        load_config(str(path))


def test_overrides(tmp_path):
    cfg = default_config(str(tmp_path))
    out = apply_overrides(cfg, {"train.seed": "7", "objective": "supcon", "model.conv_filters": "4;8",
                                "paths.output_dir": "elsewhere"}, base_dir=str(tmp_path))
    assert out["seed"] == 7 and out["objective"] == "supcon" and out["conv_filters"] == (4, 8)
    assert out["output_dir"] == os.path.join(str(tmp_path), "elsewhere")
    assert cfg["seed"] == 42
    assert apply_overrides(cfg, {"force": True})["force"] is True
    with pytest.raises(ConfigError):
        apply_overrides(cfg, {"train.objective": "cl"})
    with pytest.raises(ConfigError):
        apply_overrides(cfg, {"nonsense": "1"})


@pytest.mark.parametrize("key, value, message", [
    ("representation", "wavelet", "representation"),
    ("objective", "triplet", "objective"),
    ("scheduler", "linear", "scheduler"),
    ("variant", "transformer", "variant"),
    ("kernel_size", 4, "odd"),
    ("folds", 1, "folds"),
    ("margin", 2.0, "margin"),
    ("tau_min", 0.9, "tau_min"),
    ("fmax", 5000.0, "CWT band"),
    ("sensitivity_target", 1.2, "sensitivity target"),
    ("storage_type", "parquet", "storage_type"),
    ("duration_s", 2.0, "duration_s"),
])
def test_validation_issues(key, value, message, tmp_path):
    cfg = dict(default_config(str(tmp_path)), **{key: value})
    assert any(message in issue for issue in validate_config(cfg))


def test_parse_bool():
    assert parse_bool("Yes") and parse_bool(" on ") and parse_bool("1")
    assert not parse_bool("off")
    assert parse_bool(None, default=True)


def test_resolved_config_round_trips(tmp_path):
    cfg = apply_overrides(default_config(str(tmp_path)), {"tau": "0.25", "dump_views": "true"})
    path = write_resolved_config(cfg, str(tmp_path / "run"))
    assert os.path.basename(path) == "resolved_config.ini"
    assert load_config(path) == cfg
    assert "[objective]" in render_config(cfg)

#!/usr/bin/env python3
import configparser
import io
import os
from typing import Any, Callable, Dict, List, Mapping, Optional, Tuple

from errors import ConfigError

DEFAULT_CONFIG = '''# config.ini
# Generated automatically. Every key below is recognised; unknown keys are rejected.

[paths]
# Relative paths resolve against this file's directory
data_dir = ./cohort
prepared_dir = ./prepared
output_dir = ./runs

[synth]
# Default counts follow the 742:33 normotensive:hypertensive cohort; scale multiplies both
n_normotensive = 742
n_hypertensive = 33
scale = 1.0
class_effect = 0.5
snr_db = 10.0
duration_s = 45.0
sample_rate = 8000
# Expected saturating motion artifacts per minute (0 = none)
artifact_rate = 0.0

[ingest]
target_rate = 4000
window_s = 3.75
stride_s = 0.75
kaiser_beta = 8.0
# Quality gate: RMS band and maximum fraction of samples with |x| > 0.99
min_rms = 0.005
max_rms = 0.5
max_clip = 0.01
windows_per_sample = 10
max_batches = 5

[tfr]
# scalogram | reciprocal | multiview | multiview_phase | spectrogram
representation = multiview
n_scales = 40
n_time_bins = 250
omega0 = 6.0
fmin = 1.0
fmax = 200.0
support_sigmas = 4.0
reciprocal_eps = 1e-6
stft_nperseg = 800
stft_hop = 60
dump_views = false

[model]
# full | no_window_encoder | no_recurrent | no_window_attention |
# no_hierarchical_attention | no_sequence_encoder | no_conv_extractor | collapsed_hierarchy
variant = full
conv_filters = 16, 32, 64
kernel_size = 3
spatial_dropout = 0.2
lstm_hidden = 64
attention_units = 64
embedding_dim = 64
bn_momentum = 0.99
bn_eps = 0.001

[objective]
# none | cl | supcon | wcl | bscl | pcl | pcl_am
objective = pcl
# fixed | stepwise | cosine | increase | decay | adaptive
scheduler = fixed
tau = 0.1
tau_min = 0.05
tau_max = 0.5
tau_period_epochs = 10
tau_block_epochs = 5
margin = 0.3
cb_beta = 0.999

[train]
seed = 42
folds = 5
pretrain_epochs = 100
finetune_epochs = 50
supervised_epochs = 100
batch_size = 32
learning_rate = 0.001
patience = 10
sensitivity_target = 0.80
extra_sensitivity_targets = 0.70, 0.90
# test | train
threshold_source = test

[analytics]
sampen_m = 2
sampen_r = 0.2
image_bins = 64
max_windows_per_recording = 10
refractory_s = 0.25

[deploy]
warmup_runs = 5
n_trials = 100

[ledger]
# Storage backend for the per-fold results ledger: csv (default) or sqlite
storage_type = csv

[run]
colored_output = true
force = false

[monitoring]
log_level = INFO
log_progress_every_n = 10
'''

REPRESENTATIONS = ("scalogram", "reciprocal", "multiview", "multiview_phase", "spectrogram")
OBJECTIVES = ("none", "cl", "supcon", "wcl", "bscl", "pcl", "pcl_am")
SCHEDULERS = ("fixed", "stepwise", "cosine", "increase", "decay", "adaptive")
VARIANTS = (
    "full", "no_window_encoder", "no_recurrent", "no_window_attention",
    "no_hierarchical_attention", "no_sequence_encoder", "no_conv_extractor", "collapsed_hierarchy",
)
PATH_KEYS = ("data_dir", "prepared_dir", "output_dir")


def parse_bool(s: str, default: bool = False) -> bool:
    """Parse string to boolean with fallback default"""
    if s is None:
        return default
    return s.strip().lower() in ("1", "true", "yes", "on")


def _int_list(s: str) -> Tuple[int, ...]:
    return tuple(int(p) for p in s.replace(";", ",").split(",") if p.strip())


def _float_list(s: str) -> Tuple[float, ...]:
    return tuple(float(p) for p in s.replace(";", ",").split(",") if p.strip())


_CONVERTERS: Dict[str, Callable[[str], Any]] = {
    # synth
    "n_normotensive": int, "n_hypertensive": int, "scale": float, "class_effect": float,
    "snr_db": float, "duration_s": float, "sample_rate": int, "artifact_rate": float,
    # ingest
    "target_rate": int, "window_s": float, "stride_s": float, "kaiser_beta": float,
    "min_rms": float, "max_rms": float, "max_clip": float,
    "windows_per_sample": int, "max_batches": int,
    # tfr
    "n_scales": int, "n_time_bins": int, "omega0": float, "fmin": float, "fmax": float,
    "support_sigmas": float, "reciprocal_eps": float, "stft_nperseg": int, "stft_hop": int,
    "dump_views": parse_bool,
    # model
    "conv_filters": _int_list, "kernel_size": int, "spatial_dropout": float, "lstm_hidden": int,
    "attention_units": int, "embedding_dim": int, "bn_momentum": float, "bn_eps": float,
    # objective
    "tau": float, "tau_min": float, "tau_max": float, "tau_period_epochs": int,
    "tau_block_epochs": int, "margin": float, "cb_beta": float,
    # train
    "seed": int, "folds": int, "pretrain_epochs": int, "finetune_epochs": int,
    "supervised_epochs": int, "batch_size": int, "learning_rate": float, "patience": int,
    "sensitivity_target": float, "extra_sensitivity_targets": _float_list,
    # analytics
    "sampen_m": int, "sampen_r": float, "image_bins": int, "max_windows_per_recording": int,
    "refractory_s": float,
    # deploy
    "warmup_runs": int, "n_trials": int,
    # run / monitoring
    "colored_output": parse_bool, "force": parse_bool, "log_progress_every_n": int,
}


def _schema() -> Dict[str, Dict[str, str]]:
    cp = configparser.ConfigParser()
    cp.read_string(DEFAULT_CONFIG)
    return {section: dict(cp.items(section)) for section in cp.sections()}


SCHEMA = _schema()
KEY_SECTIONS = {key: section for section, keys in SCHEMA.items() for key in keys}


def _convert(key: str, raw: str) -> Any:
    converter = _CONVERTERS.get(key, lambda s: s.strip())
    try:
        return converter(raw)
    except ValueError as e:
        raise ConfigError(f"Invalid value for {KEY_SECTIONS.get(key, '?')}.{key}: {raw!r} ({e})")


def _to_text(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ", ".join(str(v) for v in value)
    return str(value)


def default_config(base_dir: Optional[str] = None) -> dict:
    """Typed defaults; paths resolve against `base_dir` (CWD when omitted)."""
    cfg = {key: _convert(key, raw) for key, raw in
           ((k, v) for section in SCHEMA.values() for k, v in section.items())}
    _resolve_paths(cfg, base_dir or os.getcwd())
    return cfg


def _resolve_paths(cfg: dict, base_dir: str) -> None:
    for key in PATH_KEYS:
        value = str(cfg[key])
        if os.path.isabs(value):
            continue
        if value.startswith('./'):
            value = value[2:]
        cfg[key] = os.path.join(base_dir, value)


def load_config(path: Optional[str]) -> dict:
    """Load INI config and return a normalized dict of settings with defaults.

    A missing file gets DEFAULT_CONFIG written to it and a ConfigError asking
    the user to review it.
    """
    if path is None:
        return default_config()

    if not os.path.exists(path) and os.path.exists(path + ".ini"):
        path = path + ".ini"

    if not os.path.exists(path):
        os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            f.write(DEFAULT_CONFIG)
        raise ConfigError(f"Created default config at {path}. Review it and run again.")

    cp = configparser.ConfigParser()
    try:
        if not cp.read(path, encoding="utf-8"):
            raise ConfigError(f"Config file not found or unreadable: {path}")
    except configparser.Error as e:
        raise ConfigError(f"Malformed config {path}: {e}")

    unknown = []
    for section in cp.sections():
        if section not in SCHEMA:
            unknown.append(f"[{section}]")
            continue
        for key in cp[section]:
            if key not in SCHEMA[section]:
                unknown.append(f"{section}.{key}")
    if unknown:
        raise ConfigError(f"Unknown config keys in {path}: {', '.join(unknown)}")

    config_dir = os.path.dirname(os.path.abspath(path))
    cfg = {}
    for section, keys in SCHEMA.items():
        for key, default_raw in keys.items():
            cfg[key] = _convert(key, cp.get(section, key, fallback=default_raw))
    _resolve_paths(cfg, config_dir)
    return cfg


def apply_overrides(cfg: dict, overrides: Mapping[str, Any], base_dir: Optional[str] = None) -> dict:
    """Return a copy with `section.key` (or bare `key`) overrides applied and typed."""
    out = dict(cfg)
    for name, value in overrides.items():
        key = name.split(".", 1)[1] if "." in name else name
        section = name.split(".", 1)[0] if "." in name else KEY_SECTIONS.get(key)
        if key not in KEY_SECTIONS or KEY_SECTIONS[key] != section:
            raise ConfigError(f"Unknown config key: {name}")
        out[key] = _convert(key, value) if isinstance(value, str) else value
        if key in PATH_KEYS and not os.path.isabs(str(out[key])):
            out[key] = os.path.abspath(os.path.join(base_dir or os.getcwd(), str(out[key])))
    return out


def validate_config(cfg: dict) -> List[str]:
    """Return list of configuration issues"""
    issues = []

    if cfg["representation"] not in REPRESENTATIONS:
        issues.append(f"representation must be one of {', '.join(REPRESENTATIONS)}")
    if cfg["objective"] not in OBJECTIVES:
        issues.append(f"objective must be one of {', '.join(OBJECTIVES)}")
    if cfg["scheduler"] not in SCHEDULERS:
        issues.append(f"scheduler must be one of {', '.join(SCHEDULERS)}")
    if cfg["variant"] not in VARIANTS:
        issues.append(f"variant must be one of {', '.join(VARIANTS)}")
    if cfg["threshold_source"] not in ("test", "train"):
        issues.append("threshold_source must be 'test' or 'train'")
    if cfg["storage_type"] not in ("csv", "sqlite"):
        issues.append("storage_type must be 'csv' or 'sqlite'")

    if cfg["n_normotensive"] < 0 or cfg["n_hypertensive"] < 0:
        issues.append("cohort counts must be >= 0")
    if cfg["scale"] <= 0:
        issues.append("scale must be > 0")
    if cfg["class_effect"] < 0:
        issues.append("class_effect must be >= 0")
    if cfg["duration_s"] < cfg["window_s"]:
        issues.append("duration_s must be >= window_s for usable recordings")
    if cfg["sample_rate"] <= 0 or cfg["target_rate"] <= 0:
        issues.append("sample rates must be > 0")
    if not 0 <= cfg["min_rms"] <= cfg["max_rms"]:
        issues.append("quality gate needs 0 <= min_rms <= max_rms")
    if not 0 < cfg["max_clip"] <= 1:
        issues.append("max_clip must be in (0, 1]")
    if cfg["windows_per_sample"] < 1 or cfg["max_batches"] < 1:
        issues.append("windows_per_sample and max_batches must be >= 1")

    if not 0 < cfg["fmin"] < cfg["fmax"] <= cfg["target_rate"] / 2:
        issues.append("CWT band needs 0 < fmin < fmax <= target_rate/2")
    if cfg["reciprocal_eps"] <= 0:
        issues.append("reciprocal_eps must be > 0")

    if not cfg["conv_filters"]:
        issues.append("conv_filters must list at least one block")
    if not 0 <= cfg["spatial_dropout"] < 1:
        issues.append("spatial_dropout must be in [0, 1)")
    for key in ("lstm_hidden", "attention_units", "embedding_dim", "kernel_size"):
        if cfg[key] < 1:
            issues.append(f"{key} must be >= 1")
    if cfg["kernel_size"] % 2 == 0:
        issues.append("kernel_size must be odd")

    if not 0 < cfg["tau_min"] <= cfg["tau_max"]:
        issues.append("temperatures need 0 < tau_min <= tau_max")
    if cfg["tau"] <= 0:
        issues.append("tau must be > 0")
    if not 0 <= cfg["margin"] < 1.5707963267948966:
        issues.append("margin must be in [0, pi/2)")
    if not 0 <= cfg["cb_beta"] < 1:
        issues.append("cb_beta must be in [0, 1)")

    if cfg["folds"] < 2:
        issues.append("folds must be >= 2")
    if cfg["batch_size"] < 2:
        issues.append("batch_size must be >= 2")
    if cfg["learning_rate"] <= 0:
        issues.append("learning_rate must be > 0")
    for target in (cfg["sensitivity_target"],) + tuple(cfg["extra_sensitivity_targets"]):
        if not 0 <= target <= 1:
            issues.append(f"sensitivity target {target} must be in [0, 1]")

    if cfg["n_trials"] < 2:
        issues.append("n_trials must be >= 2")

    return issues


def render_config(cfg: dict) -> str:
    """INI text of the fully resolved config (every key, grouped by section)."""
    cp = configparser.ConfigParser()
    for section, keys in SCHEMA.items():
        cp.add_section(section)
        for key in keys:
            cp.set(section, key, _to_text(cfg[key]))
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


def write_resolved_config(cfg: dict, directory: str) -> str:
    os.makedirs(directory, exist_ok=True)
    path = os.path.join(directory, "resolved_config.ini")
    tmp_path = path + ".tmp"
    with open(tmp_path, "w", encoding="utf-8") as f:
        f.write(render_config(cfg))
    os.replace(tmp_path, path)
    return path

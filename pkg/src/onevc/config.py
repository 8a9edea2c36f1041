"""Configuration presets, loading, merging and provenance hashing.

Two presets are shipped:

* ``paper``: the published full-scale hyperparameters.  Training at this
  scale is not exercised by the test suite.
* ``desk``: every hidden size shrunk so the full pipeline (feature
  extraction, training, conversion, evaluation) runs on a laptop CPU in
  minutes.  This is the default.

Precedence when assembling an effective config: CLI flag > config file >
preset defaults.
"""

from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path
from typing import Any


class ConfigError(ValueError):
    """Raised for unknown keys or invalid values in a configuration."""


PAPER: dict[str, Any] = {
    "preset": "paper",
    "seed": 0,
    "features": {
        "sample_rate": 16000,
        "n_fft": 400,
        "win_length": 400,
        "hop_length": 160,
        "n_mels": 80,
        "fmin": 0.0,
        "fmax": 8000.0,
        "mel_floor": 1e-5,
        "f0_min": 60.0,
        "f0_max": 400.0,
        "voicing_threshold": 0.5,
    },
    "model": {
        "mel_dim": 80,
        "content_dim": 64,
        "codebook_size": 512,
        "width": 512,
        "aggregator_dim": 256,
        "speaker_dim": 256,
        "speaker_width": 512,
        "decoder_width": 1024,
        "postnet_width": 512,
        "ema_decay": 0.999,
        "ema_eps": 1e-5,
    },
    "cpc": {
        "prediction_steps": 6,
        "n_negatives": 10,
    },
    "mi": {
        "hidden": 256,
        "n_hidden": 4,
        "logvar_clamp": 10.0,
    },
    "train": {
        "lambda_mi": 1e-2,
        "batch_size": 256,
        "segment_len": 128,
        "epochs": 500,
        "warmup_epochs": 15,
        "base_lr": 1e-3,
        "floor_lr": 1e-6,
        "decay_start": 200,
        "decay_every": 100,
        "approx_lr": 3e-4,
        "adam_beta1": 0.9,
        "adam_beta2": 0.999,
        "adam_eps": 1e-8,
        "grad_clip": 5.0,
        "checkpoint_every": 10,
    },
    "vocoder": {
        "name": "griffinlim",
        "iterations": 64,
    },
    "eval": {
        "mi_rounds": 10,
        "mi_fit_steps": 300,
        "mi_fit_lr": 1e-3,
        "probe_epochs": 100,
        "probe_lr": 1e-3,
        "probe_hidden": 256,
        "probe_split": 0.8,
        "crop_len": 128,
    },
}

# Hidden sizes divided by four relative to the paper preset; batching and
# schedule shortened so training smoke tests finish in minutes on CPU.
_DESK_OVERRIDES: dict[str, Any] = {
    "preset": "desk",
    "model": {
        "content_dim": 16,
        "codebook_size": 128,
        "width": 128,
        "aggregator_dim": 64,
        "speaker_dim": 64,
        "speaker_width": 64,
        "decoder_width": 256,
        "postnet_width": 128,
    },
    "mi": {"hidden": 64},
    "train": {
        "batch_size": 16,
        "epochs": 40,
        "warmup_epochs": 5,
        "decay_start": 200,
        "checkpoint_every": 5,
    },
    "eval": {
        "mi_fit_steps": 200,
        "probe_epochs": 100,
        "probe_hidden": 64,
    },
}


def _deep_merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown config key: {where}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {where} must be a table")
            out[key] = _deep_merge(base[key], value, where)
        else:
            out[key] = value
    return out


def preset(name: str) -> dict:
    """Return a fresh config dict for the named preset."""
    if name == "paper":
        return copy.deepcopy(PAPER)
    if name == "desk":
        return _deep_merge(PAPER, _DESK_OVERRIDES)
    raise ConfigError(f"unknown preset: {name!r} (expected 'paper' or 'desk')")


def load_config(path: str | Path) -> dict:
    """Read a JSON config file containing overrides for a preset."""
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"config file {path} must contain a JSON object")
    return raw


def resolve(
    preset_name: str = "desk",
    config_file: str | Path | None = None,
    overrides: dict | None = None,
) -> dict:
    """Assemble an effective config: preset < file < explicit overrides."""
    cfg = preset(preset_name)
    if config_file is not None:
        file_cfg = load_config(config_file)
        file_cfg.pop("preset", None)
        cfg = _deep_merge(cfg, file_cfg)
    if overrides:
        cfg = _deep_merge(cfg, overrides)
    validate(cfg)
    return cfg


def validate(cfg: dict) -> None:
    """Sanity-check values whose violation would corrupt training."""
    if cfg["train"]["lambda_mi"] < 0:
        raise ConfigError("train.lambda_mi must be >= 0")
    if cfg["train"]["batch_size"] < 2:
        raise ConfigError("train.batch_size must be >= 2 (MI cross terms need two utterances)")
    if cfg["train"]["segment_len"] % 2 != 0:
        raise ConfigError("train.segment_len must be even")
    if cfg["cpc"]["prediction_steps"] < 1 or cfg["cpc"]["n_negatives"] < 1:
        raise ConfigError("cpc.prediction_steps and cpc.n_negatives must be >= 1")
    if cfg["train"]["segment_len"] // 2 <= cfg["cpc"]["prediction_steps"]:
        raise ConfigError("segment_len/2 must exceed cpc.prediction_steps")


def config_hash(cfg: dict) -> str:
    """Stable short hash of a config, stored in every artifact for provenance."""
    canon = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()[:16]

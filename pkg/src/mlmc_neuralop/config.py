"""JSON run configuration with sections dataset/model/schedule/optimizer/run.

Every key except ``dataset.kind`` has a default. Unknown keys are rejected so
that typos do not silently fall back to defaults.
"""
from __future__ import annotations

import copy
import json

REQUIRED = {"dataset": ("kind",)}

DEFAULTS = {
    "dataset": {
        "kind": None,  # "darcy" or "synthetic1d"
        "n": 128,
        "fine_resolution": 65,
        "levels": 3,
        "seed": 0,
        "tol": 1e-10,
        "shift": 9.0,
        "exponent": 2.0,
        "path": "dataset.bin",
    },
    "model": {
        "width": 16,
        "modes": 8,
        "layers": 3,
        "activation": "gelu",
        "input_shift": 0.0,
        "input_scale": 1.0,
        "output_scale": 1.0,
        "relative_loss": False,
    },
    "schedule": {
        "levels": None,  # default: every dataset level
        "n_total": None,  # default: size of the train split
        "delta": 2.0,
        "b_m": 4,
        "allocation": "geometric",
        "sampling": "random",
        "k": 1.0,
        "d": None,  # default: dataset dimension
        "prescribed": None,
    },
    "optimizer": {
        "kind": "adam",
        "lr": 1e-3,
        "beta1": 0.9,
        "beta2": 0.999,
        "eps": 1e-8,
    },
    "run": {
        "epochs": 50,
        "seed": 0,
        "resume": False,
        "checkpoint": None,  # default: <out>/checkpoint.bin
        "sweep_levels": [2, 3],
        "sweep_deltas": [8.0, 4.0, 2.0, 1.0],
        "baseline_batch": 16,
        "parallel": False,
        "n_probe": 8,
        "diagnose_batches": 10,
    },
}


class ConfigError(ValueError):
    pass


def resolve(raw: dict) -> dict:
    """Merge ``raw`` over the defaults, checking required and unknown keys."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    unknown = set(raw) - set(DEFAULTS)
    if unknown:
        raise ConfigError(f"unknown config section(s): {', '.join(sorted(unknown))}")
    cfg = copy.deepcopy(DEFAULTS)
    for section, values in raw.items():
        if not isinstance(values, dict):
            raise ConfigError(f"section {section!r} must be an object")
        bad = set(values) - set(DEFAULTS[section])
        if bad:
            raise ConfigError(f"unknown key(s) in {section}: {', '.join(sorted(bad))}")
        cfg[section].update(values)
    for section, keys in REQUIRED.items():
        for key in keys:
            if cfg[section][key] is None:
                raise ConfigError(f"missing required key {section}.{key}")
    if cfg["dataset"]["kind"] not in ("darcy", "synthetic1d"):
        raise ConfigError(f"dataset.kind must be 'darcy' or 'synthetic1d', got {cfg['dataset']['kind']!r}")
    return cfg


def load_config(path) -> dict:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON in {path}: {exc}") from exc
    return resolve(raw)

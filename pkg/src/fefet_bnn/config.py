"""Run configuration: JSON file merged over defaults, unknown keys rejected.

Schema (all sections optional)::

    seed, output_dir, threads
    device:   width, length (um), n_domains (null: from density), density
    sim:      beta, tau0, nls_exponent, fe_thickness, ea_mean, ea_std, dt,
              vth0, delta_vth_max, k_prime
    pulse:    reset_amplitude, reset_width, reset_steps, program_start,
              program_stop, program_step, program_width, program_steps,
              read_voltage, drain_read, drain_program
    campaign: mode (combined | d2d | c2c), devices, cycles
    fit:      degree, sigma_floor, kind (combined | c2c | d2d)
    mapping:  g_min, g_max (null: fit window), w_min, w_max, sigma_mode
    network:  hidden_layer_sizes, activation
    train:    framework, epochs, batch_size, learning_rate, lr_decay_every,
              lr_decay_factor, kl_weight, kl_direction, kl_normalization,
              mc_samples, prior_update, sigma_init, det_noise_std, dtype
    dataset:  name, subset, test_size
    eval:     runs, profile_scale, seeds, mode, dynamics_metric
"""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import fields
from pathlib import Path
from typing import Any, Optional

from .device import DeviceGeometry, PulseScheme, PulseWaveform, SimParams
from .mapping import MappingConfig


class ConfigError(ValueError):
    pass


DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "output_dir": None,
    "threads": 1,
    "device": {"width": 1.0, "length": 1.0, "n_domains": None, "density": 5000.0},
    "sim": {f.name: f.default for f in fields(SimParams)},
    "pulse": {
        "reset_amplitude": -4.0, "reset_width": 1e-2, "reset_steps": 4,
        "program_start": 2.0, "program_stop": 4.0, "program_step": 0.02,
        "program_width": 1e-6, "program_steps": 4,
        "read_voltage": 1.2, "drain_read": 0.05, "drain_program": 0.0,
    },
    "campaign": {"mode": "combined", "devices": 3, "cycles": 50},
    "fit": {"degree": 3, "sigma_floor": 1e-4, "kind": "combined"},
    "mapping": {"g_min": None, "g_max": None, "w_min": 0.0, "w_max": 1.0, "sigma_mode": "jacobian"},
    "network": {"hidden_layer_sizes": [256, 128], "activation": "relu"},
    "train": {
        "framework": "bayes-aware", "epochs": 30, "batch_size": 128, "learning_rate": 1e-3,
        "lr_decay_every": 10, "lr_decay_factor": 0.5, "kl_weight": 0.1,
        "kl_direction": "prior_posterior", "kl_normalization": "dataset", "mc_samples": 1,
        "prior_update": "iteration", "sigma_init": 0.05, "det_noise_std": None, "dtype": "float32",
    },
    "dataset": {"name": "mnist10k", "subset": None, "test_size": 2000},
    "eval": {"runs": 5, "profile_scale": 1.0, "seeds": [0], "mode": "weight", "dynamics_metric": "test_acc"},
}

_CHOICES = {
    ("campaign", "mode"): ("combined", "d2d", "c2c"),
    ("fit", "kind"): ("combined", "d2d", "c2c"),
    ("train", "framework"): ("bayes-aware", "bayes-fixed", "det-noisy", "det-clean"),
    ("eval", "mode"): ("weight", "conductance"),
    ("eval", "dynamics_metric"): ("test_acc", "train_acc", "noisy_test_acc"),
}


def merge(base: dict, update: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, val in update.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[key], dict):
            if not isinstance(val, dict):
                raise ConfigError(f"{where!r} must be a mapping")
            out[key] = merge(base[key], val, where + ".")
        else:
            out[key] = copy.deepcopy(val)
    return out


def validate(cfg: dict):
    for (section, key), choices in _CHOICES.items():
        if cfg[section][key] not in choices:
            raise ConfigError(f"{section}.{key} must be one of {choices}, got {cfg[section][key]!r}")
    try:
        geometry(cfg)
        sim_params(cfg)
        pulse_scheme(cfg)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    if not 0 <= cfg["train"]["kl_weight"] <= 1:
        raise ConfigError("train.kl_weight must lie in [0, 1]")
    if cfg["eval"]["runs"] < 1:
        raise ConfigError("eval.runs must be >= 1")
    if cfg["fit"]["degree"] < 1:
        raise ConfigError("fit.degree must be >= 1")


def load_config(path: Optional[str] = None, overrides: Optional[dict] = None) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if path:
        try:
            user = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(user, dict):
            raise ConfigError("config file must hold a JSON object")
        cfg = merge(cfg, user)
    if overrides:
        cfg = merge(cfg, overrides)
    validate(cfg)
    return cfg


def dumps(cfg: dict) -> str:
    return json.dumps(cfg, indent=2, sort_keys=True) + "\n"


def config_hash(cfg: dict) -> str:
    """SHA-256 of the canonical JSON, ignoring where outputs are written."""
    c = {k: v for k, v in cfg.items() if k not in ("output_dir", "threads")}
    return hashlib.sha256(json.dumps(c, sort_keys=True).encode()).hexdigest()[:16]


def geometry(cfg: dict) -> DeviceGeometry:
    d = cfg["device"]
    if d["n_domains"] is None:
        return DeviceGeometry.from_area(d["width"], d["length"], d["density"])
    return DeviceGeometry(d["width"], d["length"], int(d["n_domains"]))


def sim_params(cfg: dict) -> SimParams:
    return SimParams(**cfg["sim"])


def pulse_scheme(cfg: dict) -> PulseScheme:
    p = cfg["pulse"]
    return PulseScheme(
        reset=PulseWaveform(p["reset_amplitude"], p["reset_width"], p["reset_steps"]),
        program_start=p["program_start"], program_stop=p["program_stop"], program_step=p["program_step"],
        program_width=p["program_width"], program_steps=p["program_steps"], read_voltage=p["read_voltage"],
        drain_read=p["drain_read"], drain_program=p["drain_program"],
    )


def mapping_config(cfg: dict, fit) -> MappingConfig:
    m = cfg["mapping"]
    g_min = fit.mu_range[0] if m["g_min"] is None else m["g_min"]
    g_max = fit.mu_range[1] if m["g_max"] is None else m["g_max"]
    return MappingConfig(g_min, g_max, m["w_min"], m["w_max"], m["sigma_mode"])

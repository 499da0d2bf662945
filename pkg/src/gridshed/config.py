"""Run configuration: defaults, validation, canonical hashing.

A run config is a nested dict mirroring ``DEFAULTS``; files supply overrides
in JSON.  Unknown keys are rejected with their full dotted path, every run
directory stores the resolved config next to its hash, and the same hash is
stamped into checkpoints, reports, and figures so artifacts stay traceable.
"""
from __future__ import annotations

import copy
import hashlib
import json
from typing import Any, Mapping

from .curriculum import CurriculumConfig
from .env import EnvSpec
from .pars import ParsConfig
from .sampling import SamplingConfig
from .uvls import UvlsSettings

__all__ = [
    "DEFAULTS",
    "ConfigError",
    "resolve_config",
    "load_config",
    "config_hash",
    "env_spec_hash",
    "sampling_config",
    "pars_config",
    "curriculum_config",
    "uvls_settings",
]

DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "workers": 0,  # 0 = all available cores
    "sampling": {
        "n_cases": 50,
        "load_range": [0.55, 1.15],
        "capacity_margin": 1.15,
        "dispatch_jitter": 0.10,
        "max_retries": 8,
    },
    "screening": {
        "resolution_cycles": 1,
        "max_cycles": 30,
        "duration_cycles": [3, 25],
        "n_fault_buses": 8,
        "durations_per_bus": 2,
        "n_quantiles": 2,
        "split": [0.5, 0.5],
    },
    "env": {
        "voltage_class_kv": 115.0,
        "motor_mw_threshold": 20.0,
    },
    "uvls": {
        "v_threshold": 0.90,
        "delay_s": 0.33,
        "shed_fraction": 0.20,
        "max_firings": 3,
        "backup_offset_s": 1.0,
    },
    "pars": {
        "n_directions": 32,
        "top_b": 16,
        "step_size": 0.02,
        "perturb_std": 0.02,
        "rollouts_per_direction": 20,
        "eval_every": 10,
    },
    "curriculum": {
        "stage1_iters": 30,
        "stage2_iters": 20,
        "stage3_iters": 20,
        "difficulty_threshold": -1000.0,
        "n_difficult_per_batch": 4,
        "z_dim": 4,
    },
    "meta_adapt": {
        "budget": 16,
        "spread": 0.1,
    },
}


class ConfigError(ValueError):
    """Invalid run configuration; the message names the offending key path."""


def _merge(defaults: Mapping[str, Any], overrides: Mapping[str, Any],
           path: str = "") -> dict[str, Any]:
    out = copy.deepcopy(dict(defaults))
    for key, val in overrides.items():
        here = f"{path}.{key}" if path else key
        if key not in defaults:
            raise ConfigError(f"unknown config key: {here}")
        base = defaults[key]
        if isinstance(base, Mapping):
            if not isinstance(val, Mapping):
                raise ConfigError(f"{here}: expected a table, got {type(val).__name__}")
            out[key] = _merge(base, val, here)
        else:
            if isinstance(base, bool) != isinstance(val, bool):
                raise ConfigError(f"{here}: expected {type(base).__name__}")
            if isinstance(base, (int, float)) and not isinstance(val, (int, float)):
                raise ConfigError(f"{here}: expected a number")
            if isinstance(base, str) and not isinstance(val, str):
                raise ConfigError(f"{here}: expected a string")
            if isinstance(base, list) and not isinstance(val, list):
                raise ConfigError(f"{here}: expected a list")
            out[key] = copy.deepcopy(val)
    return out


def resolve_config(overrides: Mapping[str, Any] | None = None) -> dict[str, Any]:
    """Defaults merged with overrides; raises ConfigError on unknown keys."""
    return _merge(DEFAULTS, overrides or {})


def load_config(path: str | None) -> dict[str, Any]:
    """Read a JSON config file (or None for pure defaults) and resolve it."""
    overrides: dict[str, Any] = {}
    if path is not None:
        with open(path) as fh:
            overrides = json.load(fh)
        if not isinstance(overrides, dict):
            raise ConfigError("config file must contain a JSON object")
    return resolve_config(overrides)


def _canonical(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(config: Mapping[str, Any]) -> str:
    """sha256 of the canonical serialization of a resolved config.

    ``workers`` is excluded: parallelism is an execution detail, and two runs
    that differ only in worker count are the same experiment (and produce
    bit-identical artifacts).
    """
    trimmed = {k: v for k, v in config.items() if k != "workers"}
    return hashlib.sha256(_canonical(trimmed).encode()).hexdigest()


def env_spec_hash(spec: EnvSpec) -> str:
    """Digest of the environment interface a policy was trained against."""
    payload = {
        "monitored_buses": list(spec.monitored_buses),
        "controllable_buses": list(spec.controllable_buses),
        "mask_assoc": list(spec.mask_assoc),
        "act_low": spec.act_low,
        "act_high": spec.act_high,
        "control_dt": spec.control_dt,
        "episode_len": spec.episode_len,
        "fault_start": spec.fault_start,
        "v_mask": spec.v_mask,
        "c1": spec.c1,
        "c2": spec.c2,
        "c3": spec.c3,
        "r_fail": spec.r_fail,
    }
    return hashlib.sha256(_canonical(payload).encode()).hexdigest()


# -- typed views over the resolved dict ---------------------------------------

def sampling_config(cfg: Mapping[str, Any], n_cases: int | None = None) -> SamplingConfig:
    s = cfg["sampling"]
    return SamplingConfig(
        n_cases=n_cases if n_cases is not None else s["n_cases"],
        load_range=tuple(s["load_range"]),
        capacity_margin=s["capacity_margin"],
        dispatch_jitter=s["dispatch_jitter"],
        max_retries=s["max_retries"],
        seed=cfg["seed"],
    )


def pars_config(cfg: Mapping[str, Any], **overrides) -> ParsConfig:
    p = dict(cfg["pars"])
    p.update(overrides)
    return ParsConfig(
        n_directions=p["n_directions"],
        top_b=p["top_b"],
        step_size=p["step_size"],
        perturb_std=p["perturb_std"],
        rollouts_per_direction=p["rollouts_per_direction"],
        eval_every=p["eval_every"],
        seed=cfg["seed"],
        perturb_z=bool(p.get("perturb_z", False)),
    )


def curriculum_config(cfg: Mapping[str, Any]) -> CurriculumConfig:
    c = cfg["curriculum"]
    return CurriculumConfig(
        stage1_iters=c["stage1_iters"],
        stage2_iters=c["stage2_iters"],
        stage3_iters=c["stage3_iters"],
        difficulty_threshold=c["difficulty_threshold"],
        n_difficult_per_batch=c["n_difficult_per_batch"],
        z_dim=c["z_dim"],
        seed=cfg["seed"],
    )


def uvls_settings(cfg: Mapping[str, Any], *, backup: bool) -> UvlsSettings:
    u = cfg["uvls"]
    return UvlsSettings(
        v_threshold=u["v_threshold"],
        delay_s=u["delay_s"],
        shed_fraction=u["shed_fraction"],
        max_firings=u["max_firings"],
        backup_offset_s=u["backup_offset_s"] if backup else 0.0,
    )

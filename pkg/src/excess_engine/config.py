"""Run configuration: TOML file merged over built-in defaults."""

from __future__ import annotations

import copy
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .errors import ValidationError

DEFAULTS = {
    "run": {
        "seed": 20220505,
        "draws": 1000,
        "point": "median",
    },
    "inputs": {
        "mortality": "mortality.csv",
        "covariates": "covariates.csv",
        "population": "population.csv",
        "region": "region.csv",
        "temperature": "temperature.csv",
        "subnational": "subnational.csv",
        "covid_reported": "covid_reported.csv",
    },
    "expected": {
        "trend": "Spline",
        "linear_countries": [],
        "gamma_samples": 10000,
    },
    "covariate": {
        "time_varying": [],
        "constant": [],
        "interaction": "",
        "pc_u": 1.0,
        "pc_alpha": 0.01,
        "fixed_sd": 31.6,
        "chains": 4,
        "warmup": 1000,
        "iterations": 2000,
        "rhat_max": 1.02,
        "min_ess": 400.0,
    },
    "subnational": {
        "chains": 4,
        "warmup": 500,
        "iterations": 1000,
        "tail_min_regions": 2,
        "constrained_iterations": 20000,
        "constrained_anchor_blocks": 20,
        "logit_p_sd": 0.316,
    },
    "validation": {
        "chains": 4,
        "warmup": 300,
        "iterations": 700,
        "subnational_replications": 50,
        "constrained_replications": 5,
    },
    "output": {
        "draws_csv": False,
        "plots": True,
    },
}

_INPUT_OPTIONAL = {"temperature", "subnational", "covid_reported"}


def _merge(base, update, where=""):
    out = copy.deepcopy(base)
    for key, value in update.items():
        name = f"{where}.{key}" if where else key
        if key not in base:
            raise ValidationError(f"unknown config key {name!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ValidationError(f"config key {name!r} must be a table")
            out[key] = _merge(base[key], value, name)
        else:
            default = base[key]
            if isinstance(default, bool) and not isinstance(value, bool):
                raise ValidationError(f"config key {name!r} must be true or false")
            if isinstance(default, (int, float)) and not isinstance(default, bool):
                if isinstance(value, bool) or not isinstance(value, (int, float)):
                    raise ValidationError(f"config key {name!r} must be a number")
                value = type(default)(value) if isinstance(default, float) else value
            if isinstance(default, list) and not isinstance(value, list):
                raise ValidationError(f"config key {name!r} must be a list")
            if isinstance(default, str) and not isinstance(value, str):
                raise ValidationError(f"config key {name!r} must be a string")
            out[key] = value
    return out


def load_config(path=None, overrides=None):
    """Defaults, then the TOML file at ``path``, then ``overrides``.

    Relative input paths resolve against the config file's directory.
    """
    cfg = copy.deepcopy(DEFAULTS)
    base = Path.cwd()
    if path is not None:
        path = Path(path)
        try:
            with path.open("rb") as fh:
                data = tomllib.load(fh)
        except FileNotFoundError:
            raise ValidationError(f"config file not found: {path}") from None
        except tomllib.TOMLDecodeError as err:
            raise ValidationError(f"{path}: invalid TOML: {err}") from None
        cfg = _merge(cfg, data)
        base = path.resolve().parent
    if overrides:
        cfg = _merge(cfg, overrides)
    cfg["inputs"] = {k: str((base / v).resolve()) if v else "" for k, v in cfg["inputs"].items()}
    if cfg["run"]["point"] not in ("median", "mean"):
        raise ValidationError("run.point must be 'median' or 'mean'")
    if cfg["expected"]["trend"] not in ("Spline", "Linear"):
        raise ValidationError("expected.trend must be 'Spline' or 'Linear'")
    for sec in ("covariate", "subnational", "validation"):
        if cfg[sec]["chains"] * cfg[sec]["iterations"] < cfg["run"]["draws"]:
            raise ValidationError(f"{sec}: chains x iterations must be at least run.draws")
    if not 0 <= cfg["run"]["seed"] < 2**64:
        raise ValidationError("run.seed must be a 64-bit unsigned integer")
    return cfg


def input_path(cfg, name):
    """Resolved path of an input file, or ``None`` for an absent optional one."""
    p = cfg["inputs"].get(name, "")
    if p and Path(p).exists():
        return Path(p)
    if name in _INPUT_OPTIONAL:
        return None
    raise ValidationError(f"input file {name!r} not found: {p or '(unset)'}")


def _toml_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, str):
        return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(v, list):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    return repr(v)


def dump_config(cfg):
    """TOML text for a configuration (stable key order)."""
    lines = []
    for section in DEFAULTS:
        lines.append(f"[{section}]")
        for key in DEFAULTS[section]:
            lines.append(f"{key} = {_toml_value(cfg[section][key])}")
        lines.append("")
    return "\n".join(lines)

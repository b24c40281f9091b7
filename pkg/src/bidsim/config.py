"""JSON config files for the command line.

A config file is a flat JSON object whose keys mirror the long CLI
flags (dashes become underscores). Values from the file fill in any
flag the user did not pass; explicit flags always win. Unknown keys are
rejected so typos fail loudly.
"""

import json
from typing import Optional

from .errors import ConfigurationError

KNOWN_KEYS = {
    # shared
    "out", "out_dir", "seed", "seeds", "run_id",
    # environment / method selection
    "env", "method", "methods", "tau", "bar",
    # training scale
    "episodes", "steps", "eval_every", "eval_episodes",
    # budgets
    "b0", "b0_values", "ratio", "ratios",
    # logs
    "log", "log_episodes", "timesteps", "opportunities", "ads_per_group",
    "log_seed",
    # misc
    "workers", "save", "checkpoint", "trace", "metrics", "grid",
}


def load_config(path: Optional[str]) -> dict:
    if path is None:
        return {}
    try:
        with open(path) as fh:
            obj = json.load(fh)
    except OSError as exc:
        raise ConfigurationError(f"cannot read config file {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"config file {path} is not valid JSON: {exc}") from None
    if not isinstance(obj, dict):
        raise ConfigurationError(f"config file {path} must hold a JSON object")
    unknown = sorted(set(obj) - KNOWN_KEYS)
    if unknown:
        raise ConfigurationError(f"unknown config keys: {', '.join(unknown)}")
    return obj


def pick(cli_value, cfg: dict, key: str, default=None):
    """Flag value if given, else config file value, else the default."""
    if cli_value is not None:
        return cli_value
    if key in cfg and cfg[key] is not None:
        return cfg[key]
    return default


def require(value, key: str):
    if value is None:
        raise ConfigurationError(f"missing required setting: {key}")
    return value


def positive_int(value, key: str) -> int:
    try:
        v = int(value)
    except (TypeError, ValueError):
        raise ConfigurationError(f"{key} must be an integer, got {value!r}") from None
    if v < 1:
        raise ConfigurationError(f"{key} must be >= 1, got {v}")
    return v


def positive_float(value, key: str) -> float:
    try:
        v = float(value)
    except (TypeError, ValueError):
        raise ConfigurationError(f"{key} must be a number, got {value!r}") from None
    if not v > 0:
        raise ConfigurationError(f"{key} must be > 0, got {v}")
    return v


def open_ratio(value, key: str) -> float:
    try:
        v = float(value)
    except (TypeError, ValueError):
        raise ConfigurationError(f"{key} must be a number, got {value!r}") from None
    if not 0 < v < 1:
        raise ConfigurationError(f"{key} must be strictly between 0 and 1, got {v}")
    return v


def float_list(value, key: str) -> list:
    """Accepts a JSON list or a comma-separated string."""
    if isinstance(value, str):
        parts = [p for p in value.split(",") if p.strip()]
    elif isinstance(value, (list, tuple)):
        parts = value
    else:
        raise ConfigurationError(f"{key} must be a list or comma-separated string")
    if not parts:
        raise ConfigurationError(f"{key} must not be empty")
    try:
        return [float(p) for p in parts]
    except (TypeError, ValueError):
        raise ConfigurationError(f"{key} has non-numeric entries: {value!r}") from None


def int_list(value, key: str) -> list:
    floats = float_list(value, key)
    out = []
    for v in floats:
        if v != int(v):
            raise ConfigurationError(f"{key} must hold integers, got {v}")
        out.append(int(v))
    return out

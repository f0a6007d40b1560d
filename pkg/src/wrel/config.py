"""Declarative run configuration: one TOML file plus dotted-path overrides.

Unknown keys are rejected. The resolved configuration is echoed into every
run directory as `config.toml` so runs are reproducible from their own
artifacts.
"""

from __future__ import annotations

import copy
from pathlib import Path

try:
    import tomllib  # py311+
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib

from .data import DEFAULT_CLASSES, DEFAULT_COLORS
from .errors import ConfigError
from .train import Stage1Config, Stage2Config, Stage3Config, TrainConfig

DEFAULTS: dict = {
    "seed": 0,
    "data": {
        "train": "",
        "val": "",
        "test": "",
        "split": "",
    },
    "synth": {
        "grid_size": 48,
        "classes": list(DEFAULT_CLASSES),
        "colors": list(DEFAULT_COLORS),
        "max_instances": 4,
        "corruption": 1.0,
        "n": 100,
    },
    "text": {
        "token_len": 16,
        "dim": 32,
        "ref_dim": 32,
    },
    "model": {
        "channels": [8, 16],
    },
    "loss": {
        "weak_weight": 1.0,
    },
    "lrb": {
        "prompt_tokens": 4,
        "init_std": 0.02,
    },
    "stage1": {
        "epochs": 15,
        "lr": 3e-5,
        "weight_decay": 0.01,
        "poly_power": 0.9,
        "batch": 8,
    },
    "stage2": {
        "epochs": 40,
        "aux_lr": 1e-5,
        "prompt_lr": 1e-6,
        "inner_steps": 1,
        "batch": 8,
    },
    "stage3": {
        "epochs": 40,
        "lr": 3e-5,
        "weight_decay": 0.01,
        "poly_power": 0.9,
        "batch": 8,
        "prompt_lr": 1e-6,
        "inner_steps": 1,
        "update_freq": 1,
        "alpha_max": 0.9995,
    },
    "probe": {
        "corruption_grid": [0.0, 0.25, 0.5, 0.75, 1.0],
        "seeds": [101, 102, 103, 104, 105],
        "n_weak_grid": [160],
        "n_accurate": 40,
        "eval_size": 80,
        "epochs": 8,
        "warmup_epochs": 4,
        "lr": 2e-3,
        "warmup_lr": 2e-3,
        "weight_decay": 0.01,
        "poly_power": 0.9,
        "batch": 8,
        "grid_size": 24,
        "max_instances": 3,
    },
}


def _merge(base: dict, override: dict, path: str = "") -> None:
    for key, value in override.items():
        here = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown config key {here!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {here!r} must be a table")
            _merge(base[key], value, here)
        else:
            base[key] = _coerce(base[key], value, here)


def _coerce(default, value, here: str):
    if isinstance(default, bool) or isinstance(value, bool):
        if type(default) is not type(value):
            raise ConfigError(f"config key {here!r} expects {type(default).__name__}")
        return value
    if isinstance(default, float) and isinstance(value, int):
        return float(value)
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"config key {here!r} expects a list")
        return list(value)
    if type(default) is not type(value) and default != "":
        if isinstance(default, str) != isinstance(value, str):
            raise ConfigError(f"config key {here!r} expects {type(default).__name__}")
    return value


def parse_override(text: str) -> dict:
    """Parse one `a.b.c=value` override into a nested dict."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} must look like key.path=value")
    key, raw = text.split("=", 1)
    key = key.strip()
    try:
        value = tomllib.loads(f"v = {raw.strip()}")["v"]
    except tomllib.TOMLDecodeError:
        value = raw.strip()  # bare strings are allowed without quotes
    out: dict = {}
    cursor = out
    parts = key.split(".")
    for part in parts[:-1]:
        cursor = cursor.setdefault(part, {})
    cursor[parts[-1]] = value
    return out


def load_config(path: str | Path | None = None, overrides: list[str] | None = None) -> dict:
    resolved = copy.deepcopy(DEFAULTS)
    if path:
        try:
            with open(path, "rb") as fh:
                loaded = tomllib.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"malformed config {path}: {exc}") from exc
        _merge(resolved, loaded)
    for item in overrides or []:
        _merge(resolved, parse_override(item))
    return resolved


def train_config(cfg: dict) -> TrainConfig:
    tc = TrainConfig(
        stage1=Stage1Config(**cfg["stage1"]),
        stage2=Stage2Config(**cfg["stage2"]),
        stage3=Stage3Config(**cfg["stage3"]),
        weak_weight=cfg["loss"]["weak_weight"],
        seed=cfg["seed"],
        token_len=cfg["text"]["token_len"],
        encoder_dim=cfg["text"]["dim"],
        ref_dim=cfg["text"]["ref_dim"],
        channels=tuple(cfg["model"]["channels"]),
        prompt_tokens=cfg["lrb"]["prompt_tokens"],
        prompt_init_std=cfg["lrb"]["init_std"],
    )
    tc.validate()
    return tc


def _toml_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, float)):
        return repr(value)
    if isinstance(value, str):
        escaped = value.replace("\\", "\\\\").replace('"', '\\"')
        return f'"{escaped}"'
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(_toml_value(v) for v in value) + "]"
    raise ConfigError(f"cannot serialize config value {value!r}")


def emit_toml(cfg: dict) -> str:
    """Serialize the resolved config; top-level scalars first, then tables."""
    lines = []
    for key, value in cfg.items():
        if not isinstance(value, dict):
            lines.append(f"{key} = {_toml_value(value)}")
    for key, value in cfg.items():
        if isinstance(value, dict):
            lines.append("")
            lines.append(f"[{key}]")
            for sub, sub_value in value.items():
                lines.append(f"{sub} = {_toml_value(sub_value)}")
    return "\n".join(lines) + "\n"

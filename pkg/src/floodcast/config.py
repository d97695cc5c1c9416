"""INI configuration with a fixed schema.

Every tunable lives in a named key of a per-module section. Unknown
sections or keys and badly typed values are rejected before any work
starts, so a typo cannot silently fall back to a default.
"""

import configparser
from dataclasses import dataclass
from typing import Any

from .errors import ConfigError


@dataclass(frozen=True)
class Key:
    type: type
    default: Any
    help: str


SCHEMA = {
    "qc": {
        "decimal_window_h": Key(float, 24.0, "rolling window for decimal-shift detection (h)"),
        "decimal_k": Key(float, 6.0, "robust z-score for decimal-shift detection"),
        "outlier_margin_m": Key(float, 1.0, "allowed excursion outside the historical stage range (m)"),
        "jump_factor": Key(float, 3.0, "jump limit as a multiple of the largest historical step"),
        "max_gap_h": Key(float, 6.0, "longest gap bridged by linear interpolation (h)"),
        "precip_cap_mm_h": Key(float, 200.0, "precipitation intensity cap, default 200 mm/h"),
    },
    "linear": {
        "lookback_h": Key(int, 72, "history used by the linear model, default 72 h"),
        "l2_lambda": Key(float, -1.0, "ridge penalty; negative selects it on a validation split"),
        "validation_fraction": Key(float, 0.2, "tail fraction held out for penalty selection"),
        "use_precip": Key(bool, False, "append basin rainfall history to the stage features"),
    },
    "lstm": {
        "hidden_size": Key(int, 128, "LSTM hidden units, default 128"),
        "target_lookback_h": Key(int, 168, "hindcast window of target stage and rain, default 168 h"),
        "upstream_lookback_h": Key(int, 240, "hindcast window of upstream stages, default 240 h"),
        "max_lead_h": Key(int, 48, "forecast horizon, default 48 h"),
        "n_components": Key(int, 3, "mixture components in the output distribution"),
        "seed": Key(int, 0, "initialization and batching seed"),
        "learning_rate": Key(float, 1e-3, "Adam learning rate"),
        "batch_size": Key(int, 64, "windows per step"),
        "n_steps": Key(int, 2000, "optimizer steps"),
        "eval_every": Key(int, 100, "steps between validation passes"),
        "clip_norm": Key(float, 1.0, "global gradient-norm clip"),
        "final_lr_fraction": Key(float, 0.1, "learning rate at the last step relative to the first"),
        "validation_fraction": Key(float, 0.2, "tail fraction used for model selection"),
    },
    "threshold": {
        "minimal_ratio": Key(float, 1.0, "lowest accepted true-wet/false-wet ratio"),
        "dilation_slope": Key(float, 2.0, "dilation radius in pixels per meter above the training maximum"),
    },
    "manifold": {
        "factor": Key(int, 32, "DEM pixels per coarse height cell, default 32"),
        "omega": Key(float, 1.7, "over-relaxation factor"),
        "tol": Key(float, 1e-4, "stopping update size (m)"),
        "max_sweeps": Key(int, 10000, "sweep cap"),
    },
    "evaluate": {
        "leo_margin_m": Key(float, 0.30, "leave-extreme-out exclusion margin, default 0.30 m"),
        "year_start_month": Key(int, 1, "first month of the validation year (1 = calendar year)"),
        "lead_h": Key(int, 24, "lead time scored by stage evaluation (h)"),
    },
    "alerting": {
        "closed_threshold": Key(bool, True, "trigger when the stage equals the threshold"),
        "suppression_window_h": Key(float, 6.0, "re-alert window per gauge and severity (h)"),
        "suppression_rise_m": Key(float, 0.1, "rise that overrides the re-alert window (m)"),
        "webhook_url": Key(str, "", "optional HTTP endpoint receiving alert JSON"),
        "webhook_attempts": Key(int, 3, "delivery attempts"),
        "webhook_backoff_s": Key(float, 0.5, "first retry delay, doubled per attempt (s)"),
    },
    "gauges": {
        "max_lead_limit_h": Key(int, 48, "largest allowed per-gauge lead time, default 48 h"),
    },
}

_POSITIVE = {
    ("qc", "decimal_window_h"), ("qc", "decimal_k"), ("qc", "jump_factor"), ("qc", "precip_cap_mm_h"),
    ("linear", "lookback_h"), ("lstm", "hidden_size"), ("lstm", "target_lookback_h"),
    ("lstm", "upstream_lookback_h"), ("lstm", "max_lead_h"), ("lstm", "n_components"),
    ("lstm", "learning_rate"), ("lstm", "batch_size"), ("lstm", "n_steps"), ("lstm", "eval_every"),
    ("lstm", "clip_norm"), ("threshold", "minimal_ratio"), ("manifold", "factor"), ("manifold", "omega"),
    ("manifold", "tol"), ("manifold", "max_sweeps"), ("evaluate", "lead_h"),
    ("alerting", "webhook_attempts"), ("gauges", "max_lead_limit_h"),
}


class Config(dict):
    """Section -> key -> typed value, fully populated with defaults."""

    def section(self, name: str) -> dict:
        return dict(self[name])


def defaults() -> Config:
    return Config({s: {k: v.default for k, v in keys.items()} for s, keys in SCHEMA.items()})


def _coerce(section, key, text):
    spec = SCHEMA[section][key]
    try:
        if spec.type is bool:
            low = text.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if spec.type is str:
            return text.strip().strip('"')
        return spec.type(text.strip())
    except ValueError:
        raise ConfigError(f"[{section}] {key}: expected {spec.type.__name__}, got {text!r}") from None


def validate(cfg: Config) -> Config:
    for section, key in _POSITIVE:
        if not cfg[section][key] > 0:
            raise ConfigError(f"[{section}] {key} must be positive")
    if not 0 <= cfg["evaluate"]["leo_margin_m"]:
        raise ConfigError("[evaluate] leo_margin_m must be non-negative")
    if not 1 <= cfg["evaluate"]["year_start_month"] <= 12:
        raise ConfigError("[evaluate] year_start_month must be in 1..12")
    if not 0 < cfg["lstm"]["final_lr_fraction"] <= 1:
        raise ConfigError("[lstm] final_lr_fraction must lie in (0, 1]")
    for sec in ("linear", "lstm"):
        if not 0 <= cfg[sec]["validation_fraction"] < 1:
            raise ConfigError(f"[{sec}] validation_fraction must be in [0, 1)")
    if cfg["lstm"]["upstream_lookback_h"] < cfg["lstm"]["target_lookback_h"]:
        raise ConfigError("[lstm] upstream_lookback_h must be at least target_lookback_h")
    if cfg["lstm"]["max_lead_h"] > cfg["gauges"]["max_lead_limit_h"]:
        raise ConfigError("[lstm] max_lead_h exceeds [gauges] max_lead_limit_h")
    return cfg


def parse_config(text: str) -> Config:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    cfg = defaults()
    for section in cp.sections():
        if section not in SCHEMA:
            raise ConfigError(f"unknown config section [{section}]")
        for key, raw in cp.items(section):
            if key not in SCHEMA[section]:
                raise ConfigError(f"unknown key '{key}' in [{section}]")
            cfg[section][key] = _coerce(section, key, raw)
    return validate(cfg)


def load_config(path=None) -> Config:
    if path is None:
        return validate(defaults())
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text)


def format_config(cfg: Config) -> str:
    lines = []
    for section, keys in SCHEMA.items():
        lines.append(f"[{section}]")
        for key, spec in keys.items():
            val = cfg[section][key]
            text = ("true" if val else "false") if spec.type is bool else str(val)
            lines.append(f"# {spec.help}")
            lines.append(f"{key} = {text}")
        lines.append("")
    return "\n".join(lines)


def describe_defaults() -> str:
    """Help text listing every key with its default."""
    out = []
    for section, keys in SCHEMA.items():
        for key, spec in keys.items():
            out.append(f"  [{section}] {key} = {spec.default!r}: {spec.help}")
    return "\n".join(out)

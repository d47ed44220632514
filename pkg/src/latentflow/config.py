"""Experiment configuration: flat `key = value` text, typed by defaults.

Every key has a desk-scale default; a config file only needs the keys it
overrides. Lines starting with '#' are comments. Values keep the type of
their default (int, float, bool, or string); the strings 'auto' and ''
mark resolve-at-build and unset. parse -> serialize -> parse is a fixed
point.
"""

from __future__ import annotations

import math

from .errors import ConfigError

# desk-scale defaults; paper-style presets noted where they differ
DEFAULTS = {
    "data.path": "shapes.lfds",
    "data.size": 20000,
    "data.classes": 8,
    "data.image_size": 16,
    "data.seed": 0,
    "modality.latent.encoder": "shapeparam",   # shapeparam|downsample|fixedlinear|none
    "modality.latent.dim": 16,                  # fixedlinear output dim
    "modality.latent.loss_weight": "auto",      # auto-balance; preset 0.333
    "modality.pixel.loss_weight": 1.0,
    "normalize.target_std": "auto",             # measured pixel std; preset 0.485
    "model.depth": 6,
    "model.hidden_dim": 64,
    "model.heads": 4,
    "model.patch": 4,
    "model.bottleneck": 32,
    "model.expert_layers": 2,
    "model.class_drop": 0.1,
    "model.fourier_freqs": 64,
    "train.regime": "multischedule",            # multischedule | cascaded
    "train.epochs": 10,
    "train.batch": 128,
    "train.lr": 3e-4,
    "train.beta1": 0.9,
    "train.beta2": 0.95,
    "train.warmup_steps": 100,
    "train.ema": 0.999,                         # paper preset 0.9999
    "train.seed": 0,
    "train.unconditional": False,
    "train.t_clip": "auto",                     # 1/3 multischedule, 0.05 cascaded
    "train.log_every": 50,
    "train.workers": 1,
    "sampler.p_latent": 0.4,
    "sampler.mu_latent": -1.2,
    "sampler.sigma_latent": 1.0,
    "sampler.mu_pixel": -0.8,
    "sampler.sigma_pixel": 0.8,
    "sampler.early_frac": 0.1,
    "sampler.beta_max": 0.25,
    "sample.plan": "cascaded",
    "sample.steps": 50,
    "sample.solver": "heun",
    "sample.alpha_inf": 1.0,
    "sample.use_ema": True,
    "sample.seed": 0,
    "guide.mode": "none",
    "guide.omega": 1.5,
    "guide.interval.latent": "0:1",
    "guide.interval.pixel": "0:1",
    "guide.weak_ckpt": "",
}


class RunConfig:
    """Immutable view over DEFAULTS with overrides."""

    def __init__(self, overrides: dict | None = None):
        self._values = dict(DEFAULTS)
        for key, value in (overrides or {}).items():
            if key not in DEFAULTS:
                raise ConfigError(f"unknown config key {key!r}")
            self._values[key] = _coerce(key, value)

    def __getitem__(self, key: str):
        try:
            return self._values[key]
        except KeyError:
            raise ConfigError(f"unknown config key {key!r}") from None

    def override(self, updates: dict) -> "RunConfig":
        merged = dict(self._values)
        for key, value in updates.items():
            if key not in DEFAULTS:
                raise ConfigError(f"unknown config key {key!r}")
            merged[key] = _coerce(key, value)
        return RunConfig(merged)

    def items(self):
        return self._values.items()

    def __eq__(self, other):
        return isinstance(other, RunConfig) and self._values == other._values

    # resolved values ------------------------------------------------------

    def t_clip(self) -> float:
        raw = self["train.t_clip"]
        if raw == "auto":
            return 1.0 / 3.0 if self["train.regime"] == "multischedule" else 0.05
        return float(raw)

    def target_std(self):
        raw = self["normalize.target_std"]
        return None if raw == "auto" else float(raw)

    def latent_loss_weight(self):
        raw = self["modality.latent.loss_weight"]
        return None if raw == "auto" else float(raw)

    def guidance_interval(self, modality: str):
        lo, _, hi = self[f"guide.interval.{modality}"].partition(":")
        try:
            lo_f, hi_f = float(lo), float(hi)
        except ValueError:
            raise ConfigError(
                f"bad interval {self[f'guide.interval.{modality}']!r}; want lo:hi"
            ) from None
        return lo_f, hi_f


def _coerce(key: str, value):
    default = DEFAULTS[key]
    if isinstance(value, str) and not isinstance(default, str):
        text = value.strip()
        if isinstance(default, bool):
            if text.lower() in ("true", "1", "yes"):
                return True
            if text.lower() in ("false", "0", "no"):
                return False
            raise ConfigError(f"bad boolean for {key!r}: {text!r}")
        if isinstance(default, int):
            try:
                return int(text)
            except ValueError:
                raise ConfigError(f"bad integer for {key!r}: {text!r}") from None
        if isinstance(default, float):
            try:
                out = float(text)
            except ValueError:
                raise ConfigError(f"bad number for {key!r}: {text!r}") from None
            if not math.isfinite(out):
                raise ConfigError(f"non-finite value for {key!r}")
            return out
    if isinstance(default, bool) and isinstance(value, bool):
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool):
            raise ConfigError(f"bad integer for {key!r}: {value!r}")
        if isinstance(value, int):
            return value
    if isinstance(default, float) and isinstance(value, (int, float)):
        return float(value)
    if isinstance(default, str):
        return str(value)
    if type(value) is type(default):
        return value
    raise ConfigError(f"bad value for {key!r}: {value!r}")


def parse_config(text: str) -> RunConfig:
    overrides = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        overrides[key.strip()] = value.strip()
    return RunConfig(overrides)


def serialize_config(config: RunConfig) -> str:
    lines = ["# latentflow run configuration"]
    for key in DEFAULTS:
        value = config[key]
        if isinstance(value, bool):
            text = "true" if value else "false"
        elif isinstance(value, float):
            text = repr(value)
        else:
            text = str(value)
        lines.append(f"{key} = {text}")
    return "\n".join(lines) + "\n"


def load_config(path) -> RunConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read())


def save_config(path, config: RunConfig) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(serialize_config(config))

"""Training configuration and its file/override parser.

Config files are flat YAML mappings. Dotted keys (``data.hazy_dir``) may also
be written as nested mappings (``data: {hazy_dir: ...}``).
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional

import yaml

from .errors import ConfigError
from .losses import LossWeights
from .networks import GeneratorSpec, NetworkSpec

NEGATIVE_SOURCES = ("adversarial", "random_sampled")


@dataclass
class TrainConfig:
    epochs: int = 400
    lr: float = 1e-4
    lr_neg: Optional[float] = None       # defaults to lr
    decay_start: int = 200
    batch_size: int = 1
    crop: int = 256
    negatives: int = 256
    tau: float = 0.07
    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda3: float = 0.1
    lambda4: float = 1e-3
    lambda5: float = 1e-2
    negative_source: str = "adversarial"
    dual_cycle: bool = True
    seed: int = 0
    hazy_dir: Optional[str] = None
    clean_dir: Optional[str] = None
    out_dir: str = "runs/cddgan"
    # architecture
    ngf: int = 64
    ndf: int = 64
    n_blocks: int = 9
    taps: tuple = (1, 5, 9, 13, 17)
    embed_dim: int = 256
    noise_dim: int = 16
    num_patches: int = 256
    dc_radius: int = 7
    # bookkeeping
    steps_per_epoch: int = 0             # 0: one pass over the larger side
    checkpoint_every: int = 50           # epochs
    dtype: str = "float32"
    threads: int = 1
    provenance: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if not self.lr > 0 or (self.lr_neg is not None and not self.lr_neg > 0):
            raise ConfigError("learning rates must be positive")
        if not 0 <= self.decay_start <= self.epochs:
            raise ConfigError("decay_start must lie in [0, epochs]")
        if self.negatives < 1:
            raise ConfigError("negatives must be >= 1")
        if self.batch_size < 1 or self.crop < 1 or self.num_patches < 1:
            raise ConfigError("batch_size, crop and num_patches must be positive")
        if self.negative_source not in NEGATIVE_SOURCES:
            raise ConfigError(
                f"negative_source must be one of {NEGATIVE_SOURCES}, got {self.negative_source!r}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")
        if self.crop % 4:
            raise ConfigError("crop must be divisible by 4")
        try:
            self.loss_weights
            self.network_spec
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    @property
    def eta_neg(self) -> float:
        return self.lr if self.lr_neg is None else self.lr_neg

    @property
    def loss_weights(self) -> LossWeights:
        return LossWeights(div=self.lambda1, adv=self.lambda2, cycle=self.lambda3,
                           tv=self.lambda4, dc=self.lambda5, tau=self.tau)

    @property
    def network_spec(self) -> NetworkSpec:
        return NetworkSpec(GeneratorSpec(ngf=self.ngf, n_blocks=self.n_blocks, taps=self.taps),
                           ndf=self.ndf, embed_dim=self.embed_dim, noise_dim=self.noise_dim)

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d.pop("provenance")
        d["taps"] = list(self.taps)
        return d


# file key -> dataclass field
KEY_ALIASES = {"data.hazy_dir": "hazy_dir", "data.clean_dir": "clean_dir"}
_FIELDS = {f.name: f for f in fields(TrainConfig) if f.name != "provenance"}
FILE_KEYS = sorted([k for k in _FIELDS if k not in KEY_ALIASES.values()] + list(KEY_ALIASES))


def _flatten(d, prefix=""):
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def _parse_bool(value, key):
    if isinstance(value, bool):
        return value
    s = str(value).strip().lower()
    if s in ("on", "true", "yes", "1"):
        return True
    if s in ("off", "false", "no", "0"):
        return False
    raise ConfigError(f"{key}: expected on/off, got {value!r}")


def _coerce(name, value, key):
    default = _FIELDS[name].default
    if name == "dual_cycle":
        return _parse_bool(value, key)
    if name == "taps":
        if isinstance(value, str):
            value = [v for v in value.replace(",", " ").split() if v]
        try:
            return tuple(int(v) for v in value)
        except (TypeError, ValueError):
            raise ConfigError(f"{key}: expected a list of integers, got {value!r}") from None
    if value is None:
        if default is None:
            return None
        raise ConfigError(f"{key}: value required")
    kind = type(default) if default is not None else (float if name == "lr_neg" else str)
    if isinstance(value, bool) and kind is not bool:
        raise ConfigError(f"{key}: expected {kind.__name__}, got a boolean")
    try:
        if kind is int:
            if isinstance(value, float) and not value.is_integer():
                raise ValueError
            if isinstance(value, str):
                value = float(value) if any(c in value for c in ".eE") else int(value)
                if isinstance(value, float) and not value.is_integer():
                    raise ValueError
            return int(value)
        if kind is float:
            return float(value)
        return str(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: expected {kind.__name__}, got {value!r}") from None


def _apply(values: dict, source: str, target: dict, provenance: dict):
    for key, value in values.items():
        name = KEY_ALIASES.get(key, key)
        if name not in _FIELDS:
            raise ConfigError(f"unknown config key: {key!r}")
        target[name] = _coerce(name, value, key)
        provenance[name] = source


def parse_config(path=None, overrides=None, require_data: bool = False) -> TrainConfig:
    """Build a validated :class:`TrainConfig` from defaults, an optional YAML
    file and a mapping of overrides (highest precedence).

    The returned config's ``provenance`` maps each field to ``"default"``,
    ``"file"`` or ``"override"``.
    """
    values: dict = {}
    provenance = {name: "default" for name in _FIELDS}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            loaded = yaml.safe_load(path.read_text())
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse config file {path}: {exc}") from exc
        if loaded is None:
            loaded = {}
        if not isinstance(loaded, dict):
            raise ConfigError("config file must contain a mapping of keys to values")
        _apply(_flatten(loaded), "file", values, provenance)
    if overrides:
        _apply(dict(overrides), "override", values, provenance)
    cfg = TrainConfig(**values)
    cfg.provenance = provenance
    if require_data and (not cfg.hazy_dir or not cfg.clean_dir):
        raise ConfigError("data.hazy_dir and data.clean_dir are required")
    return cfg


def parse_overrides(items) -> dict:
    """``["key=value", ...]`` -> dict; values are YAML scalars."""
    out = {}
    for item in items or ():
        if "=" not in item:
            raise ConfigError(f"override must look like key=value, got {item!r}")
        key, raw = item.split("=", 1)
        try:
            out[key.strip()] = yaml.safe_load(raw) if raw.strip() else None
        except yaml.YAMLError:
            out[key.strip()] = raw
    return out

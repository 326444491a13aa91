"""Experiment configuration files (INI: key-value pairs grouped in sections).

Example::

    [experiment]
    family = fc-lr
    seed = 0
    dataset = data/p05

    [latent]
    latent_dim = 2
    rank = 1

    [schedule]
    lr = 1e-3
    max_epochs = 30

Family-specific keys are rejected when they do not apply (``rank`` outside the
low-rank families, ``n_components``/``tau`` outside mixtures, ``dropout_rate``
outside mc-dropout, ``ensemble_size`` outside ensemble). Unset family keys fall
back to the per-family defaults below.
"""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .model import FAMILIES, LATENT_FAMILIES, base_family, is_mixture


class ConfigError(ValueError):
    pass


# Selected values for the LIDC-like setting; baselines have no latent space.
FAMILY_DEFAULTS: dict[str, dict] = {
    "aa": {"latent_dim": 6},
    "fc": {"latent_dim": 2},
    "fc-lr": {"latent_dim": 2, "rank": 1},
    "aa-mixture": {"latent_dim": 4, "n_components": 5, "tau": 0.36},
    "fc-mixture": {"latent_dim": 2, "n_components": 9, "tau": 0.28},
    "fc-lr-mixture": {"latent_dim": 4, "rank": 2, "n_components": 2, "tau": 0.20},
    "mc-dropout": {"dropout_rate": 0.3},
    "ensemble": {"ensemble_size": 4},
    "unet": {},
}

# section -> keys, in file order
_LAYOUT = {
    "experiment": ("family", "seed", "dataset"),
    "latent": ("latent_dim", "beta", "rank", "n_components", "tau", "kl_samples"),
    "baseline": ("dropout_rate", "ensemble_size"),
    "architecture": ("filters", "bottleneck", "ce_reduction"),
    "schedule": ("lr", "batch_size", "patience", "max_epochs", "augment", "train_raters"),
    "eval": ("n_eval_samples",),
}

_FAMILY_KEYS = {"latent_dim", "rank", "n_components", "tau", "dropout_rate", "ensemble_size"}


@dataclass
class ExperimentConfig:
    family: str = "aa"
    seed: int = 0
    dataset: str = ""
    latent_dim: int | None = None
    beta: float = 1.0
    rank: int | None = None
    n_components: int | None = None
    tau: float | None = None
    kl_samples: int = 16
    dropout_rate: float | None = None
    ensemble_size: int | None = None
    filters: tuple[int, ...] = (32, 64, 128)
    bottleneck: int = 512
    ce_reduction: str = "sum"
    lr: float = 1e-4
    batch_size: int = 8
    patience: int = 20
    max_epochs: int = 100
    augment: bool = False
    train_raters: int | None = None
    n_eval_samples: int = 16

    def resolved(self) -> "ExperimentConfig":
        """Validate and fill family defaults; the result round-trips through :func:`dumps`."""
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown family {self.family!r}; expected one of {', '.join(FAMILIES)}")
        allowed = set(FAMILY_DEFAULTS[self.family])
        if self.family in LATENT_FAMILIES:
            allowed.add("latent_dim")
        for key in _FAMILY_KEYS:
            if getattr(self, key) is not None and key not in allowed:
                raise ConfigError(f"{key} does not apply to family {self.family!r}")
        cfg = replace(self, **{k: v for k, v in FAMILY_DEFAULTS[self.family].items() if getattr(self, k) is None})
        cfg._check()
        return cfg

    def _check(self) -> None:
        if self.family in LATENT_FAMILIES:
            if self.latent_dim < 1:
                raise ConfigError("latent_dim must be >= 1")
            if base_family(self.family) == "fc-lr" and not 1 <= self.rank <= self.latent_dim - 1:
                raise ConfigError(f"rank must lie in [1, latent_dim - 1] = [1, {self.latent_dim - 1}], got {self.rank}")
            if is_mixture(self.family):
                if self.n_components < 1:
                    raise ConfigError("n_components must be >= 1")
                if not self.tau > 0:
                    raise ConfigError("tau must be positive")
            if self.beta < 0:
                raise ConfigError("beta must be non-negative")
            if self.kl_samples < 1:
                raise ConfigError("kl_samples must be >= 1")
        if self.family == "mc-dropout" and not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError("dropout_rate must lie in [0, 1)")
        if self.family == "ensemble" and self.ensemble_size < 2:
            raise ConfigError("ensemble_size must be >= 2")
        if not self.filters or any(f < 1 for f in self.filters) or self.bottleneck < 1:
            raise ConfigError("filters and bottleneck must be positive")
        if self.ce_reduction not in ("mean", "sum"):
            raise ConfigError("ce_reduction must be 'mean' or 'sum'")
        if self.lr <= 0 or self.batch_size < 1 or self.patience < 0 or self.max_epochs < 1:
            raise ConfigError("schedule values out of range")
        if self.train_raters is not None and self.train_raters < 1:
            raise ConfigError("train_raters must be >= 1")
        if self.n_eval_samples < 2:
            raise ConfigError("n_eval_samples must be >= 2")


def _coerce(name: str, raw: str):
    ftype = {f.name: f.type for f in fields(ExperimentConfig)}[name]
    raw = raw.strip()
    try:
        if "None" in ftype and raw in ("", "none", "None"):
            return None
        if ftype.startswith("tuple"):
            return tuple(int(v) for v in raw.replace(" ", "").split(",") if v)
        if ftype.startswith("bool"):
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if ftype.startswith("int"):
            return int(raw)
        if ftype.startswith("float"):
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {raw!r} as {ftype}") from None


def loads(text: str) -> ExperimentConfig:
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    values = {}
    for section in cp.sections():
        if section not in _LAYOUT:
            raise ConfigError(f"unknown section [{section}]")
        for key, raw in cp.items(section):
            if key not in _LAYOUT[section]:
                raise ConfigError(f"unknown key {key!r} in section [{section}]")
            values[key] = _coerce(key, raw)
    return ExperimentConfig(**values)


def load(path: str | Path) -> ExperimentConfig:
    try:
        return loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None


def dumps(cfg: ExperimentConfig) -> str:
    cp = configparser.ConfigParser(interpolation=None)
    for section, keys in _LAYOUT.items():
        cp.add_section(section)
        for key in keys:
            v = getattr(cfg, key)
            if v is None:
                continue
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            cp.set(section, key, repr(v) if isinstance(v, float) else str(v))
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()

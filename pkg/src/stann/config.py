"""Flat ``key = value`` run configuration files."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields
from pathlib import Path

from .errors import ConfigError
from .train import TrainConfig

VARIANT_FLAGS = {"stann": ("plain", None), "stann-r": ("R", None), "stann-d": ("D", None), "stnn": ("plain", 1)}


@dataclass
class RunConfig:
    """Training settings plus the run-level inputs of a subcommand."""

    train: TrainConfig = field(default_factory=TrainConfig)
    data: str = ""
    strategy: str = "simple"
    rf: str = "0"
    out: str = "out"
    missing: str = "reject"
    annualization: str = "conventional"
    origins: int = 5
    checkpoint: str = ""
    forecasts: str = ""
    seeds: int = 1

    def __post_init__(self):
        if self.strategy not in ("simple", "equal"):
            raise ConfigError(f"strategy must be 'simple' or 'equal', got {self.strategy!r}")
        if self.missing.replace("-", "_") not in ("reject", "forward_fill"):
            raise ConfigError(f"missing must be 'reject' or 'forward-fill', got {self.missing!r}")
        if self.annualization not in ("conventional", "paper"):
            raise ConfigError(f"annualization must be 'conventional' or 'paper', got {self.annualization!r}")
        if self.origins < 1 or self.seeds < 1:
            raise ConfigError("origins and seeds must be >= 1")

    @classmethod
    def run_keys(cls) -> list[str]:
        return [f.name for f in fields(cls) if f.name != "train"]

    @classmethod
    def keys(cls) -> list[str]:
        return TrainConfig.keys() + cls.run_keys()

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.run_keys()}
        d.update(self.train.to_dict())
        return dict(sorted(d.items()))

    @classmethod
    def from_dict(cls, values: dict) -> "RunConfig":
        unknown = sorted(set(values) - set(cls.keys()))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        tvals = {}
        for f in fields(TrainConfig):
            if f.name in values:
                tvals[f.name] = _coerce(f.name, values[f.name], type(getattr(TrainConfig(), f.name)))
        rvals = {}
        defaults = cls()
        for k in cls.run_keys():
            if k in values:
                rvals[k] = _coerce(k, values[k], type(getattr(defaults, k)))
        try:
            train = TrainConfig(**tvals)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None
        return cls(train=train, **rvals)


def variant_overrides(flag: str) -> dict:
    """Config values implied by a ``--variant`` flag."""
    try:
        variant, lag = VARIANT_FLAGS[flag]
    except KeyError:
        raise ConfigError(f"variant must be one of {sorted(VARIANT_FLAGS)}, got {flag!r}") from None
    out = {"variant": variant}
    if lag is not None:
        out["max_lag"] = lag
    return out


def _coerce(key: str, value, kind: type):
    if isinstance(value, kind) and not (kind is int and isinstance(value, bool)):
        return value
    if kind is bool:
        if isinstance(value, str) and value.lower() in ("true", "false"):
            return value.lower() == "true"
        raise ConfigError(f"{key}: expected true/false, got {value!r}")
    if kind is int:
        if isinstance(value, float) and value.is_integer():
            return int(value)
        try:
            return int(str(value))
        except ValueError:
            raise ConfigError(f"{key}: expected an integer, got {value!r}") from None
    if kind is float:
        if isinstance(value, bool):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        try:
            return float(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{key}: expected a number, got {value!r}") from None
    return str(value)


def _parse_value(text: str):
    text = text.strip()
    if len(text) >= 2 and text[0] == text[-1] and text[0] in "\"'":
        return text[1:-1]
    low = text.lower()
    if low in ("true", "false"):
        return low == "true"
    for conv in (int, float):
        try:
            return conv(text)
        except ValueError:
            pass
    return text


def parse_config(text: str, source: str = "<config>") -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out: dict = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = _parse_value(value)
    return out


def load_config(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    if path.suffix == ".json":
        # run manifests carry their config as JSON
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from None
        return dict(doc.get("config", doc))
    return parse_config(text, str(path))


def dump_config(cfg: RunConfig) -> str:
    lines = []
    for k, v in cfg.to_dict().items():
        if isinstance(v, bool):
            v = "true" if v else "false"
        elif isinstance(v, float):
            v = format(v, ".17g")
        lines.append(f"{k} = {v}")
    return "\n".join(lines) + "\n"

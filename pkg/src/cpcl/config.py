"""Flat ``key = value`` run configuration files."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError, ValidationError
from .trainer import TrainConfig


def _dims(value) -> tuple:
    if isinstance(value, (tuple, list)):
        dims = tuple(int(v) for v in value)
    else:
        dims = tuple(int(v) for v in str(value).replace("x", ",").split(",") if v.strip())
    if len(dims) == 1:
        dims = dims * 3
    if len(dims) != 3:
        raise ValueError(f"dims needs 1 or 3 integers, got {value!r}")
    return dims


@dataclass
class DataConfig:
    data_dir: str = "data"
    manifest: str = ""
    dims: tuple = (48, 48, 48)
    count: int = 40
    val_count: int = 2
    test_count: int = 8
    labeled_fraction: float = 0.1
    out_dir: str = "runs"

    def manifest_path(self) -> Path:
        return Path(self.manifest) if self.manifest else Path(self.data_dir) / "manifest.jsonl"


@dataclass
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)


def _field_types() -> dict[str, tuple[str, object]]:
    out = {}
    for section, cls in (("train", TrainConfig), ("data", DataConfig)):
        for f in dataclasses.fields(cls):
            out[f.name] = (section, f.default)
    return out


FIELDS = _field_types()


def defaults_help() -> str:
    """One line per accepted key with its default, for ``--help``."""
    lines = ["config keys (key = value, '#' starts a comment):"]
    for name, (_, default) in FIELDS.items():
        if isinstance(default, tuple):
            default = ",".join(str(d) for d in default)
        lines.append(f"  {name:<20} default: {default}")
    return "\n".join(lines)


def _convert(name: str, raw: str, default):
    try:
        if isinstance(default, bool):
            if raw.lower() not in ("true", "false", "1", "0"):
                raise ValueError(raw)
            return raw.lower() in ("true", "1")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return _dims(raw)
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {name}: {raw!r}") from None


def parse_config_text(text: str, source: str = "<config>") -> dict[str, object]:
    values: dict[str, object] = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected 'key = value', got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in FIELDS:
            raise ConfigError(f"{source}:{n}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"{source}:{n}: duplicate key {key!r}")
        values[key] = _convert(key, raw, FIELDS[key][1])
    return values


def build_config(values: dict[str, object] | None = None) -> RunConfig:
    values = values or {}
    unknown = set(values) - set(FIELDS)
    if unknown:
        raise ConfigError(f"unknown keys: {sorted(unknown)}")
    train_kw = {k: v for k, v in values.items() if FIELDS[k][0] == "train"}
    data_kw = {k: v for k, v in values.items() if FIELDS[k][0] == "data"}
    try:
        return RunConfig(TrainConfig(**train_kw), DataConfig(**data_kw))
    except ValidationError as exc:
        raise ConfigError(str(exc)) from None


def load_config(path=None, **overrides) -> RunConfig:
    values: dict[str, object] = {}
    if path is not None:
        p = Path(path)
        try:
            text = p.read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"{p}: {exc.strerror}") from None
        values = parse_config_text(text, str(p))
    values.update({k: v for k, v in overrides.items() if v is not None})
    return build_config(values)


def dump_config(cfg: RunConfig) -> str:
    lines = []
    for section in (cfg.train, cfg.data):
        for f in dataclasses.fields(section):
            v = getattr(section, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(d) for d in v)
            lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"

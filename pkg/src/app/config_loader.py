# src/app/config_loader.py
from __future__ import annotations

import logging
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from collections.abc import Iterable, Mapping
from pathlib import Path
from typing import Any

from pydantic import ValidationError as PydanticValidationError
from pydantic_settings import TomlConfigSettingsSource

from app.errors import ConfigError
from app.settings import Settings, get_settings
from core.dtos import ExperimentConfig

logger = logging.getLogger(__name__)


def parse_override(item: str) -> tuple[str, Any]:
    """
    'dmc.schedule.target_cr=2.0' -> ('dmc.schedule.target_cr', 2.0).

    Values parse as TOML; `null` clears an optional key, anything else unparsable stays a string.
    """
    key, sep, raw = item.partition("=")
    key = key.strip()
    if not sep or not key:
        raise ConfigError(f"override {item!r} is not of the form section.key=value")
    raw = raw.strip()
    if raw == "null":
        return key, None
    try:
        value = tomllib.loads(f"v = {raw}")["v"]
    except tomllib.TOMLDecodeError:
        value = raw
    return key, value


def nest(dotted: Mapping[str, Any]) -> dict[str, Any]:
    out: dict[str, Any] = {}
    for key, value in dotted.items():
        node = out
        *parents, leaf = key.split(".")
        for part in parents:
            child = node.setdefault(part, {})
            if not isinstance(child, dict):
                raise ConfigError(f"override {key!r} descends into the scalar {part!r}")
            node = child
        node[leaf] = value
    return out


def deep_merge(base: Mapping[str, Any], top: Mapping[str, Any]) -> dict[str, Any]:
    merged = dict(base)
    for key, value in top.items():
        if isinstance(value, Mapping) and isinstance(merged.get(key), Mapping):
            merged[key] = deep_merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def _read_toml(path: Path) -> dict[str, Any]:
    try:
        return dict(TomlConfigSettingsSource(ExperimentConfig, toml_file=path)())
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"{path} is not valid TOML: {e}") from e


def _resolve_paths(raw: dict[str, Any], base_dir: Path) -> None:
    data = raw.get("data")
    if isinstance(data, dict) and data.get("corpus_path") is not None:
        p = Path(str(data["corpus_path"])).expanduser()
        data["corpus_path"] = p if p.is_absolute() else (base_dir / p).resolve()
    run = raw.get("run")
    if isinstance(run, dict) and run.get("out_dir") is not None:
        p = Path(str(run["out_dir"])).expanduser()
        run["out_dir"] = p if p.is_absolute() else (base_dir / p).resolve()


def load_experiment_config(
    path: str | Path | None = None,
    overrides: Mapping[str, Any] | Iterable[str] | None = None,
    *,
    require_corpus: bool = True,
) -> ExperimentConfig:
    """
    Build the experiment configuration.

    Precedence (highest first): `overrides` (dotted keys, as a mapping or 'key=value'
    strings), the TOML file at `path`, DMC_EXP__* environment variables, defaults.
    Relative paths inside the file resolve against the file's directory.
    """
    raw: dict[str, Any] = {}
    if path is not None:
        path = Path(path).expanduser()
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        raw = _read_toml(path)
        _resolve_paths(raw, path.parent)

    if overrides:
        pairs = (
            dict(overrides)
            if isinstance(overrides, Mapping)
            else dict(parse_override(item) for item in overrides)
        )
        raw = deep_merge(raw, nest(pairs))

    try:
        config = ExperimentConfig(**raw)
    except PydanticValidationError as e:
        raise ConfigError(
            "invalid experiment configuration",
            details=[
                {"loc": ".".join(str(x) for x in err["loc"]), "msg": err["msg"]}
                for err in e.errors()
            ],
        ) from e

    if require_corpus:
        corpus_path(config)
    logger.debug("loaded experiment config %s", config.run.name)
    return config


def corpus_path(config: ExperimentConfig, settings: Settings | None = None) -> Path:
    """The configured corpus, falling back to the process default; must exist."""
    p = config.data.corpus_path
    if p is None:
        p = (settings or get_settings()).corpus_path
    if not Path(p).exists():
        raise ConfigError(f"corpus path does not exist: {p}")
    return Path(p)

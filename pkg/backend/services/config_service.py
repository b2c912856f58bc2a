"""
Configuration plumbing.

Option values are resolved with the precedence
    command-line flag > --config file > MMA_* environment > built-in default
and validated by the command's pydantic Options model. The same flat
key=value text is used for config files and for the checkpoint header.
"""

import logging
import os
from pathlib import Path
from typing import Mapping, TypeVar

from pydantic import BaseModel, ValidationError

from models.schemas import AttentionConfig, ModelConfig, NormStats, manifold_codes
from services import file_service
from services.errors import ConfigError

logger = logging.getLogger(__name__)

ENV_PREFIX = "MMA_"

OptionsT = TypeVar("OptionsT", bound=BaseModel)


def normalise_key(key: str) -> str:
    return key.strip().lstrip("-").replace("-", "_").lower()


def parse_key_values(text: str, origin: str = "<config>") -> dict[str, str]:
    """`key=value` lines; '#' starts a comment, blank lines are skipped."""
    values: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"{origin}:{lineno}: expected key=value, got '{raw.strip()}'")
        values[normalise_key(key)] = value.strip()
    return values


def read_config_file(path: str | Path) -> dict[str, str]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc.strerror or exc}") from exc
    return parse_key_values(text, str(path))


def env_overrides(fields: Mapping[str, object], environ: Mapping[str, str] | None = None) -> dict[str, str]:
    environ = os.environ if environ is None else environ
    found = {}
    for name in fields:
        value = environ.get(f"{ENV_PREFIX}{name.upper()}")
        if value is not None and value != "":
            found[name] = value
    return found


def validation_message(exc: ValidationError) -> str:
    parts = []
    for err in exc.errors():
        loc = ".".join(str(p) for p in err.get("loc", ())) or "config"
        parts.append(f"{loc}: {err.get('msg')}")
    return "; ".join(parts)


def resolve_options(options_cls: type[OptionsT], cli: Mapping[str, object],
                    config_path: str | Path | None = None,
                    defaults: Mapping[str, object] | None = None,
                    environ: Mapping[str, str] | None = None) -> OptionsT:
    """Merge every source into one validated Options instance."""
    merged: dict[str, object] = dict(defaults or {})
    merged.update(env_overrides(options_cls.model_fields, environ))
    if config_path is not None:
        file_values = read_config_file(config_path)
        unknown = sorted(set(file_values) - set(options_cls.model_fields))
        if unknown:
            raise ConfigError(f"{config_path}: unknown key(s) {', '.join(unknown)}")
        merged.update(file_values)
    merged.update({normalise_key(k): v for k, v in cli.items() if v is not None})
    try:
        return options_cls.model_validate(merged)
    except ValidationError as exc:
        raise ConfigError(validation_message(exc)) from exc


# ── Flat model config (checkpoint header) ────────────────────────────────────

def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def flatten_model_config(cfg: ModelConfig) -> dict[str, str]:
    flat = {f"model.{name}": _fmt(getattr(cfg, name))
            for name in ModelConfig.model_fields if name != "attention"}
    for name in AttentionConfig.model_fields:
        value = getattr(cfg.attention, name)
        flat[f"attention.{name}"] = manifold_codes(value) if name == "manifolds" else _fmt(value)
    return flat


def model_config_from_flat(flat: Mapping[str, str]) -> ModelConfig:
    model = {k[len("model."):]: v for k, v in flat.items() if k.startswith("model.")}
    attention = {k[len("attention."):]: v for k, v in flat.items() if k.startswith("attention.")}
    try:
        return ModelConfig.model_validate({**model, "attention": attention})
    except ValidationError as exc:
        raise ConfigError(validation_message(exc)) from exc


def flatten_stats(stats: NormStats) -> dict[str, str]:
    return {
        "stats.mean": ",".join(repr(float(m)) for m in stats.mean),
        "stats.std": ",".join(repr(float(s)) for s in stats.std),
    }


def stats_from_flat(flat: Mapping[str, str]) -> NormStats | None:
    if "stats.mean" not in flat or "stats.std" not in flat:
        return None
    try:
        return NormStats(mean=tuple(float(v) for v in flat["stats.mean"].split(",")),
                         std=tuple(float(v) for v in flat["stats.std"].split(",")))
    except (ValueError, ValidationError) as exc:
        raise ConfigError(f"bad normalisation stats in header: {exc}") from exc


def write_config_file(path: str | Path, values: Mapping[str, object]) -> Path:
    text = "".join(f"{key}={_fmt(value)}\n" for key, value in values.items())
    return file_service.write_text_atomic(path, text)

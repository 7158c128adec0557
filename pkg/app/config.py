"""Run configuration loading: YAML documents, presets and command-line overrides."""

import copy
import logging
import os
from pathlib import Path
from typing import Any, Dict, Iterable, Optional

import yaml
from pydantic import ValidationError

from app.errors import ConfigError
from app.models import RunConfig

logger = logging.getLogger(__name__)

DEFAULT_OUTPUT_DIR = os.environ.get("APP_OUTPUT_DIR", "runs/latest")

# Implementation constants of the two dataset families; explicit keys override them.
PRESETS: Dict[str, Dict[str, Any]] = {
    "replica": {
        "weights": {"color": 0.7, "ssim": 0.1, "geo": 0.25, "align": 0.25, "iso": 0.1, "var": 0.15},
        "tracker": {"iterations": 15, "keyframe_interval": 30, "window_size": 4},
        "mapping": {"iterations": 60},
    },
    "tum": {
        "weights": {
            "color": 1.0,
            "ssim": 0.1,
            "geo": 0.8,
            "align": 0.5,
            "iso": 0.1,
            "var": 0.5,
            "track_color": 1.0,
            "track_geo": 0.6,
        },
        "tracker": {"iterations": 25, "keyframe_interval": 15, "window_size": 4},
        "mapping": {"iterations": 45},
    },
}


def deep_merge(base: Dict[str, Any], update: Dict[str, Any]) -> Dict[str, Any]:
    """Return `base` with `update` merged in recursively; `update` wins on conflicts."""
    merged = copy.deepcopy(base)
    for key, value in update.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = deep_merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def parse_override(override: str) -> Dict[str, Any]:
    """Turn `a.b.c=value` into a nested mapping; the value is parsed as a YAML scalar."""
    if "=" not in override:
        raise ConfigError(f"Override '{override}' is not of the form key=value")
    key, raw_value = override.split("=", 1)
    path = [part for part in key.strip().split(".") if part]
    if not path:
        raise ConfigError(f"Override '{override}' has an empty key")
    try:
        value = yaml.safe_load(raw_value) if raw_value.strip() else None
    except yaml.YAMLError as e:
        raise ConfigError(f"Override '{override}' has an unparsable value: {e}") from e

    nested: Dict[str, Any] = {path[-1]: value}
    for part in reversed(path[:-1]):
        nested = {part: nested}
    return nested


def read_document(path: Path) -> Dict[str, Any]:
    """Read a YAML mapping; an empty file is an empty mapping."""
    try:
        text = path.read_text()
    except OSError as e:
        raise ConfigError(f"Cannot read config file {path}: {e}") from e

    try:
        document = yaml.safe_load(text)
    except yaml.MarkedYAMLError as e:
        line = e.problem_mark.line + 1 if e.problem_mark is not None else 0
        raise ConfigError(f"{path}: parse error at line {line}: {e.problem}") from e
    except yaml.YAMLError as e:
        raise ConfigError(f"{path}: parse error: {e}") from e

    if document is None:
        return {}
    if not isinstance(document, dict):
        raise ConfigError(f"{path}: top level must be a mapping, got {type(document).__name__}")
    return document


def build_config(document: Dict[str, Any], overrides: Optional[Iterable[str]] = None) -> RunConfig:
    """Validate a raw document (plus overrides) against the run schema, applying the selected preset first."""
    merged = copy.deepcopy(document)
    for override in overrides or []:
        merged = deep_merge(merged, parse_override(override))

    preset = merged.get("preset", "replica")
    if preset not in PRESETS:
        raise ConfigError(f"Unknown preset '{preset}', expected one of {sorted(PRESETS)}")
    merged = deep_merge(PRESETS[preset], merged)
    merged.setdefault("output_dir", DEFAULT_OUTPUT_DIR)
    if "threads" not in merged and "APP_THREADS" in os.environ:
        merged["threads"] = os.environ["APP_THREADS"]

    try:
        return RunConfig.model_validate(merged)
    except ValidationError as e:
        problems = "; ".join(f"{'.'.join(str(p) for p in err['loc'])}: {err['msg']}" for err in e.errors())
        raise ConfigError(f"Invalid configuration: {problems}") from e


def load_config(path: Optional[Path] = None, overrides: Optional[Iterable[str]] = None) -> RunConfig:
    """Load a run configuration; with no path, defaults (Replica constants) are used."""
    document = read_document(Path(path)) if path is not None else {}
    config = build_config(document, overrides)
    logger.info(f"Loaded configuration (preset={config.preset}, dataset={config.dataset.format})")
    return config


def dump_config(config: RunConfig, path: Path) -> None:
    """Write a config snapshot that `load_config` reads back to the same values."""
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(yaml.safe_dump(config.model_dump(mode="json"), sort_keys=True))

"""Plain-text key/value configuration files.

One ``dotted.key = value`` per line; ``#`` starts a comment. Keys follow the
``SimulationConfig`` tree, e.g. ``scenario.qos.sinr_min_db = 5``. Values holding
a comma, or wrapped in brackets, are read as lists; ``none`` clears an optional
value.
"""

from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Union

from pydantic import ValidationError

from .errors import ExperimentIOError, MassiveAccessError
from .models import SimulationConfig


class ConfigFileError(MassiveAccessError, ValueError):
    """A config line could not be parsed."""


def _parse_value(raw: str) -> Any:
    raw = raw.strip()
    if raw.lower() == "none":
        return None
    if raw.startswith("[") and raw.endswith("]"):
        inner = raw[1:-1].strip()
        return [item.strip() for item in inner.split(",") if item.strip()]
    if "," in raw:
        return [item.strip() for item in raw.split(",") if item.strip()]
    return raw


def _insert(tree: Dict[str, Any], key: str, value: Any) -> None:
    parts = key.split(".")
    node = tree
    for part in parts[:-1]:
        child = node.setdefault(part, {})
        if not isinstance(child, dict):
            raise ConfigFileError(f"'{key}' nests under a plain value")
        node = child
    node[parts[-1]] = value


def parse_settings(
    text: str, overrides: Optional[Mapping[str, Any]] = None
) -> SimulationConfig:
    """Parse config text; ``overrides`` (dotted keys) win over file values."""
    tree: Dict[str, Any] = {}
    for number, line in enumerate(text.splitlines(), start=1):
        content = line.split("#", 1)[0].strip()
        if not content:
            continue
        if "=" not in content:
            raise ConfigFileError(f"line {number}: expected 'key = value'")
        key, raw = content.split("=", 1)
        key = key.strip()
        if not key:
            raise ConfigFileError(f"line {number}: empty key")
        _insert(tree, key, _parse_value(raw))

    for key, value in (overrides or {}).items():
        _insert(tree, key, value)

    return SimulationConfig.model_validate(tree)


def load_settings(
    path: Optional[Union[str, Path]] = None,
    overrides: Optional[Mapping[str, Any]] = None,
) -> SimulationConfig:
    """Load settings from ``path``; defaults (desk scale) when no path is given."""
    if path is None:
        return parse_settings("", overrides)
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ExperimentIOError(path, e) from e
    try:
        return parse_settings(text, overrides)
    except (ConfigFileError, ValidationError) as e:
        raise ConfigFileError(f"{path}: {e}") from e


def _flatten(prefix: str, data: Mapping[str, Any], out: Dict[str, Any]) -> None:
    for key, value in data.items():
        dotted = f"{prefix}.{key}" if prefix else key
        if isinstance(value, Mapping):
            _flatten(dotted, value, out)
        else:
            out[dotted] = value


def _format_value(value: Any) -> str:
    if value is None:
        return "none"
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(_format_value(v) for v in value) + "]"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def dump_settings(settings: SimulationConfig) -> str:
    """Render settings in the same key/value format ``parse_settings`` reads."""
    flat: Dict[str, Any] = {}
    _flatten("", settings.model_dump(mode="json"), flat)
    return "".join(f"{key} = {_format_value(value)}\n" for key, value in flat.items())

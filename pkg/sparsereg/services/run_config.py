"""INI run configuration: parsing, flag overrides and snapshots.

    [run]          env, algorithm, hidden_dims, total_steps, eval_interval,
                   eval_episodes, seeds, output_dir, n_jobs, save_actor
    [dataset]      path | quality, size, gen_seed, validation_size, validation_fraction
    [regularizer]  kind plus the fields of that regularizer
    [hyper]        AlgoHyper fields

List values are comma separated. Flags win over the file.
"""
import configparser
import logging
from pathlib import Path
from typing import Any, Mapping, Optional, Union

from pydantic import ValidationError

from sparsereg.core.exceptions import ConfigError
from sparsereg.models.models import RunConfig

logger = logging.getLogger(__name__)

SECTIONS = ("run", "dataset", "regularizer", "hyper")
LIST_FIELDS = {"hidden_dims", "seeds"}


def _parse_section(name: str, items: Mapping[str, str]) -> dict[str, Any]:
    parsed = {}
    for key, value in items.items():
        value = value.strip()
        if key in LIST_FIELDS:
            parsed[key] = [v.strip() for v in value.split(",") if v.strip()]
        elif value == "" and name != "run":
            continue
        else:
            parsed[key] = value
    return parsed


def read_config_file(path: Union[str, Path]) -> dict[str, Any]:
    parser = configparser.ConfigParser(interpolation=None)
    try:
        with open(path) as f:
            parser.read_file(f)
    except configparser.Error as e:
        raise ConfigError(f"cannot parse {path}: {e}") from e
    unknown = [s for s in parser.sections() if s not in SECTIONS]
    if unknown:
        raise ConfigError(f"unknown config sections {unknown}; expected {list(SECTIONS)}")
    raw: dict[str, Any] = {}
    if parser.has_section("run"):
        raw.update(_parse_section("run", parser["run"]))
    for section in SECTIONS[1:]:
        if parser.has_section(section):
            raw[section] = _parse_section(section, parser[section])
    return raw


def merge_overrides(raw: dict[str, Any], overrides: Mapping[str, Any]) -> dict[str, Any]:
    """Overlay flag values. A new regularizer `kind` discards the file's regularizer fields."""
    merged = {k: (dict(v) if isinstance(v, dict) else v) for k, v in raw.items()}
    for key, value in overrides.items():
        if value is None:
            continue
        if isinstance(value, Mapping):
            section = merged.setdefault(key, {})
            if key == "regularizer" and "kind" in value and value["kind"] != section.get("kind"):
                section.clear()
            section.update({k: v for k, v in value.items() if v is not None})
        else:
            merged[key] = value
    return merged


def format_validation_error(error: ValidationError) -> str:
    lines = []
    for item in error.errors():
        location = ".".join(str(part) for part in item["loc"]) or "config"
        lines.append(f"{location}: {item['msg']}")
    return "\n".join(lines)


def load_run_config(path: Optional[Union[str, Path]] = None, overrides: Optional[Mapping[str, Any]] = None) -> RunConfig:
    """File (optional) + flags -> validated RunConfig. Raises pydantic ValidationError."""
    raw = read_config_file(path) if path is not None else {}
    merged = merge_overrides(raw, overrides or {})
    config = RunConfig.model_validate(merged)
    logger.debug("resolved run config %s", config.model_dump(mode="json"))
    return config


def _ini_value(value: Any) -> str:
    if isinstance(value, list):
        return ",".join(str(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def dump_snapshot(config: RunConfig, path: Union[str, Path]) -> Path:
    """Write the resolved config in the same INI format `load_run_config` reads."""
    data = config.model_dump(mode="json")
    parser = configparser.ConfigParser(interpolation=None)
    parser["run"] = {k: _ini_value(v) for k, v in data.items() if k not in SECTIONS[1:] and v is not None}
    for section in SECTIONS[1:]:
        parser[section] = {k: _ini_value(v) for k, v in data[section].items() if v is not None}
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        parser.write(f)
    return path

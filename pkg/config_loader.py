import os
from pathlib import Path
from typing import Any, Dict, Iterable, Optional

import toml

from models.cohort import CohortManifest
from models.config import RunConfig

CONFIG_ENV_VAR = "MGPMS_CONFIG"
PROJECT_ROOT = Path(__file__).resolve().parent


def parse_assignment(assignment: str) -> tuple[str, Any]:
    """'section.field=value' -> ('section.field', value); the value is read as a TOML scalar"""
    if "=" not in assignment:
        raise ValueError(f"Override '{assignment}' is not of the form section.field=value")
    key, raw = (part.strip() for part in assignment.split("=", 1))
    try:
        value = toml.loads(f"value = {raw}")["value"]
    except toml.TomlDecodeError:
        value = raw
    return key, value


def apply_override(data: Dict[str, Any], key: str, value: Any):
    *sections, field = key.split(".")
    target = data
    for section in sections:
        target = target.setdefault(section, {})
        if not isinstance(target, dict):
            raise ValueError(f"Override '{key}': '{section}' is not a config section")
    target[field] = value


def resolve_config_path(path: Optional[str]) -> Optional[Path]:
    """Explicit path first, then $MGPMS_CONFIG; None means built-in defaults"""
    chosen = path or os.getenv(CONFIG_ENV_VAR)
    if not chosen:
        return None
    resolved = Path(chosen)
    if not resolved.exists():
        raise FileNotFoundError(f"Config file not found: {resolved}")
    return resolved


def load_run_config(path: Optional[str] = None, overrides: Optional[Dict[str, Any]] = None,
                    assignments: Iterable[str] = ()) -> RunConfig:
    """
    Resolve defaults < config file < overrides into a validated RunConfig.
    ``overrides`` maps dotted keys to values (None entries are ignored);
    ``assignments`` are raw 'section.field=value' strings.
    """
    config_path = resolve_config_path(path)
    data: Dict[str, Any] = toml.load(config_path) if config_path else {}
    for key, value in (overrides or {}).items():
        if value is not None:
            apply_override(data, key, value)
    for assignment in assignments:
        apply_override(data, *parse_assignment(assignment))
    return RunConfig(**data)


def load_manifest(path: str) -> CohortManifest:
    """Relative paths are tried against the working directory, then the project root"""
    manifest_path = Path(path)
    if not manifest_path.exists() and not manifest_path.is_absolute():
        manifest_path = PROJECT_ROOT / manifest_path
    if not manifest_path.exists():
        raise FileNotFoundError(f"Manifest not found: {manifest_path}")
    return CohortManifest.from_toml(str(manifest_path))

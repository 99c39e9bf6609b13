"""Config file parsing and validation.

Two formats are accepted: a flat sectioned key=value text (INI style,
human-diffable) and JSON with the same section/field names. Unknown keys
are rejected with a nearest-key suggestion; every violation is reported,
not just the first.

Sections:
  [phantom]  generator settings; `preset` selects a named base config and
             the remaining keys override it. Intensity table entries use
             keys of the form intensity_<class>_<phase> = mean,std.
  [train]    training schedule and model sizes.
"""

from __future__ import annotations

import configparser
import difflib
import json
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Optional

from .core import Phase
from .errors import ConfigError, MissingArtifactError
from .phantom import PRESET_NAMES, PhantomConfig, make_preset
from .trainer import TrainConfig

_PHANTOM_EXTRA_KEYS = {"preset", "n_cases"}


@dataclass(frozen=True)
class FileConfig:
    phantom: PhantomConfig
    train: TrainConfig
    n_cases: int = 50
    preset: Optional[str] = None

    def snapshot(self) -> dict:
        """Fully resolved config, defaults included, for run manifests."""
        return {
            "phantom": self.phantom.to_dict(),
            "train": self.train.to_dict(),
            "n_cases": self.n_cases,
            "preset": self.preset,
        }


def _coerce(raw: str, target_type, key: str, errors: list):
    if target_type is bool:
        low = str(raw).strip().lower()
        if low in ("1", "true", "yes"):
            return True
        if low in ("0", "false", "no"):
            return False
        errors.append(f"{key}: expected a boolean, got '{raw}'")
        return None
    try:
        if target_type is int:
            return int(str(raw).strip())
        if target_type is float:
            return float(str(raw).strip())
    except ValueError:
        errors.append(f"{key}: expected {target_type.__name__}, got '{raw}'")
        return None
    if isinstance(raw, str):
        return raw.strip()
    return raw


def _field_types(dc_cls) -> dict:
    types = {}
    for f in fields(dc_cls):
        if f.type in ("int", int):
            types[f.name] = int
        elif f.type in ("float", float):
            types[f.name] = float
        elif f.type in ("bool", bool):
            types[f.name] = bool
        else:
            types[f.name] = str
    return types


def _suggest(key: str, known) -> str:
    close = difflib.get_close_matches(key, list(known), n=1)
    return f" (did you mean '{close[0]}'?)" if close else ""


def _parse_intensity_value(raw, key: str, errors: list):
    if isinstance(raw, (list, tuple)):
        parts = list(raw)
    else:
        parts = str(raw).split(",")
    if len(parts) != 2:
        errors.append(f"{key}: expected 'mean,std', got '{raw}'")
        return None
    try:
        return float(parts[0]), float(parts[1])
    except (TypeError, ValueError):
        errors.append(f"{key}: expected numeric 'mean,std', got '{raw}'")
        return None


def _build_phantom(section: dict, errors: list) -> tuple[Optional[PhantomConfig], int, Optional[str]]:
    types = _field_types(PhantomConfig)
    types.pop("intensity_table", None)
    known = set(types) | _PHANTOM_EXTRA_KEYS
    preset = section.get("preset")
    if preset is not None and preset not in PRESET_NAMES:
        errors.append(
            f"phantom.preset: unknown preset '{preset}'"
            + _suggest(preset, PRESET_NAMES)
        )
        preset = None
    base = make_preset(preset) if preset else PhantomConfig()
    overrides = {}
    table = {c: dict(by_phase) for c, by_phase in base.intensity_table.items()}
    n_cases = 50
    for key, raw in section.items():
        if key == "preset":
            continue
        if key == "n_cases":
            val = _coerce(raw, int, "phantom.n_cases", errors)
            if val is not None:
                n_cases = val
            continue
        if key.startswith("intensity_"):
            parts = key.split("_")
            if len(parts) != 3 or parts[2] not in (p.value for p in Phase):
                errors.append(
                    f"phantom.{key}: intensity keys look like intensity_<class>_<phase>"
                )
                continue
            pair = _parse_intensity_value(raw, f"phantom.{key}", errors)
            if pair is not None:
                table.setdefault(int(parts[1]), {})[Phase(parts[2])] = pair
            continue
        if key not in types:
            errors.append(f"phantom.{key}: unknown key{_suggest(key, known)}")
            continue
        val = _coerce(raw, types[key], f"phantom.{key}", errors)
        if val is not None:
            overrides[key] = val
    if n_cases < 1:
        errors.append(f"phantom.n_cases must be >= 1, got {n_cases}")
    try:
        cfg = replace(base, intensity_table=table, **overrides)
    except ConfigError as exc:
        errors.extend(f"phantom.{msg}" for msg in exc.errors)
        return None, n_cases, preset
    return cfg, n_cases, preset


def _build_train(section: dict, errors: list) -> Optional[TrainConfig]:
    types = _field_types(TrainConfig)
    overrides = {}
    for key, raw in section.items():
        if key not in types:
            errors.append(f"train.{key}: unknown key{_suggest(key, types)}")
            continue
        if key == "donor_checkpoint":
            overrides[key] = str(raw).strip() or None
            continue
        val = _coerce(raw, types[key], f"train.{key}", errors)
        if val is not None:
            overrides[key] = val
    try:
        return TrainConfig(**overrides)
    except ConfigError as exc:
        errors.extend(f"train.{msg}" for msg in exc.errors)
        return None


def _read_sections(path: Path) -> dict:
    text = path.read_text()
    stripped = text.lstrip()
    if stripped.startswith("{"):
        data = json.loads(text)
        if not isinstance(data, dict):
            raise ConfigError([f"{path}: JSON config must be an object of sections"])
        return {str(k): {str(kk): vv for kk, vv in (v or {}).items()}
                for k, v in data.items()}
    parser = configparser.ConfigParser()
    try:
        parser.read_string(text, source=str(path))
    except configparser.Error as exc:
        raise ConfigError([f"{path}: {exc}"])
    return {name: dict(parser[name]) for name in parser.sections()}


def parse_config(path) -> FileConfig:
    """Parse and validate a config file; raises ConfigError listing every
    violation when anything is wrong."""
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"config file not found: {path}")
    sections = _read_sections(path)
    errors: list[str] = []
    known_sections = {"phantom", "train"}
    for name in sections:
        if name not in known_sections:
            errors.append(f"[{name}]: unknown section{_suggest(name, known_sections)}")
    phantom_cfg, n_cases, preset = _build_phantom(sections.get("phantom", {}), errors)
    train_cfg = _build_train(sections.get("train", {}), errors)
    if errors:
        raise ConfigError(errors)
    return FileConfig(phantom=phantom_cfg or PhantomConfig(),
                      train=train_cfg or TrainConfig(),
                      n_cases=n_cases, preset=preset)

"""YAML scenario files.

A scenario file is a mapping whose keys are ``ScenarioConfig`` field names;
omitted keys keep their defaults, so an empty file is the default scenario.
Two keys take structured values::

    catalog:            # list of job types
      - {name: type1, intensity_total: 10, deadline_total: 20, size_total: 1.6e10, gen_prob: 0.4}
    cells: [[0, 0], [1, 0], [0, 1]]   # axial hex coordinates

An optional ``sweep`` mapping lists the axes of a batch run (``policy``,
``p``, ``pv_mean``, ``T``, ``seeds``); see ``mecsched.cli``.
"""

from __future__ import annotations

import dataclasses
from pathlib import Path
from typing import Any, Mapping

import re

import yaml

from .model import ContractError, JobType
from .simkit.scenario import ScenarioConfig

SWEEP_KEYS = ("policy", "p", "pv_mean", "T", "seeds")


class _Loader(yaml.SafeLoader):
    """Safe loader that also reads exponents without a sign (``1e9``) as floats."""


_Loader.add_implicit_resolver(
    "tag:yaml.org,2002:float",
    re.compile(r"""^[-+]?(?:[0-9][0-9_]*\.[0-9_]*(?:[eE][-+]?[0-9]+)?
    |[0-9][0-9_]*[eE][-+]?[0-9]+
    |\.[0-9_]+(?:[eE][-+]?[0-9]+)?
    |[-+]?\.(?:inf|Inf|INF)
    |\.(?:nan|NaN|NAN))$""", re.X),
    list("-+0123456789."))


class ConfigError(ValueError):
    """A scenario file could not be turned into a valid configuration."""


_DEFAULTS = ScenarioConfig()
_OPTIONAL_FLOATS = {f.name for f in dataclasses.fields(ScenarioConfig) if getattr(_DEFAULTS, f.name) is None}


def _number(key: str, value: Any, integral: bool) -> float | int:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{key}: expected a number, got {value!r}")
    if integral:
        if float(value) != int(value):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return int(value)
    return float(value)


def _catalog(value: Any) -> tuple[JobType, ...]:
    if not isinstance(value, list) or not value:
        raise ConfigError("catalog: expected a non-empty list of job types")
    names = {f.name for f in dataclasses.fields(JobType)}
    out = []
    for k, entry in enumerate(value):
        if not isinstance(entry, Mapping):
            raise ConfigError(f"catalog[{k}]: expected a mapping")
        unknown = set(entry) - names
        if unknown:
            raise ConfigError(f"catalog[{k}]: unknown key {sorted(unknown)[0]!r}")
        kw = {}
        for key, val in entry.items():
            kw[key] = str(val) if key == "name" else _number(f"catalog[{k}].{key}", val, False)
        try:
            out.append(JobType(**kw))
        except TypeError as exc:
            raise ConfigError(f"catalog[{k}]: {exc}") from None
        except ContractError as exc:
            raise ConfigError(f"catalog[{k}]: {exc}") from None
    return tuple(out)


def _coerce(key: str, value: Any) -> Any:
    if key == "catalog":
        return _catalog(value)
    if key == "cells":
        if not isinstance(value, list) or not all(isinstance(c, list) and len(c) == 2 for c in value):
            raise ConfigError("cells: expected a list of [q, r] pairs")
        return tuple((int(_number(key, q, True)), int(_number(key, r, True))) for q, r in value)
    if key == "server_kinds":
        if isinstance(value, str):
            value = [value]
        if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
            raise ConfigError("server_kinds: expected a list of server names")
        return tuple(value)
    if key in _OPTIONAL_FLOATS:
        return None if value is None else _number(key, value, False)
    default = getattr(_DEFAULTS, key)
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected true or false, got {value!r}")
        return value
    if isinstance(default, int):
        return _number(key, value, True)
    if isinstance(default, float):
        return _number(key, value, False)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{key}: expected a string, got {value!r}")
        return value
    raise ConfigError(f"{key}: cannot be set from a file")


def config_from_mapping(data: Mapping[str, Any] | None) -> ScenarioConfig:
    """Build a validated scenario from a parsed document (``sweep`` is ignored)."""
    data = dict(data or {})
    data.pop("sweep", None)
    names = {f.name for f in dataclasses.fields(ScenarioConfig)}
    for key in data:
        if key not in names:
            raise ConfigError(f"unknown key {key!r}")
    kw = {key: _coerce(key, value) for key, value in data.items()}
    try:
        return ScenarioConfig(**kw)
    except ContractError as exc:
        raise ConfigError(str(exc)) from None


def load_document(path: str | Path) -> dict[str, Any]:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {str(path)!r} does not exist")
    try:
        data = yaml.load(path.read_text(), Loader=_Loader)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML ({exc})") from None
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return data


def parse_config(path: str | Path) -> ScenarioConfig:
    return config_from_mapping(load_document(path))


def sweep_section(data: Mapping[str, Any]) -> dict[str, list]:
    """The ``sweep`` axes of a document, each as a list."""
    raw = data.get("sweep") or {}
    if not isinstance(raw, Mapping):
        raise ConfigError("sweep: expected a mapping")
    out = {}
    for key, value in raw.items():
        if key not in SWEEP_KEYS:
            raise ConfigError(f"sweep: unknown key {key!r}")
        values = value if isinstance(value, list) else [value]
        if not values:
            raise ConfigError(f"sweep.{key}: needs at least one value")
        out[key] = values
    return out

"""Experiment config files.

Configs are TOML. Top-level tables are organisational only and are flattened
one level before validation, except tables named after a nested model field
(``[gas]``). ``key=value`` overrides are applied after the file is read; values
are parsed as TOML and fall back to plain strings.
"""

import re
import tomllib
from enum import StrEnum
from pathlib import Path
from typing import Any

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from afdm_cpim.codebook_design import DEFAULT_LAMBDA1, DesignMethod, DistanceMetric
from afdm_cpim.errors import ConfigError
from afdm_cpim.gas import GasConfig


class DesignConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    N: int = Field(4, ge=2)
    K: int = Field(2, ge=1)
    f_max: float = Field(1.0, ge=0)
    xi: int = Field(0, ge=0)
    c2: float | None = None
    metric: DistanceMetric = DistanceMetric.ANGULAR
    method: DesignMethod = DesignMethod.AUTO
    pool_size: int = Field(256, ge=2)
    lambda1: float = Field(DEFAULT_LAMBDA1, ge=1)
    lambda2: float | None = Field(None, gt=0)
    subset_budget: int | None = Field(None, gt=0)
    cross_check: bool = Field(True, description="Also run the exhaustive oracle when the budget allows")
    seed: int = Field(0, ge=0)
    gas: GasConfig = Field(default_factory=GasConfig)

    @field_validator("K")
    @classmethod
    def check_power_of_two(cls, value: int) -> int:
        if value & (value - 1):
            raise ValueError(f"K must be a power of two, got {value}")
        return value


class ObjectiveKind(StrEnum):
    TERMS = "terms"
    CODEBOOK = "codebook"
    ML = "ml"


class GasSolveConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    objective: ObjectiveKind = ObjectiveKind.TERMS
    terms_file: str | None = Field(None, description="JSON term list, relative to the config file")

    # codebook and ml instances
    N: int = Field(4, ge=2)
    f_max: float = Field(1.0, ge=0)
    xi: int = Field(0, ge=0)
    c2: float | None = None
    # codebook instance
    K: int = Field(2, ge=1)
    metric: DistanceMetric = DistanceMetric.ANGULAR
    pool_size: int = Field(24, ge=2)
    lambda1: float = Field(DEFAULT_LAMBDA1, ge=1)
    lambda2: float | None = Field(None, gt=0)
    # ml instance
    M: int = 2
    perm_index: int = Field(1, ge=1)
    P: int = Field(2, ge=1)
    ell_max: int = Field(1, ge=0)
    ebn0_db: float | None = Field(None, description="Noise level; None draws a noiseless frame")

    seed: int = Field(0, ge=0)
    gas: GasConfig = Field(default_factory=GasConfig)


def parse_override(item: str) -> tuple[list[str], Any]:
    key, sep, raw = item.partition("=")
    key = key.strip()
    if not sep or not key:
        raise ConfigError(f"override '{item}' is not of the form key=value")
    try:
        value = tomllib.loads(f"v = {raw.strip()}")["v"]
    except tomllib.TOMLDecodeError:
        value = raw.strip()
    return key.split("."), value


def _flatten(data: dict[str, Any], model: type[BaseModel]) -> dict[str, Any]:
    flat: dict[str, Any] = {}
    for key, value in data.items():
        if isinstance(value, dict) and key not in model.model_fields:
            items = list(value.items())
        else:
            items = [(key, value)]
        for k, v in items:
            if k in flat:
                raise ConfigError(f"key '{k}' is set more than once (section '{key}')")
            flat[k] = v
    return flat


def _line_of(text: str, key: str) -> int | None:
    pattern = re.compile(rf"^\s*{re.escape(key)}\s*=")
    for number, line in enumerate(text.splitlines(), start=1):
        if pattern.match(line):
            return number
    return None


def _describe(exc: ValidationError, text: str, source: str) -> str:
    lines = [f"invalid config {source}:"]
    for err in exc.errors():
        field = ".".join(str(p) for p in err["loc"]) or "<root>"
        where = _line_of(text, str(err["loc"][-1])) if err["loc"] else None
        prefix = f"line {where}, " if where else ""
        lines.append(f"  {prefix}field '{field}': {err['msg']}")
    return "\n".join(lines)


def load_config[T: BaseModel](
    model: type[T], path: Path | None = None, overrides: list[str] | None = None
) -> T:
    """
    Read a TOML config, apply overrides and validate it.

    Args:
        model: Config model to validate against
        path: TOML file; None starts from the model defaults
        overrides: ``key=value`` items, dotted keys reach nested models

    Returns:
        The validated model

    Raises:
        ConfigError: Reading or validating the config failed; validation
            errors name the offending line
    """
    text = ""
    data: dict[str, Any] = {}
    source = "<defaults>"
    if path is not None:
        path = Path(path)
        source = str(path)
        try:
            text = path.read_text(encoding="utf-8")
            data = tomllib.loads(text)
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc

    flat = _flatten(data, model)
    for item in overrides or []:
        keys, value = parse_override(item)
        target = flat
        for k in keys[:-1]:
            target = target.setdefault(k, {})
            if not isinstance(target, dict):
                raise ConfigError(f"override '{item}' descends into non-table key '{k}'")
        target[keys[-1]] = value

    try:
        return model.model_validate(flat)
    except ValidationError as exc:
        raise ConfigError(_describe(exc, text, source)) from exc

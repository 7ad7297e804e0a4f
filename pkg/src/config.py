#!/usr/bin/env python3
"""
HierLoc run configuration
key=value config files, --set overrides and sweep specifications
"""

import os
import logging
from pathlib import Path
from typing import Dict, Iterable, List, Literal, Optional, Union

from dotenv import dotenv_values
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from tensor_core import HierLocError
from hierloc_model import HyperParams
from evaluation import PenaltyConfig

logger = logging.getLogger(__name__)

RUN_KEYS = ("train_path", "test_path", "model_path", "encoder_path", "out_dir", "building_count", "floor_count")


class ConfigError(HierLocError, ValueError):
    pass


def data_dir() -> Path:
    return Path(os.getenv("HIERLOC_DATA_DIR", "data"))


class RunConfig(BaseModel):
    """Everything a run needs; the resolved form is embedded in every artifact"""

    model_config = ConfigDict(extra="forbid", protected_namespaces=())

    train_path: Path = Field(default_factory=lambda: data_dir() / "trainingData.csv")
    test_path: Path = Field(default_factory=lambda: data_dir() / "validationData.csv")
    model_path: Optional[Path] = None
    encoder_path: Optional[Path] = None
    out_dir: Path = Path("runs")
    building_count: int = Field(3, ge=1)
    floor_count: int = Field(5, ge=1)
    hyperparams: HyperParams = Field(default_factory=HyperParams)
    penalties: PenaltyConfig = Field(default_factory=PenaltyConfig)

    @property
    def seed(self) -> int:
        return self.hyperparams.seed

    @property
    def resolved_model_path(self) -> Path:
        return self.model_path or self.out_dir / "model.hloc"

    @property
    def resolved_encoder_path(self) -> Path:
        return self.encoder_path or self.out_dir / "encoder.hloc"

    def to_dict(self) -> dict:
        return self.model_dump(mode="json")


class SweepSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    axis: Literal["rnn_kind", "bf_dropout", "position_dropout", "batch_size"]
    values: List[str]
    repetitions: int = Field(1, ge=1)

    @field_validator("values", mode="before")
    @classmethod
    def _split_values(cls, value):
        if isinstance(value, str):
            value = value.split(",")
        return [str(v).strip() for v in value if str(v).strip()]

    @model_validator(mode="after")
    def _check_values(self) -> "SweepSpec":
        if not self.values:
            raise ValueError("sweep needs at least one value")
        for value in self.values:
            try:
                HyperParams(**{self.axis: value})
            except ValidationError as e:
                raise ValueError(f"invalid value {value!r} for sweep axis {self.axis}: {_first_message(e)}")
        return self

    def hyperparams_for(self, base: HyperParams, value: str, repetition: int = 0) -> HyperParams:
        values = base.model_dump()
        values[self.axis] = value
        values["seed"] = base.seed + repetition
        return HyperParams.model_validate(values)


def _first_message(error: ValidationError) -> str:
    first = error.errors()[0]
    where = ".".join(str(p) for p in first.get("loc", ())) or "value"
    return f"{where}: {first.get('msg')}"


def parse_overrides(pairs: Iterable[str]) -> Dict[str, str]:
    values: Dict[str, str] = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"override {pair!r} is not of the form key=value")
        key, value = pair.split("=", 1)
        values[key.strip()] = value.strip()
    return values


def read_config_file(path: Union[str, Path]) -> Dict[str, str]:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    values = {key: value for key, value in dotenv_values(path).items()}
    empty = [key for key, value in values.items() if value is None]
    if empty:
        raise ConfigError(f"{path}: key {empty[0]!r} has no value")
    return values


def build_config(values: Dict[str, object]) -> RunConfig:
    """Route flat keys to the run, hyperparameter and penalty sections; unknown keys are errors"""
    hyper_keys = set(HyperParams.model_fields)
    penalty_keys = set(PenaltyConfig.model_fields)
    run: Dict[str, object] = {}
    hyper: Dict[str, object] = {}
    penalty: Dict[str, object] = {}
    for key, value in values.items():
        if key in RUN_KEYS:
            run[key] = value
        elif key in hyper_keys:
            hyper[key] = value
        elif key in penalty_keys:
            penalty[key] = value
        else:
            raise ConfigError(f"unknown config key {key!r}")
    try:
        return RunConfig(hyperparams=HyperParams(**hyper), penalties=PenaltyConfig(**penalty), **run)
    except ValidationError as e:
        raise ConfigError(f"invalid configuration: {_first_message(e)}") from None


def resolve_config(
    config_path: Optional[Union[str, Path]] = None,
    overrides: Iterable[str] = (),
    seed: Optional[int] = None,
    out_dir: Optional[Union[str, Path]] = None,
) -> RunConfig:
    """defaults < config file < --set overrides < --seed"""
    values: Dict[str, object] = {}
    if config_path is not None:
        values.update(read_config_file(config_path))
    values.update(parse_overrides(overrides))
    if seed is not None:
        values["seed"] = seed
    if out_dir is not None:
        values["out_dir"] = str(out_dir)
    config = build_config(values)
    logger.debug(f"Resolved configuration: {config.to_dict()}")
    return config

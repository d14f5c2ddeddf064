"""
Experiment configuration files.

Format: INI-style sections, `key = value` lines, `#` comments, lists
comma-separated, booleans true/false, floats at 17 significant digits.
parse_config(serialize_config(c)) == c for every valid config.

    [experiment]
    kind = gridsearch
    out_dir = runs

    [network]
    depth = 100
    h = 0.10000000000000001
    ...
"""
import configparser
import hashlib
import logging
import os
import typing
from typing import Annotated, List, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

import config as defaults
from dataset.moons import MoonSpec
from errors import ConfigError
from nn.layers import NetworkConfig
from records import fmt
from training import TrainPlan

log = logging.getLogger(__name__)

KINDS = ("euler", "train", "gridsearch", "noise-sweep", "diagnose")

PositiveFloat = Annotated[float, Field(gt=0)]
NonNegativeFloat = Annotated[float, Field(ge=0)]


class OptimizerConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    learning_rate: float = Field(defaults.LEARNING_RATE, ge=0)
    momentum: float = Field(defaults.MOMENTUM, ge=0, lt=1)


class DataConfig(MoonSpec):
    train_fraction: float = Field(defaults.TRAIN_FRACTION, gt=0, lt=1)
    train_noise: float = Field(0.0, ge=0)   # extra noise on the training split only


class SweepConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    seeds: List[int] = Field(default_factory=lambda: list(defaults.SEEDS), min_length=1)
    h_list: List[PositiveFloat] = Field(default_factory=lambda: list(defaults.GRID_H), min_length=1)
    depths: List[Annotated[int, Field(ge=1)]] = Field(default_factory=lambda: [defaults.DEFAULT_DEPTH], min_length=1)
    bn_options: List[bool] = Field(default_factory=lambda: [False], min_length=1)
    noise_levels: List[NonNegativeFloat] = Field(
        default_factory=lambda: list(defaults.NOISE_LEVELS), min_length=1
    )


class EulerConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    h_list: List[PositiveFloat] = Field(default_factory=lambda: list(defaults.EULER_H_LIST), min_length=1)
    lam: float = defaults.EULER_LAMBDA
    x0: float = 1.0
    t_end: PositiveFloat = defaults.EULER_T_END

    @model_validator(mode="after")
    def _steps_fit(self):
        too_big = [h for h in self.h_list if h > self.t_end]
        if too_big:
            raise ValueError(f"step sizes {too_big} exceed t_end={self.t_end}")
        return self


class DiagnoseConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    params_file: Optional[str] = None
    zero_branches: bool = False
    batch_size: int = Field(32, ge=1)
    perturbation_norms: List[PositiveFloat] = Field(default_factory=lambda: list(defaults.PERTURBATION_NORMS), min_length=1)
    snapshot_blocks: List[Annotated[int, Field(ge=0)]] = Field(
        default_factory=lambda: list(defaults.SNAPSHOT_BLOCKS)
    )


class ExperimentConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    kind: Literal["euler", "train", "gridsearch", "noise-sweep", "diagnose"] = "train"
    out_dir: str = defaults.RUNS_DIR
    network: NetworkConfig = Field(default_factory=NetworkConfig)
    train: TrainPlan = Field(default_factory=TrainPlan)
    optimizer: OptimizerConfig = Field(default_factory=OptimizerConfig)
    data: DataConfig = Field(default_factory=DataConfig)
    sweep: SweepConfig = Field(default_factory=SweepConfig)
    euler: EulerConfig = Field(default_factory=EulerConfig)
    diagnose: DiagnoseConfig = Field(default_factory=DiagnoseConfig)

    @model_validator(mode="after")
    def _network_matches_data(self):
        if self.network.input_dim != 2:
            raise ValueError("TWO-MOON features are 2-D: network.input_dim must be 2")
        if self.network.depth < 1:
            raise ValueError("network.depth must be >= 1")
        return self

    def content_hash(self):
        return hashlib.sha256(serialize_config(self).encode("utf-8")).hexdigest()[:12]

    def run_dir(self):
        return os.path.join(self.out_dir, f"{self.kind}-{self.content_hash()}")


SECTIONS = ["network", "train", "optimizer", "data", "sweep", "euler", "diagnose"]


def _is_list(annotation):
    return typing.get_origin(annotation) in (list, List)


def serialize_config(cfg):
    lines = ["[experiment]", f"kind = {cfg.kind}", f"out_dir = {cfg.out_dir}", ""]
    for section in SECTIONS:
        model = getattr(cfg, section)
        lines.append(f"[{section}]")
        for name in type(model).model_fields:
            value = getattr(model, name)
            if isinstance(value, (list, tuple)):
                text = ", ".join(fmt(v) for v in value)
            else:
                text = fmt(value)
            lines.append(f"{name} = {text}")
        lines.append("")
    return "\n".join(lines)


def _section_values(model_cls, items):
    values = {}
    for key, raw in items:
        info = model_cls.model_fields.get(key)
        if info is None:
            raise ConfigError(f"unknown key '{key}' for section of {model_cls.__name__}")
        raw = raw.strip()
        if _is_list(info.annotation):
            values[key] = [v.strip() for v in raw.split(",") if v.strip()]
        elif raw == "" and info.default is None:
            values[key] = None
        else:
            values[key] = raw
    return values


def parse_config(text):
    """Parse config text; raises ConfigError on syntax or validation problems."""
    parser = configparser.ConfigParser(
        interpolation=None, comment_prefixes=("#",), inline_comment_prefixes=("#",)
    )
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as e:
        raise ConfigError(f"cannot parse config: {e}") from e

    fields = {}
    for section in parser.sections():
        if section == "experiment":
            fields.update(dict(parser.items(section)))
            continue
        if section not in SECTIONS:
            raise ConfigError(f"unknown config section [{section}]")
        model_cls = ExperimentConfig.model_fields[section].annotation
        fields[section] = _section_values(model_cls, parser.items(section))
    try:
        return ExperimentConfig(**fields)
    except ValidationError as e:
        raise ConfigError(f"invalid config: {e}") from e


def load_config(filepath):
    if not os.path.exists(filepath):
        raise ConfigError(f"config file not found: {filepath}")
    with open(filepath, "r", encoding="utf-8") as f:
        cfg = parse_config(f.read())
    log.info(f"Loaded {cfg.kind} config from {filepath}")
    return cfg


def save_config(cfg, filepath):
    os.makedirs(os.path.dirname(os.path.abspath(filepath)), exist_ok=True)
    with open(filepath, "w", encoding="utf-8", newline="") as f:
        f.write(serialize_config(cfg))
    return filepath


def with_overrides(cfg, kind=None, out_dir=None, seed=None, h=None, depth=None):
    """Apply CLI overrides; a seed/h/depth override also pins the sweep axis to that value."""
    data = cfg.model_dump()
    if kind is not None:
        data["kind"] = kind
    if out_dir is not None:
        data["out_dir"] = out_dir
    if seed is not None:
        data["network"]["seed"] = seed
        data["train"]["seed"] = seed
        data["sweep"]["seeds"] = [seed]
    if h is not None:
        data["network"]["h"] = h
        data["sweep"]["h_list"] = [h]
        if data["kind"] == "euler":
            data["euler"]["h_list"] = [h]
    if depth is not None:
        data["network"]["depth"] = depth
        data["sweep"]["depths"] = [depth]
    try:
        return ExperimentConfig(**data)
    except ValidationError as e:
        raise ConfigError(f"invalid override: {e}") from e

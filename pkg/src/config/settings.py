"""
Typed run configuration loaded from config.yaml (or a JSON file).

Every key has a default; unknown keys are rejected with the dotted path of
the offending key. CLI flags are applied as dotted-key overrides on the raw
mapping before validation, so flag > file > default.
"""

import json
import logging
import os
from pathlib import Path
from typing import Any, Dict, List, Literal, Mapping, Optional, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from src.errors import ConfigError
from src.objective.matcher import LossWeights
from src.schedule.noise_schedule import NoiseSchedule

logger = logging.getLogger(__name__)

DEVICE_ENV = 'CONSISTENCYDET_DEVICE'
LOG_LEVEL_ENV = 'CONSISTENCYDET_LOG_LEVEL'


class _Section(BaseModel):
    model_config = ConfigDict(extra='forbid', populate_by_name=True)


class ScheduleSettings(_Section):
    sigma_min: float = Field(0.002, gt=0)
    sigma_max: float = Field(80.0, gt=0)
    rho: float = Field(7.0, gt=0)
    T: int = Field(40, ge=2)
    sigma_data: float = Field(0.5, gt=0)
    parameterization: Literal['consistency', 'edm'] = 'consistency'

    @model_validator(mode='after')
    def _ordered(self):
        if self.sigma_min >= self.sigma_max:
            raise ValueError('sigma_min must be below sigma_max')
        return self

    def to_schedule(self) -> NoiseSchedule:
        return NoiseSchedule(
            sigma_min=self.sigma_min,
            sigma_max=self.sigma_max,
            rho=self.rho,
            total_steps=self.T,
            sigma_data=self.sigma_data,
            parameterization=self.parameterization,
        )


class ModelSettings(_Section):
    feat_channels: int = Field(64, ge=8)
    num_stages: int = Field(2, ge=1)
    num_attn_heads: int = Field(4, ge=1)
    dim_feedforward: int = Field(256, ge=1)
    pooler_resolution: int = Field(7, ge=1)
    dynamic_dim: int = Field(16, ge=1)

    @model_validator(mode='after')
    def _heads_divide(self):
        if self.feat_channels % self.num_attn_heads:
            raise ValueError('feat_channels must be divisible by num_attn_heads')
        return self


class LossSettings(_Section):
    lambda_cls: float = Field(2.0, gt=0)
    lambda_l1: float = Field(5.0, gt=0)
    lambda_giou: float = Field(2.0, gt=0)

    def to_weights(self) -> LossWeights:
        return LossWeights(self.lambda_cls, self.lambda_l1, self.lambda_giou)


class TrainerSettings(_Section):
    iterations: int = Field(20000, ge=0)
    batch_size: int = Field(4, ge=1)
    learning_rate: float = Field(2.5e-5, gt=0)
    weight_decay: float = Field(1e-4, ge=0)
    lr_milestones: List[int] = Field(default_factory=list)
    lr_gamma: float = Field(0.1, gt=0)
    clip_grad_norm: float = Field(1.0, ge=0)
    ema_decay: float = Field(0.95, ge=0, le=1)
    ema_target: bool = True
    n_tr: int = Field(300, ge=1)
    padding_mode: Literal['gaussian', 'jitter'] = 'gaussian'
    train_box_renewal: bool = False
    hflip_prob: float = Field(0.5, ge=0, le=1)
    checkpoint_every: int = Field(1000, ge=1)
    log_every: int = Field(20, ge=1)
    num_workers: int = Field(0, ge=0)


class DataSettings(_Section):
    source: Literal['synthetic', 'coco'] = 'synthetic'
    num_classes: int = Field(3, ge=1, le=5)
    image_size: int = Field(64, ge=16)
    max_objects: int = Field(5, ge=0)
    train_count: int = Field(1000, ge=1)
    val_count: int = Field(200, ge=1)
    train_seed: int = 1
    val_seed: int = 2
    annotations: Optional[str] = None
    val_annotations: Optional[str] = None
    image_root: Optional[str] = None

    @model_validator(mode='after')
    def _coco_paths(self):
        if self.source == 'coco' and not self.annotations:
            raise ValueError('data.annotations is required when data.source is coco')
        return self


class SamplerSettings(_Section):
    n_ss: int = Field(4, ge=1)
    n_p: int = Field(500, ge=1)
    B_th: float = Field(0.98, ge=0, le=1)
    N_th: float = Field(0.64, gt=0, le=1)
    score_floor: float = Field(0.05, ge=0, le=1)


class Settings(_Section):
    seed: int = 0
    schedule: ScheduleSettings = Field(default_factory=ScheduleSettings)
    model: ModelSettings = Field(default_factory=ModelSettings)
    loss: LossSettings = Field(default_factory=LossSettings)
    trainer: TrainerSettings = Field(default_factory=TrainerSettings)
    data: DataSettings = Field(default_factory=DataSettings)
    sampler: SamplerSettings = Field(default_factory=SamplerSettings)

    @model_validator(mode='after')
    def _steps_fit_schedule(self):
        if self.sampler.n_ss > self.schedule.T:
            raise ValueError('sampler.n_ss cannot exceed schedule.T')
        return self

    def echo(self) -> Dict[str, Any]:
        return self.model_dump(mode='json')


def _dotted(loc) -> str:
    return '.'.join(str(part) for part in loc)


def read_config_file(path: Union[str, Path]) -> Dict[str, Any]:
    """Raw mapping from a YAML or JSON file"""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}", key='--config')
    try:
        with open(path, 'r') as f:
            if path.suffix == '.json':
                raw = json.load(f)
            else:
                raw = yaml.safe_load(f)
    except (yaml.YAMLError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot parse {path}: {e}", key='--config') from e
    if raw is None:
        return {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{path} must hold a mapping at the top level", key='--config')
    return raw


def apply_overrides(raw: Dict[str, Any], overrides: Mapping[str, Any]) -> Dict[str, Any]:
    """Set dotted keys (e.g. 'sampler.n_ss') on a copy of the raw mapping; None values are skipped"""
    merged = json.loads(json.dumps(raw))
    for dotted, value in overrides.items():
        if value is None:
            continue
        node = merged
        parts = dotted.split('.')
        for part in parts[:-1]:
            child = node.setdefault(part, {})
            if not isinstance(child, dict):
                raise ConfigError(f"'{part}' is not a section", key=dotted)
            node = child
        node[parts[-1]] = value
    return merged


def build_settings(raw: Mapping[str, Any]) -> Settings:
    try:
        return Settings.model_validate(dict(raw))
    except ValidationError as e:
        first = e.errors()[0]
        key = _dotted(first['loc']) or '<root>'
        if first['type'] == 'extra_forbidden':
            message = f"unknown config key '{key}'"
        else:
            message = f"invalid config value for '{key}': {first['msg']}"
        raise ConfigError(message, key=key) from e


def load_settings(path: Optional[Union[str, Path]] = None,
                  overrides: Optional[Mapping[str, Any]] = None) -> Settings:
    """File (if any) + overrides -> validated Settings"""
    raw = read_config_file(path) if path else {}
    settings = build_settings(apply_overrides(raw, overrides or {}))
    logger.debug(f"Loaded settings from {path or 'defaults'}")
    return settings


def resolve_device(explicit: Optional[str] = None) -> str:
    return explicit or os.getenv(DEVICE_ENV, 'cpu')

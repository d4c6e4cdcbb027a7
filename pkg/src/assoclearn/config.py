"""Run configuration: a JSON document validated against a strict schema."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, ValidationError, model_validator


class ConfigError(ValueError):
    """Bad config file, override path or value; ``key`` names the culprit."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class ModelConfig(_Section):
    architecture: str = "C(32,3)->C(32,3)->P(2)->C(64,3)->C(64,3)->P(2)->C(128,3)->C(128,3)->P(2)->FC(128)"
    # stride for P(k) layers without an explicit one; None means k
    pool_stride: Optional[int] = None


class DataConfig(_Section):
    kind: Literal["idx", "blobs"] = "blobs"
    num_classes: int = 4
    # idx files (optionally gzipped)
    train_images: Optional[str] = None
    train_labels: Optional[str] = None
    test_images: Optional[str] = None
    test_labels: Optional[str] = None
    test_limit: Optional[int] = None
    # synthetic blobs; the test split uses seed + 1
    per_class: int = 500
    test_per_class: int = 500
    dim: int = 2
    spread: float = 0.35
    seed: int = 0
    rotation: float = 0.0

    @model_validator(mode="after")
    def _paths(self):
        if self.kind == "idx" and not (self.train_images and self.test_images and self.test_labels):
            raise ValueError("idx data needs train_images, test_images and test_labels")
        return self


class SamplerSection(_Section):
    labeled_per_class: int = 10
    unlabeled_batch: int = 100
    labeled_pool_size: Optional[int] = None
    unlabeled_pool_size: Optional[int] = None
    share_pool: bool = False
    # batches prepared ahead on a worker thread; 0 disables
    prefetch: int = 0


class LossConfig(_Section):
    walker: float = 1.0
    visit: float = 1.0
    classification: float = 1.0


class OptimizerConfig(_Section):
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    decay_rate: Optional[float] = None
    decay_steps: int = 1000


class AugmentConfig(_Section):
    max_shift: int = 0
    noise_std: float = 0.0
    max_rotation: float = 0.0


class AdaptConfig(_Section):
    target: Optional[DataConfig] = None
    steps: int = 1000
    visit: float = 0.5
    # also train a labeled-target model to bound the gap coverage
    target_only: bool = False


class RunConfig(_Section):
    mode: Literal["supervised", "semisup", "adapt"] = "semisup"
    model: ModelConfig = ModelConfig()
    data: DataConfig = DataConfig()
    sampler: SamplerSection = SamplerSection()
    loss: LossConfig = LossConfig()
    optimizer: OptimizerConfig = OptimizerConfig()
    augment: AugmentConfig = AugmentConfig()
    adapt: AdaptConfig = AdaptConfig()
    max_steps: int = 1000
    eval_every: int = 100
    seed: int = 0
    num_seeds: int = 3
    precision: Literal["float32", "float64"] = "float32"
    out_dir: Optional[str] = None
    assoc_dump_steps: list[int] = []
    checkpoint_every: Optional[int] = None
    log_wall_time: bool = False

    @model_validator(mode="after")
    def _check(self):
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")
        if self.eval_every < 1:
            raise ValueError("eval_every must be >= 1")
        if self.mode == "adapt" and self.adapt.target is None:
            raise ValueError("mode=adapt requires adapt.target")
        return self


def _raise(e: ValidationError):
    err = e.errors()[0]
    key = ".".join(str(p) for p in err["loc"]) or "<root>"
    raise ConfigError(key, err["msg"]) from None


def config_from_dict(d: dict) -> RunConfig:
    try:
        return RunConfig.model_validate(d)
    except ValidationError as e:
        _raise(e)


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ConfigError("--config", f"cannot read {path}: {e.strerror}") from None
    try:
        d = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError("--config", f"{path} is not valid JSON: {e}") from None
    return config_from_dict(d)


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(cfg: RunConfig, overrides: list[str]) -> RunConfig:
    """Apply ``key.path=value`` overrides; values are parsed as JSON when possible."""
    d = cfg.model_dump()
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise ConfigError(item, "override must look like key.path=value")
        node, model = d, RunConfig
        parts = key.split(".")
        for i, part in enumerate(parts):
            if part not in model.model_fields:
                raise ConfigError(key, "unknown configuration key")
            if i == len(parts) - 1:
                node[part] = _parse_value(raw)
                break
            sub = _section_type(model.model_fields[part].annotation)
            if sub is None:
                raise ConfigError(key, f"{'.'.join(parts[:i + 1])} is not a section")
            if node.get(part) is None:
                node[part] = sub().model_dump()
            node, model = node[part], sub
    try:
        return RunConfig.model_validate(d)
    except ValidationError as e:
        _raise(e)


def _section_type(annotation):
    if isinstance(annotation, type) and issubclass(annotation, BaseModel):
        return annotation
    for arg in getattr(annotation, "__args__", ()):
        if isinstance(arg, type) and issubclass(arg, BaseModel):
            return arg
    return None


def dump_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(json.dumps(cfg.model_dump(), indent=2, sort_keys=True) + "\n")

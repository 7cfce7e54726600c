from pathlib import Path
from typing import Literal

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from gsir import params
from gsir.errors import ConfigError
from gsir.optim import RefineConfig


class StageControlConfig(BaseModel):
    """Fidelity target (tau_psnr, tau_ssim) and the stage/patch layout."""

    model_config = ConfigDict(frozen=True)

    tau_psnr: float = params.tau_psnr
    tau_ssim: float = params.tau_ssim
    patch_size: int = Field(default=params.patch_size, ge=2)
    n_stages: int = Field(default=params.n_stages, ge=1, le=params.max_stages)


class DistillWeights(BaseModel):
    model_config = ConfigDict(frozen=True)

    mu: float = Field(default=params.distill_attr_weights["mu"], ge=0.0)
    log_scale: float = Field(default=params.distill_attr_weights["log_scale"], ge=0.0)
    theta: float = Field(default=params.distill_attr_weights["theta"], ge=0.0)
    color: float = Field(default=params.distill_attr_weights["color"], ge=0.0)


def _check_stage_weights(v):
    if v is not None and any(w <= 0 for w in v):
        raise ValueError(f"stage weights must be positive, got {v}")
    return v


class PODConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    steps: int = Field(default=params.pod_steps, ge=0)
    K: int = Field(default=params.refine_steps, ge=0)
    distill_weight: float = Field(default=params.distill_weight, gt=0.0)
    stage_weights: tuple[float, ...] | None = None  # uniform when unset
    milestones: tuple[int, ...] = params.pod_milestones
    attr_weights: DistillWeights = DistillWeights()
    lr: float = Field(default=params.predictor_lr, gt=0.0)
    weight_decay: float = Field(default=params.predictor_weight_decay, ge=0.0)
    distill_reduction: Literal["mean", "sum"] = params.distill_reduction
    # plain gradient steps: the distill target moves in proportion to the
    # render-loss gradient, so it settles as the predictions improve
    refine: RefineConfig = RefineConfig(method="gd")
    seed: int = params.default_seed
    checkpoint_every: int = Field(default=0, ge=0)

    @field_validator("stage_weights")
    @classmethod
    def positive_weights(cls, v):
        return _check_stage_weights(v)

    @field_validator("milestones")
    @classmethod
    def milestones_sorted(cls, v):
        if not v or v[0] != 0 or list(v) != sorted(v):
            raise ValueError(f"milestones must start at 0 and be non-decreasing, got {v}")
        return v


class FinetuneConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    steps: int = Field(default=params.finetune_steps, ge=0)
    stage_weights: tuple[float, ...] | None = None
    lr: float = Field(default=params.finetune_lr, gt=0.0)
    weight_decay: float = Field(default=params.predictor_weight_decay, ge=0.0)
    # propagate through the residual inputs of later stages as well as through
    # the prefixes each stage's primitives appear in
    through_residual: bool = True
    quant_aware: bool = False
    quant_strategy: Literal["per_image", "global", "adaptive"] = "adaptive"
    gamma: float = Field(default=params.quant_gamma, ge=0.0)
    seed: int = params.default_seed
    checkpoint_every: int = Field(default=0, ge=0)

    @field_validator("stage_weights")
    @classmethod
    def positive_weights(cls, v):
        return _check_stage_weights(v)


def stage_weights(weights, n_stages: int) -> list[float]:
    if weights is None:
        return [1.0] * n_stages
    if len(weights) < n_stages:
        raise ValueError(f"{len(weights)} stage weights for {n_stages} stages")
    return list(weights[:n_stages])


class TrainConfig(BaseModel):
    """Top-level schema of a training YAML file."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    control: StageControlConfig = StageControlConfig()
    pod: PODConfig = PODConfig()
    finetune: FinetuneConfig = FinetuneConfig()

    @model_validator(mode="after")
    def milestones_cover_stages(self):
        if len(self.pod.milestones) < self.control.n_stages:
            raise ValueError(f"{len(self.pod.milestones)} milestones for {self.control.n_stages} stages")
        return self


def _line_of(node, loc) -> int | None:
    """1-based line of the YAML node a validation error location points at."""
    line = node.start_mark.line + 1 if node is not None else None
    for key in loc:
        if isinstance(node, yaml.MappingNode):
            match = next(((k, v) for k, v in node.value if k.value == str(key)), None)
            if match is None:
                break
            line, node = match[0].start_mark.line + 1, match[1]
        elif isinstance(node, yaml.SequenceNode) and isinstance(key, int) and key < len(node.value):
            node = node.value[key]
            line = node.start_mark.line + 1
        else:
            break
    return line


def load_train_config(path) -> TrainConfig:
    text = Path(path).read_text()
    try:
        root = yaml.compose(text, Loader=yaml.SafeLoader)
        data = yaml.safe_load(text)
    except yaml.MarkedYAMLError as e:
        line = e.problem_mark.line + 1 if e.problem_mark is not None else None
        raise ConfigError(f"{path}: invalid YAML: {e.problem}", line) from e
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping", 1)
    try:
        return TrainConfig.model_validate(data)
    except ValidationError as e:
        err = e.errors()[0]
        where = ".".join(str(k) for k in err["loc"]) or "config"
        raise ConfigError(f"{path}: {where}: {err['msg']}", _line_of(root, err["loc"])) from e

from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Tuple, Union

from pydantic import BaseModel, ConfigDict, Field, PositiveFloat, PositiveInt, ValidationError, model_validator

import config as config
from attack_core import AttackBudget
from errors import ArtifactMissingError, AttackConfigError
from training import TrainConfig


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class DatasetSection(_Section):
    train_count: PositiveInt = 2000
    test_count: PositiveInt = 200
    train_seed: int = 0
    test_seed: int = 1000
    image_size: int = Field(default=config.INPUT_SIZE, ge=8)


class TrainSection(_Section):
    epochs: PositiveInt = config.EPOCHS
    learning_rate: PositiveFloat = config.LEARNING_RATE
    batch_size: PositiveInt = config.BATCH_SIZE
    momentum: float = Field(default=config.MOMENTUM, ge=0.0, lt=1.0)
    lr_steps: Tuple[int, ...] = config.LR_STEPS
    size_weight: float = Field(default=config.SIZE_LOSS_WEIGHT, ge=0.0)
    grad_clip: float = Field(default=config.GRAD_CLIP, ge=0.0)
    seeds: List[int] = Field(default_factory=lambda: [0], min_length=1)


class DetectorSection(_Section):
    num_categories: int = Field(default=config.NUM_CATEGORIES, ge=1, le=len(config.CATEGORY_NAMES))
    hidden_widths: Tuple[PositiveInt, ...] = config.HIDDEN_WIDTHS
    dilations: Tuple[PositiveInt, ...] = config.LAYER_DILATIONS
    visual_threshold: float = Field(default=config.VISUAL_THRESHOLD, gt=0.0, lt=1.0)


class AttackSection(_Section):
    method: Literal["sca", "dca"] = "dca"
    t_attack: float = Field(default=config.T_ATTACK, gt=0.0, lt=1.0)
    max_inner_sca: PositiveInt = config.MAX_INNER_SCA
    max_outer_sca: PositiveInt = config.MAX_OUTER_SCA
    eps_dca: float = Field(default=config.EPS_DCA, gt=0.0, le=config.EPS_CEILING + 1e-12)
    max_outer_dca: PositiveInt = config.MAX_OUTER_DCA
    detected_only: bool = False
    limit: Optional[PositiveInt] = None


class EvalSection(_Section):
    iou_threshold: float = Field(default=config.IOU_THRESHOLD, gt=0.0, lt=1.0)
    timing: bool = False


class RunConfig(_Section):
    """Everything a run needs; all randomness flows from the seeds in here."""
    dataset: DatasetSection = Field(default_factory=DatasetSection)
    train: TrainSection = Field(default_factory=TrainSection)
    detector: DetectorSection = Field(default_factory=DetectorSection)
    attack: AttackSection = Field(default_factory=AttackSection)
    eval: EvalSection = Field(default_factory=EvalSection)
    output_dir: Path = Path("runs")
    workers: PositiveInt = config.WORKERS

    @model_validator(mode="after")
    def _attack_below_visual_threshold(self) -> "RunConfig":
        if self.attack.t_attack >= self.detector.visual_threshold:
            raise ValueError(
                f"attack.t_attack ({self.attack.t_attack}) must be below "
                f"detector.visual_threshold ({self.detector.visual_threshold})"
            )
        return self

    def budget(self) -> AttackBudget:
        return AttackBudget(
            max_inner_sca=self.attack.max_inner_sca,
            max_outer_dca=self.attack.max_outer_dca,
            eps_dca=self.attack.eps_dca,
            max_outer_sca=self.attack.max_outer_sca,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.train.epochs,
            learning_rate=self.train.learning_rate,
            batch_size=self.train.batch_size,
            momentum=self.train.momentum,
            lr_steps=tuple(self.train.lr_steps),
            size_weight=self.train.size_weight,
            grad_clip=self.train.grad_clip,
        )

    def payload(self) -> Dict[str, Any]:
        return self.model_dump(mode="json")

    def with_overrides(self, overrides: Dict[str, Any]) -> "RunConfig":
        """Apply dotted-path overrides (``"attack.method"``); ``None`` values are ignored."""
        payload = self.payload()
        for dotted, value in overrides.items():
            if value is None:
                continue
            node = payload
            *parents, leaf = dotted.split(".")
            for key in parents:
                node = node[key]
            node[leaf] = value
        return build_run_config(payload)


def describe_validation_error(exc: ValidationError) -> str:
    lines = []
    for err in exc.errors():
        loc = ".".join(str(p) for p in err["loc"])
        message = err["msg"].removeprefix("Value error, ")
        lines.append(f"{loc}: {message}" if loc else message)
    return "; ".join(lines)


def build_run_config(payload: Dict[str, Any]) -> RunConfig:
    try:
        return RunConfig.model_validate(payload)
    except ValidationError as exc:
        first = exc.errors()[0]
        # the only model-level check is the t_attack / visual_threshold ordering
        field = ".".join(str(p) for p in first["loc"]) or "attack.t_attack"
        message = first["msg"].removeprefix("Value error, ")
        if len(exc.errors()) > 1:
            message += f" (and {len(exc.errors()) - 1} more: {describe_validation_error(exc)})"
        raise AttackConfigError(field, message) from exc


def load_run_config(path: Optional[Union[str, Path]] = None) -> RunConfig:
    if path is None:
        return RunConfig()
    path = Path(path)
    if not path.exists():
        raise ArtifactMissingError(f"config file not found: {path}")
    try:
        payload = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise AttackConfigError("config", f"{path} is not valid JSON: {exc}") from exc
    return build_run_config(payload)

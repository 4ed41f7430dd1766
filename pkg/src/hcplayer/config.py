"""Schema for the JSON run configuration consumed by the command line."""
from __future__ import annotations

import json
from pathlib import Path
from typing import Dict, List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field
from pydantic import ValidationError as PydanticValidationError

from .exceptions import ValidationError
from .sampling import SamplerConfig
from .training import TrainingConfig


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class TrainSection(_Strict):
    alpha: float = Field(0.1, ge=0)
    gamma: float = Field(0.9, ge=0, le=1)
    learning_rate: float = Field(1e-4, gt=0)
    weight_decay: float = Field(0.01, ge=0)
    batch_size: int = Field(8, ge=1)
    epochs: int = Field(10, ge=1)
    max_steps: Optional[int] = Field(None, ge=1)
    T: int = Field(1000, ge=2)
    beta_schedule: Literal["linear", "scaled_linear"] = "scaled_linear"
    window: Tuple[int, int] = (0, 1000)
    cosine: Dict[Literal["down", "mid", "up"], bool] = Field(
        default_factory=lambda: {"down": True, "mid": True, "up": True})
    hidden_width: int = Field(1024, ge=1)
    num_blocks: int = Field(3, ge=1)
    supervise: Literal["human_centric", "combined"] = "human_centric"
    grad_clip: Optional[float] = Field(None, gt=0)
    checkpoint_every: int = Field(0, ge=0)
    guard_every: int = Field(1, ge=1)
    extractor: Literal["toy", "resnet50"] = "toy"
    prior_kind: Literal["pose", "depth"] = "pose"


class SamplerSection(_Strict):
    steps: int = Field(50, ge=1)
    guidance_scale: float = Field(7.5, ge=0)
    eta: float = Field(0.0, ge=0, le=1)
    gamma: Optional[float] = Field(None, ge=0, le=1)
    num_images: int = Field(1, ge=1)


class BackboneSection(_Strict):
    kind: Literal["toy"] = "toy"
    seed: int = 0


class TraceSection(_Strict):
    enabled: bool = False
    layers: Optional[List[str]] = None
    timesteps: Optional[List[int]] = None


class MetricsSection(_Strict):
    kid_subset_size: int = Field(100, ge=2)
    kid_subsets: int = Field(100, ge=1)


class PathsSection(_Strict):
    manifest: Optional[str] = None
    out_dir: str = "runs/default"


class RunConfig(_Strict):
    seed: int = 0
    paths: PathsSection = Field(default_factory=PathsSection)
    backbone: BackboneSection = Field(default_factory=BackboneSection)
    train: TrainSection = Field(default_factory=TrainSection)
    sampler: SamplerSection = Field(default_factory=SamplerSection)
    trace: TraceSection = Field(default_factory=TraceSection)
    metrics: MetricsSection = Field(default_factory=MetricsSection)

    def training_config(self) -> TrainingConfig:
        return TrainingConfig(**self.train.model_dump(), seed=self.seed)

    def sampler_config(self) -> SamplerConfig:
        return SamplerConfig(**self.sampler.model_dump(), seed=self.seed, T=self.train.T,
                             beta_schedule=self.train.beta_schedule)

    def resolved(self) -> dict:
        return self.model_dump(mode="json")


def _format_errors(exc: PydanticValidationError) -> str:
    lines = []
    for err in exc.errors():
        loc = ".".join(str(p) for p in err["loc"]) or "<root>"
        lines.append(f"{loc}: {err['msg']}")
    return "; ".join(lines)


def parse_config(data: dict, base_dir: Optional[Path] = None) -> RunConfig:
    """Validate ``data``; relative paths resolve against ``base_dir``."""
    try:
        cfg = RunConfig.model_validate(data)
    except PydanticValidationError as exc:
        raise ValidationError(f"invalid config: {_format_errors(exc)}") from None
    if base_dir is not None:
        if cfg.paths.manifest is not None:
            cfg.paths.manifest = str((base_dir / cfg.paths.manifest).resolve())
        cfg.paths.out_dir = str((base_dir / cfg.paths.out_dir).resolve())
    lo, hi = cfg.train.window
    if not 0 <= lo < hi <= cfg.train.T:
        raise ValidationError(f"invalid config: train.window: {cfg.train.window} must satisfy 0 <= lo < hi <= T")
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ValidationError(f"config file {path} does not exist")
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ValidationError(f"config file {path} is not valid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise ValidationError(f"config file {path}: top level must be an object")
    return parse_config(data, path.parent)

"""Run configuration: one JSON document with a section per pipeline stage; unknown keys are rejected."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator

from .model import ModelConfig
from .text import TASKS
from .trainer import TrainConfig


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ModelSection(_Section):
    image_size: int = 32
    patch_size: int = 4
    d_model: int = 64
    heads: int = 4
    n_double_blocks: int = 2
    n_single_blocks: int = 2
    text_len: int = 8
    mlp_ratio: int = 2
    time_dim: int = 32
    seed: int = 0

    def build(self) -> ModelConfig:
        return ModelConfig(**self.model_dump(exclude={"seed"}))


class PretrainSection(_Section):
    """Prompt-free pre-training of the base transformer on a disjoint generic corpus."""

    iterations: int = 3000
    lr: float = 1e-3
    warmup_steps: int = 100
    corpus_size: int = 256
    seed: int = 0


class TrainSection(_Section):
    iterations: int = 1920
    batch_size: int = 4
    lr_lora: float = 1e-4
    lr_text: float = 5e-6
    wd_lora: float = 1e-4
    wd_text: float = 1e-3
    warmup_steps: int = 500
    rank: int = 64
    alpha: Optional[float] = None
    regime: Literal["unified", "per-task"] = "unified"
    task: Optional[Literal["noise", "rain", "haze"]] = None
    text_encoder_trainable: bool = False
    prompt_dropout: float = 0.10
    timestep_mu: float = 0.0
    timestep_sigma: float = 1.0
    grad_clip: float = 1.0
    checkpoint_every: int = 100
    seed: int = 0

    def build(self, **overrides) -> TrainConfig:
        return TrainConfig(**{**self.model_dump(), **overrides})


class SampleSection(_Section):
    steps: int = Field(28, ge=1)
    guidance: float = Field(2.5, ge=0.0)
    seed: int = 0


class DataSection(_Section):
    n_per_task: int = 16
    tasks: list[str] = Field(default_factory=lambda: list(TASKS))
    eval_per_task: int = 12
    seed: int = 0

    @field_validator("tasks")
    @classmethod
    def _known_tasks(cls, v: list[str]) -> list[str]:
        bad = [t for t in v if t not in TASKS]
        if bad:
            raise ValueError(f"unknown task(s) {bad}; expected a subset of {{{', '.join(TASKS)}}}")
        return v


class EvalSection(_Section):
    extractor_seed: int = 0
    bandwidth: Optional[float] = None
    with_baseline: bool = False


class RunConfig(_Section):
    model: ModelSection = Field(default_factory=ModelSection)
    pretrain: PretrainSection = Field(default_factory=PretrainSection)
    train: TrainSection = Field(default_factory=TrainSection)
    sample: SampleSection = Field(default_factory=SampleSection)
    data: DataSection = Field(default_factory=DataSection)
    eval: EvalSection = Field(default_factory=EvalSection)

    def to_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> RunConfig:
        return cls.model_validate_json(text)


def load_config(path=None) -> RunConfig:
    if path is None:
        return RunConfig()
    return RunConfig.from_json(Path(path).read_text())

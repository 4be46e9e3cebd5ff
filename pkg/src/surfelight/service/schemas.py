"""Request and response bodies for the pipeline service.

Every request names its input artifacts by filesystem path and carries the
full typed config for the step; unknown config keys are rejected so a typo
cannot silently fall back to a default.
"""

from __future__ import annotations

from pydantic import BaseModel, ConfigDict, Field

from ..config import (EvaluateConfig, GradcheckConfig, MeshConfig,
                      RelightConfig, RenderConfig, Stage1Config, Stage2Config,
                      SynthConfig)


class _Request(BaseModel):
    model_config = ConfigDict(extra="forbid")


class SynthRequest(_Request):
    out_dir: str
    config: SynthConfig = Field(default_factory=SynthConfig)


class TrainStage1Request(_Request):
    dataset_dir: str
    out_dir: str
    config: Stage1Config = Field(default_factory=Stage1Config)


class ExtractMeshRequest(_Request):
    checkpoint_dir: str
    dataset_dir: str
    out_dir: str
    config: MeshConfig = Field(default_factory=MeshConfig)


class TrainStage2Request(_Request):
    dataset_dir: str
    stage1_dir: str
    mesh_path: str
    out_dir: str
    config: Stage2Config = Field(default_factory=Stage2Config)


class RenderRequest(_Request):
    checkpoint_dir: str
    dataset_dir: str
    out_dir: str
    mesh_path: str | None = None
    config: RenderConfig = Field(default_factory=RenderConfig)


class RelightRequest(_Request):
    checkpoint_dir: str
    dataset_dir: str
    out_dir: str
    mesh_path: str | None = None
    config: RelightConfig = Field(default_factory=RelightConfig)


class EvaluateRequest(_Request):
    pred: str
    ref: str
    out_path: str
    kind: str = "images"
    mask_root: str | None = None
    mask: str = "none"
    config: EvaluateConfig = Field(default_factory=EvaluateConfig)


class GradcheckRequest(_Request):
    out_dir: str
    config: GradcheckConfig = Field(default_factory=GradcheckConfig)


class CommandResponse(BaseModel):
    """Uniform success envelope: the per-command summary rides in result."""

    ok: bool = True
    command: str
    result: dict


class ErrorResponse(BaseModel):
    """Failure envelope; kind is "validation" or "numerical"."""

    ok: bool = False
    kind: str
    error: str


class HealthResponse(BaseModel):
    status: str
    version: str

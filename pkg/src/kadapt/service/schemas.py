"""Request/response models for the HTTP service.

Every settings field doubles as a config-file key (in the section named by
``SECTIONS``) and as a ``--kebab-case`` CLI flag, so names are unique across
sections.
"""

from __future__ import annotations

from typing import Any, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator


def _split(v):
    if isinstance(v, str):
        return tuple(s.strip() for s in v.split(",") if s.strip())
    return v


class _Settings(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ModelSettings(_Settings):
    preset: str = "vit-tiny"
    image_size: Optional[int] = None
    patch_size: Optional[int] = None
    channels: Optional[int] = None
    d_model: Optional[int] = None
    num_heads: Optional[int] = None
    num_layers: Optional[int] = None
    mlp_ratio: Optional[int] = None
    surrogate: str = "random"
    surrogate_seed: int = 0
    pretext_epochs: int = 5


class DataSettings(_Settings):
    source: str = "synthetic"
    classes: int = 10
    per_class: int = 40
    noise_sigma: float = 0.6
    amplitude: float = 1.0
    data_seeds: tuple[int, ...] = (0,)
    image_path: Optional[str] = None
    label_path: Optional[str] = None
    norm_mean: float = 0.0
    norm_std: float = 1.0

    _split = field_validator("data_seeds", mode="before")(_split)


class TrainSettings(_Settings):
    optimizer: str = "sgd"
    momentum: float = 0.9
    lr_grid: tuple[float, ...] = (1e-3, 1e-2, 1e-1)
    wd_grid: tuple[float, ...] = (0.0, 1e-4)
    epochs: int = 50
    full_shot_epochs_grid: tuple[int, ...] = (100, 200, 400)
    epoch_divisor: int = 10
    batch_size: int = 32
    eval_every: int = 0
    protocol: str = "few_shot"
    shots: int = 5
    seeds: tuple[int, ...] = (0, 1, 2)

    _split = field_validator("lr_grid", "wd_grid", "full_shot_epochs_grid", "seeds", mode="before")(_split)


class AdaptSettings(_Settings):
    strategy: str = "kadaptation:n=4,r=1"
    strategies: tuple[str, ...] = ()

    @field_validator("strategies", mode="before")
    @classmethod
    def _split_strategies(cls, v):
        # strategy specs contain commas themselves, so lists use ';'
        if isinstance(v, str):
            return tuple(s.strip() for s in v.split(";") if s.strip())
        return v


class IDSettings(_Settings):
    module: str = "attention"
    layers: tuple[int, ...] = (0,)
    grid: tuple[int, ...] = (0, 16, 64, 256, 1024)
    projection: str = "fastfood"
    threshold: float = 0.9

    _split = field_validator("layers", "grid", mode="before")(_split)


class CountSettings(_Settings):
    method: Optional[str] = None
    L: Optional[int] = None
    k: Optional[int] = None
    d: Optional[int] = None
    r: Optional[int] = None
    n: Optional[int] = None


class CheckpointSettings(_Settings):
    checkpoint_out: Optional[str] = None
    checkpoint: Optional[str] = None
    merged_out: Optional[str] = None
    check_inputs: int = 100


SECTIONS = {
    "model": ModelSettings,
    "data": DataSettings,
    "train": TrainSettings,
    "adapt": AdaptSettings,
    "id": IDSettings,
    "count": CountSettings,
    "checkpoint": CheckpointSettings,
}


class _Request(BaseModel):
    model_config = ConfigDict(extra="forbid")
    seed: int = 0
    model: ModelSettings = Field(default_factory=ModelSettings)


class TrainRequest(_Request):
    data: DataSettings = Field(default_factory=DataSettings)
    train: TrainSettings = Field(default_factory=TrainSettings)
    adapt: AdaptSettings = Field(default_factory=AdaptSettings)
    checkpoint: CheckpointSettings = Field(default_factory=CheckpointSettings)


class BenchRequest(_Request):
    data: DataSettings = Field(default_factory=DataSettings)
    train: TrainSettings = Field(default_factory=TrainSettings)
    adapt: AdaptSettings = Field(default_factory=AdaptSettings)


class MeasureIDRequest(_Request):
    data: DataSettings = Field(default_factory=DataSettings)
    train: TrainSettings = Field(default_factory=TrainSettings)
    id: IDSettings = Field(default_factory=IDSettings)


class CountRequest(_Request):
    adapt: AdaptSettings = Field(default_factory=AdaptSettings)
    count: CountSettings = Field(default_factory=CountSettings)


class MergeRequest(BaseModel):
    model_config = ConfigDict(extra="forbid")
    checkpoint: CheckpointSettings


class RunReportModel(BaseModel):
    strategy: str
    dataset: str
    seeds: list[int]
    per_seed_accuracy: list[float]
    mean_accuracy: Optional[float]
    best_cells: list[Optional[dict[str, Any]]]
    head_params: int
    non_head_params: int
    total_params: int
    pe: Optional[float]
    wall_clock_s: float
    peak_live_bytes: int
    failed_cells: int = 0
    errors: list[str] = []


class TrainResponse(BaseModel):
    report: RunReportModel
    results_csv: str
    grid: list[dict[str, Any]]
    checkpoint: Optional[str] = None


class BenchResponse(BaseModel):
    reports: list[RunReportModel]
    results_csv: str
    timing_csv: str


class MeasureIDResponse(BaseModel):
    module: str
    layers: list[int]
    per_layer: dict[str, dict[str, Any]]
    mean: dict[str, Any]


class CountResponse(BaseModel):
    rows: list[dict[str, Any]]
    csv: str
    formula: Optional[dict[str, Any]] = None


class MergeResponse(BaseModel):
    output: str
    strategy: str
    sites: list[str]
    max_abs_logit_deviation: float
    argmax_agree: bool

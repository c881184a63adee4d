from typing import List, NamedTuple, Optional

import torch
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from torch import nn
from typing_extensions import TypedDict


class TrainConfig(BaseModel):
    """Optimization recipe. Defaults are the published training settings."""

    model_config = ConfigDict(populate_by_name=True)

    crop: int = Field(240, ge=4, description="Square training crop, divisible by 4.")
    batch: int = Field(16, ge=1, description="Pairs per optimization step.")
    lr_init: float = Field(2e-4, gt=0.0, description="Learning rate at step 0.")
    lr_final: float = Field(1e-6, ge=0.0, description="Learning rate reached at total_steps.")
    beta1: float = Field(0.9, ge=0.0, lt=1.0)
    beta2: float = Field(0.999, ge=0.0, lt=1.0)
    total_steps: int = Field(100_000, ge=0, description="Length of the cosine schedule.")
    seed: int = Field(0, description="Keys every batch/augmentation draw as (seed, step, slot).")
    lambda_: float = Field(0.1, alias="lambda", ge=0.0, description="Weight of the contrastive term.")
    epsilon: float = Field(1e-3, gt=0.0, description="Charbonnier epsilon.")
    grad_clip: Optional[float] = Field(None, gt=0.0, description="Global grad-norm clip; null = off.")
    val_every: int = Field(1000, ge=1, description="Validation PSNR cadence in steps.")
    checkpoint_every: int = Field(5000, ge=1, description="Checkpoint cadence in steps.")
    log_every: int = Field(50, ge=1, description="Console log cadence in steps.")
    workers: int = Field(0, ge=0, description="DataLoader worker processes (0 = in-process).")
    pair_cache: int = Field(256, ge=0, description="Decoded pairs kept in memory per loader process (0 = none).")
    deterministic: bool = Field(False, description="Single-threaded, deterministic kernels (slower).")
    device: str = Field("cpu", description="torch device string.")
    dataset_dir: Optional[str] = Field(None, description="Training pairs in <root>/hazy + <root>/clear.")
    val_dir: Optional[str] = Field(None, description="Validation pairs; defaults to a hold-out of dataset_dir.")
    val_count: int = Field(0, ge=0, description="Pairs held out of dataset_dir when val_dir is unset.")

    @field_validator("crop")
    @classmethod
    def _crop_divisible(cls, value: int) -> int:
        if value % 4:
            raise ValueError(f"crop must be divisible by 4, got {value}")
        return value

    @model_validator(mode="after")
    def _schedule_decreases(self) -> "TrainConfig":
        if self.lr_final > self.lr_init:
            raise ValueError(f"lr_final ({self.lr_final}) must not exceed lr_init ({self.lr_init})")
        return self


class MetricRow(BaseModel):
    """One line of metrics.csv. Training rows leave val_psnr empty and vice versa."""

    step: int
    lr: Optional[float] = None
    char: Optional[float] = None
    hcl: Optional[float] = None
    total: Optional[float] = None
    val_psnr: Optional[float] = None
    wall_ms: Optional[float] = None


METRIC_COLUMNS = list(MetricRow.model_fields)


class TrainState(TypedDict):
    """
    Everything needed to continue training exactly where it stopped.

    Batches are drawn from generators keyed on (seed, step, slot), so `step`
    and `seed` are the whole data-RNG state; `torch_rng` covers anything that
    touches torch's global generator.
    """

    step: int
    seed: int
    model: nn.Module
    optimizer: torch.optim.Optimizer
    torch_rng: torch.Tensor
    history: List[MetricRow]


class LossBreakdown(NamedTuple):
    """Loss terms of one evaluation of the objective. `total` carries the graph."""

    char: torch.Tensor
    hcl: torch.Tensor
    total: torch.Tensor
    lam: float
    epsilon: float

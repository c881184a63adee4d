from typing import List, Literal, Optional

from pydantic import BaseModel, Field

PsnrMode = Literal["rgb", "y-channel"]


class EvalConfig(BaseModel):
    """Inputs of `evaluate_dir`."""

    dataset_dir: Optional[str] = Field(None, description="Pairs in <root>/hazy + <root>/clear.")
    checkpoint: Optional[str] = Field(None, description="Checkpoint to score.")
    mode: PsnrMode = Field("rgb", description="PSNR on RGB or on BT.601 luma.")
    workers: int = Field(0, ge=0, description="Threads scoring images in parallel (0 = serial).")


class EvalRow(BaseModel):
    name: str
    psnr_db: float
    ssim: float


class EvalReport(BaseModel):
    """Per-image scores and their means; rows sorted by name."""

    config_fingerprint: str = Field(description="Short SHA-256 of the model config JSON.")
    checkpoint: str = Field(description="Checkpoint file name and training step.")
    mode: PsnrMode
    rows: List[EvalRow] = Field(default_factory=list)
    mean_psnr_db: Optional[float] = None
    mean_ssim: Optional[float] = None
    skipped: List[str] = Field(default_factory=list, description="Names without a hazy/clear partner or whose images differ in size.")


class SeriesStats(BaseModel):
    initial: Optional[float] = None
    final: Optional[float] = None
    min: Optional[float] = None
    max: Optional[float] = None


class RunCurveSummary(BaseModel):
    label: str
    steps: int = Field(0, description="Training rows in the CSV.")
    loss: SeriesStats = Field(default_factory=SeriesStats)
    val_psnr: SeriesStats = Field(default_factory=SeriesStats)


class CurveSummary(BaseModel):
    runs: List[RunCurveSummary] = Field(default_factory=list)
    plots: List[str] = Field(default_factory=list, description="Plot files written, relative to out_dir.")

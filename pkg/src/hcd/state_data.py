from typing import Any, Dict, Literal, NamedTuple, Optional, Tuple

import torch
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

# (channels, height, width); batched code paths use (N, C, H, W).
ImageTensor = torch.Tensor

DepthMode = Literal["linear-ramp", "radial", "perlin"]
DEPTH_MODES: Tuple[str, ...] = ("linear-ramp", "radial", "perlin")


class SynthConfig(BaseModel):
    """Parameters of `synth_dataset`. Ranges are test infrastructure, not published values."""

    clear_dir: Optional[str] = Field(
        None, description="Clear source images; procedural scenes are rendered when unset."
    )
    count: int = Field(200, ge=0, description="Pairs to write.")
    seed: int = Field(0, description="Every pair draws from a generator keyed on (seed, index).")
    beta_range: Tuple[float, float] = Field((0.6, 1.8), description="Scattering coefficient range.")
    atmosphere_range: Tuple[float, float] = Field((0.7, 1.0), description="Global atmosphere light range.")
    depth_mode: Literal["linear-ramp", "radial", "perlin", "random"] = Field(
        "random", description="Synthetic depth generator; random picks one per pair."
    )
    scene_count: int = Field(32, ge=1, description="Procedural clear scenes rendered when clear_dir is unset.")
    scene_size: int = Field(64, ge=8, description="Side of the procedural clear scenes.")
    workers: int = Field(0, ge=0, description="Threads synthesizing pairs (0 = serial).")

    @field_validator("beta_range")
    @classmethod
    def _beta_range(cls, value: Tuple[float, float]) -> Tuple[float, float]:
        low, high = value
        if low < 0 or high < low:
            raise ValueError(f"beta_range must satisfy 0 <= low <= high, got {value}")
        return value

    @field_validator("atmosphere_range")
    @classmethod
    def _atmosphere_range(cls, value: Tuple[float, float]) -> Tuple[float, float]:
        low, high = value
        if not 0 < low <= high <= 1:
            raise ValueError(f"atmosphere_range must lie in (0, 1] with low <= high, got {value}")
        return value


class HazeManifestRecord(BaseModel):
    """One manifest line; (seed, index) regenerates the pair exactly."""

    name: str
    beta: float
    A: float
    depth_mode: DepthMode
    seed: int
    index: int
    source: str


class FeaturePyramid(NamedTuple):
    """
    Three feature maps at scales 1, 1/2, 1/4 with depths C, 2C, 4C.

    A NamedTuple so it can flow through `nn.Module.forward` and unpack like
    the (F1, F2, F3) triple it stands for.
    """

    f1: torch.Tensor
    f2: torch.Tensor
    f3: torch.Tensor


class HazePairRecord(BaseModel):
    """A (hazy, clear) pair plus where it came from."""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    hazy: torch.Tensor = Field(description="Hazy image, (C, H, W) in [0, 1].")
    clear: torch.Tensor = Field(description="Clear image with the same shape as `hazy`.")
    meta: Dict[str, Any] = Field(
        default_factory=dict,
        description="Provenance: beta, atmosphere, depth_mode, source paths, augmentation draws.",
    )

    @model_validator(mode="after")
    def _same_shape(self) -> "HazePairRecord":
        if tuple(self.hazy.shape) != tuple(self.clear.shape):
            raise ValueError(
                f"hazy {tuple(self.hazy.shape)} and clear {tuple(self.clear.shape)} differ in shape"
            )
        return self

from typing import Dict, Literal

from pydantic import BaseModel, Field

VariantName = Literal["variant1", "variant2", "variant3", "hcd"]


class ModelConfig(BaseModel):
    """
    Architecture of the hierarchical dehazing network.

    The three ablation flags select the ablation presets:
    variant1 = all off, variant2 = dcn, variant3 = dcn + hfb, hcd = all on.
    `use_hcl` does not change the network; the training objective reads it.
    """

    base_width: int = Field(32, ge=1, description="Channel width C of the full-resolution branch.")
    him_submodules: int = Field(3, ge=1, description="Number of stacked HIM sub-modules.")
    febs_per_branch: int = Field(1, ge=1, description="FEBs chained on each branch inside one sub-module.")
    feb_layers: int = Field(4, ge=1, description="Densely connected conv layers per FEB.")
    feb_growth: int = Field(16, ge=1, description="Growth rate of each FEB dense layer.")
    fab_reduction: int = Field(8, ge=1, description="Channel reduction ratio inside FAB attention.")
    use_dcn: bool = Field(True, description="Deformable conv in the extractor (plain conv when off).")
    use_hfb: bool = Field(True, description="Hierarchical fusion block in each HIM sub-module.")
    use_hcl: bool = Field(True, description="Add the hierarchical contrastive loss to the objective.")
    global_residual: bool = Field(True, description="Add the resized input image to every head output.")
    rng_seed: int = Field(0, description="Seed for weight initialization.")

    @classmethod
    def variant(cls, name: VariantName, **overrides) -> "ModelConfig":
        """Build one of the ablation presets, optionally overriding other fields."""
        return cls(**{**VARIANT_FLAGS[name], **overrides})


VARIANT_FLAGS: Dict[str, Dict[str, bool]] = {
    "variant1": {"use_dcn": False, "use_hfb": False, "use_hcl": False},
    "variant2": {"use_dcn": True, "use_hfb": False, "use_hcl": False},
    "variant3": {"use_dcn": True, "use_hfb": True, "use_hcl": False},
    "hcd": {"use_dcn": True, "use_hfb": True, "use_hcl": True},
}


PerceptualBackend = Literal["vgg19-pretrained", "random-tiny", "identity"]


class PerceptualConfig(BaseModel):
    """Which frozen encoder embeds images for the contrastive loss."""

    backend: PerceptualBackend = Field(
        "vgg19-pretrained",
        description="vgg19-pretrained (ImageNet VGG-19), random-tiny (fixed random convs) or identity (pixels).",
    )
    weights_path: str = Field(
        "weights/vgg19-dcbb9e9d.pth",
        description="torchvision VGG-19 state dict, required by the vgg19-pretrained backend.",
    )
    seed: int = Field(0, description="Seed of the random-tiny backend.")

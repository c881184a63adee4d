"""
Charbonnier pixel loss, hierarchical contrastive loss (HCL) and their sum.

HCL only ever sees images: any model producing outputs at a few scales can be
trained with it, not just the network in `hcd.network`.
"""

from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import torch
from torch import nn
from torchvision.models.vgg import cfgs, make_layers

from hcd.errors import ConfigurationError, InvalidArgumentError
from hcd.imaging import resize_bilinear
from hcd.state_model import PerceptualBackend, PerceptualConfig
from hcd.state_training import LossBreakdown
from hcd.utils import torch_generator

HCL_DELTA = 1e-7

# ReLU outputs following VGG-19 convs 1, 3, 5, 9 and 13 (indices into `features`).
VGG19_TAPS = (1, 6, 11, 20, 29)
VGG19_COEFFICIENTS = (1 / 32, 1 / 16, 1 / 8, 1 / 4, 1.0)
TINY_TAPS = (1, 3, 5)
TINY_COEFFICIENTS = (1 / 4, 1 / 2, 1.0)
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


class PerceptualEncoder(nn.Module):
    """
    Frozen feature extractor returning the activations at `taps`.

    An empty `features` stack is the identity backend: the image itself is the
    single feature, with coefficient 1.
    """

    def __init__(
        self,
        backend: PerceptualBackend,
        features: nn.Sequential,
        taps: Sequence[int],
        coefficients: Sequence[float],
        normalize: bool = False,
    ):
        super().__init__()
        if len(taps) != len(coefficients):
            raise InvalidArgumentError("one coefficient per tapped layer is required")
        self.backend = backend
        self.features = features[: max(taps) + 1] if taps else features
        self.taps = tuple(taps)
        self.coefficients = tuple(coefficients) if taps else (1.0,)
        self.normalize = normalize
        self.register_buffer("mean", torch.tensor(IMAGENET_MEAN).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor(IMAGENET_STD).view(1, 3, 1, 1))
        for param in self.parameters():
            param.requires_grad_(False)
        self.eval()

    @classmethod
    def identity(cls) -> "PerceptualEncoder":
        return cls("identity", nn.Sequential(), (), ())

    @classmethod
    def random_tiny(cls, seed: int = 0) -> "PerceptualEncoder":
        """Three fixed random conv stages; a cheap stand-in for VGG in tests."""
        features = nn.Sequential(
            nn.Conv2d(3, 8, 3, padding=1),
            nn.ReLU(),
            nn.Conv2d(8, 16, 3, stride=2, padding=1),
            nn.ReLU(),
            nn.Conv2d(16, 32, 3, stride=2, padding=1),
            nn.ReLU(),
        )
        gen = torch_generator(seed)
        with torch.no_grad():
            for module in features:
                if isinstance(module, nn.Conv2d):
                    bound = (6.0 / (module.in_channels * 9 + module.out_channels * 9)) ** 0.5
                    module.weight.copy_(torch.rand(module.weight.shape, generator=gen) * 2 * bound - bound)
                    module.bias.zero_()
        return cls("random-tiny", features, TINY_TAPS, TINY_COEFFICIENTS)

    @classmethod
    def vgg19(cls, weights_path: Optional[str | Path] = None) -> "PerceptualEncoder":
        """
        VGG-19 tapped at five layers with ImageNet input normalization.

        Without `weights_path` the architecture is built with random weights,
        which is only meaningful for shape and gradient tests.

        Raises:
            ConfigurationError: `weights_path` given but missing or unloadable.
        """
        features = make_layers(cfgs["E"])
        if weights_path is not None:
            path = Path(weights_path)
            if not path.is_file():
                raise ConfigurationError(
                    f"VGG-19 weights not found at {path}; set perceptual.weights_path "
                    "or choose perceptual.backend=random-tiny|identity"
                )
            try:
                state = torch.load(path, map_location="cpu", weights_only=True)
                prefix = "features."
                features.load_state_dict({k[len(prefix):]: v for k, v in state.items() if k.startswith(prefix)})
            except (RuntimeError, OSError) as e:
                raise ConfigurationError(f"cannot load VGG-19 weights from {path}: {e}") from e
        return cls("vgg19-pretrained", features, VGG19_TAPS, VGG19_COEFFICIENTS, normalize=True)

    @classmethod
    def from_config(cls, config: PerceptualConfig) -> "PerceptualEncoder":
        if config.backend == "identity":
            return cls.identity()
        if config.backend == "random-tiny":
            return cls.random_tiny(config.seed)
        return cls.vgg19(config.weights_path)

    def forward(self, img: torch.Tensor) -> List[torch.Tensor]:
        batch = img.unsqueeze(0) if img.dim() == 3 else img
        if not self.taps:
            return [batch]
        if batch.shape[1] != 3:
            raise InvalidArgumentError(f"{self.backend} encoder needs 3-channel input, got {batch.shape[1]}")
        if batch.dtype != self.mean.dtype:
            raise InvalidArgumentError(
                f"{self.backend} encoder is {self.mean.dtype}, input is {batch.dtype}; cast one of them"
            )
        x = (batch - self.mean) / self.std if self.normalize else batch
        outputs = []
        for index, layer in enumerate(self.features):
            x = layer(x)
            if index in self.taps:
                outputs.append(x)
        return outputs


def perceptual_embed(img: torch.Tensor, encoder: PerceptualEncoder) -> List[torch.Tensor]:
    """Embed an image (or batch) into the encoder's tapped feature maps."""
    return encoder(img)


def _check_scales(name: str, left: Sequence[torch.Tensor], right: Sequence[torch.Tensor]) -> None:
    if len(left) != len(right) or not left:
        raise InvalidArgumentError(f"{name}: need the same non-zero number of scales, got {len(left)} and {len(right)}")
    for k, (a, b) in enumerate(zip(left, right)):
        if a.shape != b.shape:
            raise InvalidArgumentError(f"{name}: scale {k} shapes differ, {tuple(a.shape)} vs {tuple(b.shape)}")


def charbonnier_loss(
    outputs: Sequence[torch.Tensor], targets: Sequence[torch.Tensor], epsilon: float = 1e-3
) -> torch.Tensor:
    """Per-pixel sqrt(r^2 + eps^2), averaged over pixels of each scale, then over scales."""
    _check_scales("charbonnier_loss", outputs, targets)
    per_scale = [torch.sqrt((a - p) ** 2 + epsilon**2).mean() for a, p in zip(outputs, targets)]
    return torch.stack(per_scale).mean()


def feature_distance(
    x: Sequence[torch.Tensor], y: Sequence[torch.Tensor], coefficients: Sequence[float]
) -> torch.Tensor:
    """Sum over layers of coefficient * mean |x_l - y_l|."""
    return sum(c * (a - b).abs().mean() for c, a, b in zip(coefficients, x, y))


def hcl_loss(
    outputs: Sequence[torch.Tensor],
    positives: Sequence[torch.Tensor],
    negatives: Sequence[torch.Tensor],
    encoder: PerceptualEncoder,
    delta: float = HCL_DELTA,
) -> torch.Tensor:
    """
    Hierarchical contrastive loss.

        sum_i ( sum_j d(A_i, P_j) ) * ( sum_k 1 / max(d(A_i, N_k), delta) )

    All images are first resized to the middle scale (index len // 2) and
    embedded once each. Scales may be given as (C, H, W) or (N, C, H, W);
    distances average over the whole batch.
    """
    n = len(outputs)
    if n == 0 or len(positives) != n or len(negatives) != n:
        raise InvalidArgumentError(
            f"hcl_loss needs equal numbers of outputs/positives/negatives, got {n}/{len(positives)}/{len(negatives)}"
        )
    mid_h, mid_w = outputs[n // 2].shape[-2:]
    images = [resize_bilinear(x, mid_h, mid_w) for x in (*outputs, *positives, *negatives)]
    images = [x.unsqueeze(0) if x.dim() == 3 else x for x in images]
    reference = images[0].shape
    for x in images:
        if x.shape != reference:
            raise InvalidArgumentError(
                f"hcl_loss inputs disagree after resizing: {tuple(x.shape)} vs {tuple(reference)}"
            )

    batch = reference[0]
    features = encoder(torch.cat(images, dim=0))
    embedded = [[layer[i * batch:(i + 1) * batch] for layer in features] for i in range(3 * n)]
    coefficients = encoder.coefficients

    loss = images[0].new_zeros(())
    for i in range(n):
        pull = sum(feature_distance(embedded[i], embedded[n + j], coefficients) for j in range(n))
        push = sum(
            1.0 / torch.clamp(feature_distance(embedded[i], embedded[2 * n + k], coefficients), min=delta)
            for k in range(n)
        )
        loss = loss + pull * push
    return loss


def total_loss(
    outputs: Sequence[torch.Tensor],
    targets: Sequence[torch.Tensor],
    negatives: Sequence[torch.Tensor],
    *,
    lam: float = 0.1,
    epsilon: float = 1e-3,
    use_hcl: bool = True,
    encoder: Optional[PerceptualEncoder] = None,
) -> LossBreakdown:
    """Charbonnier plus lam * HCL; the HCL term is dropped when `use_hcl` is off."""
    char = charbonnier_loss(outputs, targets, epsilon)
    if not use_hcl:
        return LossBreakdown(char, char.new_zeros(()), char, lam, epsilon)
    if encoder is None:
        raise ConfigurationError("use_hcl is on but no perceptual encoder was supplied")
    hcl = hcl_loss(outputs, targets, negatives, encoder)
    total = char + lam * hcl if lam else char
    return LossBreakdown(char, hcl, total, lam, epsilon)


def scales_of(output: torch.Tensor | Tuple[torch.Tensor, ...]) -> Tuple[torch.Tensor, ...]:
    """Normalize a model output to a tuple of scales (single tensors become a 1-tuple)."""
    return (output,) if isinstance(output, torch.Tensor) else tuple(output)

"""
The hierarchical dehazing network.

    image -> HFE (3 strided branches) -> HIM (N x [HFB -> per-branch FEB + skip])
          -> MOIRM (FAB + 3x3 head per branch, coarse-to-fine) -> (A1, A2, A3)

Widths are C, 2C, 4C at scales 1, 1/2, 1/4. Stride-1 convs pad by reflection,
strided convs by zeros.
"""

from typing import List, Tuple

import torch
import torch.nn.functional as F
from torch import nn
from torchvision.ops import deform_conv2d

from hcd.errors import InvalidArgumentError, InvariantViolation
from hcd.imaging import build_target_pyramid, crop_to, pad_to_multiple, resize_bilinear
from hcd.state_data import FeaturePyramid, ImageTensor
from hcd.state_model import ModelConfig

MIN_INPUT_SIDE = 8


def _conv3x3(in_channels: int, out_channels: int) -> nn.Conv2d:
    return nn.Conv2d(in_channels, out_channels, 3, padding=1, padding_mode="reflect")


def _down(in_channels: int) -> nn.Conv2d:
    # 3x3 stride 2, channel doubling
    return nn.Conv2d(in_channels, in_channels * 2, 3, stride=2, padding=1)


def _up(in_channels: int) -> nn.ConvTranspose2d:
    # 4x4 stride 2, channel halving
    return nn.ConvTranspose2d(in_channels, in_channels // 2, 4, stride=2, padding=1)


class DeformableConv2d(nn.Module):
    """
    Deformable 3x3 convolution (offsets only, one offset group).

    Offsets come from a standard conv whose weights start at zero, so a fresh
    layer computes exactly a reflect-padded plain convolution with `weight`.
    """

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int = 3):
        super().__init__()
        self.pad = kernel_size // 2
        self.offset_conv = nn.Conv2d(in_channels, 2 * kernel_size * kernel_size, kernel_size)
        self.weight = nn.Parameter(torch.empty(out_channels, in_channels, kernel_size, kernel_size))
        self.bias = nn.Parameter(torch.zeros(out_channels))
        nn.init.xavier_uniform_(self.weight)
        nn.init.zeros_(self.offset_conv.weight)
        nn.init.zeros_(self.offset_conv.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = F.pad(x, [self.pad] * 4, mode="reflect")
        offset = self.offset_conv(x)
        return deform_conv2d(x, offset, self.weight, self.bias)


class ExtractorBranch(nn.Module):
    """Strided 3x3 stem from the image, ReLU, then a deformable (or plain) 3x3 conv."""

    def __init__(self, width: int, stride: int, use_dcn: bool):
        super().__init__()
        self.stem = nn.Conv2d(
            3, width, 3, stride=stride, padding=1,
            padding_mode="reflect" if stride == 1 else "zeros",
        )
        self.refine = DeformableConv2d(width, width) if use_dcn else _conv3x3(width, width)

    def forward(self, img: torch.Tensor) -> torch.Tensor:
        return self.refine(F.relu(self.stem(img)))


class HierarchicalFeatureExtractor(nn.Module):
    """Three parallel branches at strides 1, 2, 4 producing widths C, 2C, 4C."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.branches = nn.ModuleList(
            ExtractorBranch(config.base_width * 2**k, 2**k, config.use_dcn) for k in range(3)
        )

    def forward(self, img: torch.Tensor) -> FeaturePyramid:
        return FeaturePyramid(*(branch(img) for branch in self.branches))


def check_pyramid(pyramid: FeaturePyramid) -> None:
    """Raise InvariantViolation unless depths double and sides halve level to level."""
    f1, f2, f3 = pyramid
    for fine, coarse in ((f1, f2), (f2, f3)):
        n, c, h, w = fine.shape
        expected = (n, 2 * c, (h + 1) // 2, (w + 1) // 2)
        if tuple(coarse.shape) != expected:
            raise InvariantViolation(
                f"pyramid levels {tuple(fine.shape)} -> {tuple(coarse.shape)}; expected {expected}"
            )


class HierarchicalFusionBlock(nn.Module):
    """Bottom-up then top-down residual-difference fusion across the three scales."""

    def __init__(self, width: int):
        super().__init__()
        # bottom-up
        self.conv_f2 = _down(2 * width)
        self.tconv_f21 = _up(4 * width)
        self.conv_f1 = _down(width)
        self.tconv_f11 = _up(2 * width)
        # top-down
        self.tconv_f22 = _up(2 * width)
        self.conv_f23 = _down(width)
        self.tconv_f3 = _up(4 * width)
        self.conv_f31 = _down(2 * width)

    def forward(self, pyramid: FeaturePyramid) -> FeaturePyramid:
        check_pyramid(pyramid)
        f1, f2, f3 = pyramid

        f21 = f3 - self.conv_f2(F.relu(f2))
        f22 = self.tconv_f21(F.relu(f21)) + f2
        f11 = f22 - self.conv_f1(F.relu(f1))
        f1_out = self.tconv_f11(F.relu(f11)) + f1

        f23 = f1_out - self.tconv_f22(F.relu(f22))
        f2_out = self.conv_f23(F.relu(f23)) + f22
        f31 = f2_out - self.tconv_f3(F.relu(f3))
        f3_out = self.conv_f31(F.relu(f31)) + f3
        return FeaturePyramid(f1_out, f2_out, f3_out)


class FeatureEnhancementBlock(nn.Module):
    """Residual dense block: densely connected conv+ReLU layers, 1x1 fusion, identity skip."""

    def __init__(self, channels: int, num_layers: int = 4, growth: int = 16):
        super().__init__()
        self.dense = nn.ModuleList(
            _conv3x3(channels + i * growth, growth) for i in range(num_layers)
        )
        self.fuse = nn.Conv2d(channels + num_layers * growth, channels, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        features = x
        for conv in self.dense:
            features = torch.cat([features, F.relu(conv(features))], dim=1)
        return self.fuse(features) + x


class FeatureAttentionBlock(nn.Module):
    """Channel attention followed by pixel attention, both sigmoid-gated."""

    def __init__(self, channels: int, reduction: int = 8):
        super().__init__()
        hidden = max(1, channels // reduction)
        self.channel_attention = nn.Sequential(
            nn.AdaptiveAvgPool2d(1),
            nn.Conv2d(channels, hidden, 1),
            nn.ReLU(inplace=True),
            nn.Conv2d(hidden, channels, 1),
            nn.Sigmoid(),
        )
        self.pixel_attention = nn.Sequential(
            nn.Conv2d(channels, hidden, 1),
            nn.ReLU(inplace=True),
            nn.Conv2d(hidden, 1, 1),
            nn.Sigmoid(),
        )

    def gates(self, x: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        """Return the (channel, pixel) gate activations applied by `forward`."""
        channel_gate = self.channel_attention(x)
        return channel_gate, self.pixel_attention(x * channel_gate)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x * self.channel_attention(x)
        return x * self.pixel_attention(x)


class InteractionSubmodule(nn.Module):
    """One HIM stage: optional HFB, then per-branch FEBs, plus a skip around the stage."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        width = config.base_width
        self.hfb = HierarchicalFusionBlock(width) if config.use_hfb else None
        self.febs = nn.ModuleList(
            nn.Sequential(*(
                FeatureEnhancementBlock(width * 2**k, config.feb_layers, config.feb_growth)
                for _ in range(config.febs_per_branch)
            ))
            for k in range(3)
        )

    def forward(self, pyramid: FeaturePyramid) -> FeaturePyramid:
        fused = self.hfb(pyramid) if self.hfb is not None else pyramid
        return FeaturePyramid(*(
            feb(level) + skip for feb, level, skip in zip(self.febs, fused, pyramid)
        ))


class ReconstructionModule(nn.Module):
    """
    Coarse-to-fine heads: A3 from the coarsest branch, then each finer branch
    attends over [upsampled coarser FAB output, its own HIM output].
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        c = config.base_width
        r = config.fab_reduction
        self.fab3 = FeatureAttentionBlock(4 * c, r)
        self.fab2 = FeatureAttentionBlock(6 * c, r)
        self.fab1 = FeatureAttentionBlock(7 * c, r)
        self.head3 = _conv3x3(4 * c, 3)
        self.head2 = _conv3x3(6 * c, 3)
        self.head1 = _conv3x3(7 * c, 3)

    def forward(self, pyramid: FeaturePyramid) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        h1, h2, h3 = pyramid
        fab3_out = self.fab3(h3)
        up3 = resize_bilinear(fab3_out, h2.shape[-2], h2.shape[-1])
        fab2_out = self.fab2(torch.cat([up3, h2], dim=1))
        up2 = resize_bilinear(fab2_out, h1.shape[-2], h1.shape[-1])
        fab1_out = self.fab1(torch.cat([up2, h1], dim=1))
        return self.head1(fab1_out), self.head2(fab2_out), self.head3(fab3_out)


class HierarchicalDehazingNetwork(nn.Module):
    """The full network; `forward` returns (A1, A2, A3), A1 being the dehazed image."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.hfe = HierarchicalFeatureExtractor(config)
        self.him = nn.ModuleList(InteractionSubmodule(config) for _ in range(config.him_submodules))
        self.moirm = ReconstructionModule(config)

    def forward(self, img: ImageTensor) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        batch, squeezed = _check_input(img)
        pyramid = self.hfe(batch)
        for stage in self.him:
            pyramid = stage(pyramid)
        outputs = self.moirm(pyramid)
        if self.config.global_residual:
            outputs = tuple(out + ref for out, ref in zip(outputs, build_target_pyramid(batch)))
        if squeezed:
            outputs = tuple(out.squeeze(0) for out in outputs)
        return outputs


def _check_input(img: torch.Tensor) -> Tuple[torch.Tensor, bool]:
    squeezed = img.dim() == 3
    batch = img.unsqueeze(0) if squeezed else img
    if batch.dim() != 4 or batch.shape[1] != 3:
        raise InvalidArgumentError(f"expected a 3-channel image, got shape {tuple(img.shape)}")
    h, w = batch.shape[-2:]
    if h % 4 or w % 4:
        raise InvalidArgumentError(f"image size {h}x{w} is not divisible by 4")
    if h < MIN_INPUT_SIDE or w < MIN_INPUT_SIDE:
        raise InvalidArgumentError(f"image size {h}x{w} is below the {MIN_INPUT_SIDE}x{MIN_INPUT_SIDE} minimum")
    return batch, squeezed


def init_weights(config: ModelConfig) -> HierarchicalDehazingNetwork:
    """
    Build the network with Xavier-uniform conv/transposed-conv weights,
    zero biases and zero deformable-offset predictors.

    Deterministic in `config.rng_seed`; the global torch RNG is left untouched.
    """
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.rng_seed)
        model = HierarchicalDehazingNetwork(config)
        for module in model.modules():
            if isinstance(module, (nn.Conv2d, nn.ConvTranspose2d, DeformableConv2d)):
                nn.init.xavier_uniform_(module.weight)
                if module.bias is not None:
                    nn.init.zeros_(module.bias)
        for module in model.modules():
            if isinstance(module, DeformableConv2d):
                nn.init.zeros_(module.offset_conv.weight)
                nn.init.zeros_(module.offset_conv.bias)
    return model


def param_count(model: nn.Module) -> int:
    """Total number of scalar parameters."""
    return sum(p.numel() for p in model.parameters())


def parameter_table(model: nn.Module) -> List[Tuple[str, int]]:
    """Parameter counts per second-level component, e.g. `hfe.branches`, `him.0`, `moirm.fab1`."""
    rows = []
    for name, child in model.named_children():
        grandchildren = list(child.named_children())
        if not grandchildren:
            rows.append((name, param_count(child)))
        for sub_name, sub in grandchildren:
            if isinstance(sub, nn.ModuleList):
                rows.extend((f"{name}.{sub_name}.{i}", param_count(m)) for i, m in enumerate(sub))
            else:
                rows.append((f"{name}.{sub_name}", param_count(sub)))
    return rows


@torch.no_grad()
def dehaze_image(model: HierarchicalDehazingNetwork, img: ImageTensor) -> Tuple[torch.Tensor, ...]:
    """
    Dehaze one (3, H, W) image of any size >= 8x8.

    The input is reflect-padded to a multiple of 4 and every output scale is
    cropped back to ceil(H / 2^k) x ceil(W / 2^k).
    """
    was_training = model.training
    model.eval()
    try:
        padded, (h, w) = pad_to_multiple(img)
        outputs = model(padded)
    finally:
        model.train(was_training)
    return tuple(
        crop_to(out, (-(-h // 2**k), -(-w // 2**k))) for k, out in enumerate(outputs)
    )

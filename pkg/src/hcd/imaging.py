"""
Core image plumbing: resizing, raster IO, per-scale targets, paired datasets.

Images are float tensors shaped (C, H, W) with values nominally in [0, 1]; the
tensor operations here also accept batches shaped (N, C, H, W). No mean/std
normalization is applied anywhere in this module.
"""

import logging
from pathlib import Path
from typing import List, NamedTuple, Tuple

import cv2
import numpy as np
import torch
import torch.nn.functional as F

from hcd.errors import ImageFormatError, ImageIOError, InvalidArgumentError
from hcd.state_data import ImageTensor

logger = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")
PYRAMID_FACTOR = 4


def _as_batch(img: torch.Tensor) -> Tuple[torch.Tensor, bool]:
    if img.dim() == 3:
        return img.unsqueeze(0), True
    if img.dim() == 4:
        return img, False
    raise InvalidArgumentError(f"expected (C, H, W) or (N, C, H, W), got shape {tuple(img.shape)}")


def resize_bilinear(img: ImageTensor, target_h: int, target_w: int) -> ImageTensor:
    """
    Resize with bilinear weights, align-corners off, edges replicated.

    Output values are convex combinations of input values, so the input's
    min/max bounds are preserved. Same-size requests return the input unchanged.
    """
    if target_h < 1 or target_w < 1:
        raise InvalidArgumentError(f"target size must be positive, got {target_h}x{target_w}")
    batch, squeezed = _as_batch(img)
    if batch.shape[-2:] == (target_h, target_w):
        return img
    out = F.interpolate(batch, size=(target_h, target_w), mode="bilinear", align_corners=False)
    return out.squeeze(0) if squeezed else out


def build_target_pyramid(img: ImageTensor) -> Tuple[ImageTensor, ImageTensor, ImageTensor]:
    """
    Return (P1, P2, P3) at scales 1, 1/2, 1/4 by area averaging.

    P1 is the input itself; every level keeps the global mean.
    """
    batch, squeezed = _as_batch(img)
    h, w = batch.shape[-2:]
    if h % PYRAMID_FACTOR or w % PYRAMID_FACTOR:
        raise InvalidArgumentError(f"image size {h}x{w} is not divisible by {PYRAMID_FACTOR}")
    half = F.avg_pool2d(batch, kernel_size=2)
    quarter = F.avg_pool2d(batch, kernel_size=4)
    if squeezed:
        return img, half.squeeze(0), quarter.squeeze(0)
    return img, half, quarter


def pad_to_multiple(img: ImageTensor, multiple: int = PYRAMID_FACTOR) -> Tuple[ImageTensor, Tuple[int, int]]:
    """Reflect-pad bottom/right so H and W divide `multiple`; also return the original size."""
    batch, squeezed = _as_batch(img)
    h, w = batch.shape[-2:]
    pad_h = (-h) % multiple
    pad_w = (-w) % multiple
    if pad_h or pad_w:
        batch = F.pad(batch, (0, pad_w, 0, pad_h), mode="reflect")
    return (batch.squeeze(0) if squeezed else batch), (h, w)


def crop_to(img: ImageTensor, size: Tuple[int, int]) -> ImageTensor:
    """Undo `pad_to_multiple`."""
    h, w = size
    return img[..., :h, :w]


def load_image(path: str | Path, dtype: torch.dtype = torch.float32) -> ImageTensor:
    """
    Read a raster file into a (C, H, W) tensor in [0, 1].

    Integer codes are divided by the type maximum (255 or 65535). Alpha
    channels are dropped.

    Raises:
        ImageIOError: missing, unreadable or corrupt file.
        ImageFormatError: unsupported sample type or channel count.
    """
    path = Path(path)
    if not path.is_file():
        raise ImageIOError(str(path), "no such file")
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise ImageIOError(str(path), "unreadable or corrupt image")

    if raw.dtype == np.uint8:
        data = raw.astype(np.float64) / 255.0
    elif raw.dtype == np.uint16:
        data = raw.astype(np.float64) / 65535.0
    elif raw.dtype in (np.float32, np.float64):
        data = raw.astype(np.float64)
    else:
        raise ImageFormatError(f"{path}: unsupported sample type {raw.dtype}")

    if data.ndim == 2:
        data = data[:, :, None]
    channels = data.shape[2]
    if channels == 3:
        data = data[:, :, ::-1]
    elif channels == 4:
        logger.warning("%s: dropping alpha channel", path)
        data = data[:, :, 2::-1]
    elif channels != 1:
        raise ImageFormatError(f"{path}: unsupported channel count {channels}")

    tensor = torch.from_numpy(np.ascontiguousarray(data.transpose(2, 0, 1)))
    return tensor.to(dtype)


def save_image(img: ImageTensor, path: str | Path, bit_depth: int = 8) -> Path:
    """
    Write a (C, H, W) tensor as an 8- or 16-bit raster file.

    Values are clamped to [0, 1] and quantized with round-half-up. 16-bit
    output needs a PNG or TIFF suffix.
    """
    path = Path(path)
    if bit_depth not in (8, 16):
        raise InvalidArgumentError(f"bit_depth must be 8 or 16, got {bit_depth}")
    if bit_depth == 16 and path.suffix.lower() not in (".png", ".tif", ".tiff"):
        raise ImageFormatError(f"{path}: 16-bit output needs .png or .tif")
    if img.dim() != 3 or img.shape[0] not in (1, 3):
        raise ImageFormatError(f"{path}: expected (1|3, H, W), got shape {tuple(img.shape)}")

    top = 255 if bit_depth == 8 else 65535
    data = img.detach().to("cpu", torch.float64).clamp(0.0, 1.0).numpy()
    codes = np.floor(data * top + 0.5).astype(np.uint8 if bit_depth == 8 else np.uint16)
    codes = codes.transpose(1, 2, 0)
    if codes.shape[2] == 3:
        codes = codes[:, :, ::-1]
    path.parent.mkdir(parents=True, exist_ok=True)
    if not cv2.imwrite(str(path), np.ascontiguousarray(codes)):
        raise ImageIOError(str(path), "could not encode or write image")
    return path


class PairPaths(NamedTuple):
    name: str
    hazy: Path
    clear: Path


def _index_images(folder: Path) -> dict[str, Path]:
    if not folder.is_dir():
        return {}
    return {
        p.stem: p
        for p in sorted(folder.iterdir())
        if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES
    }


def list_pairs(root: str | Path) -> Tuple[List[PairPaths], List[str]]:
    """
    Pair `<root>/hazy/<name>.*` with `<root>/clear/<name>.*` by basename.

    Returns:
        The pairs sorted by name, and the sorted names present on one side only.
    """
    root = Path(root)
    hazy = _index_images(root / "hazy")
    clear = _index_images(root / "clear")
    names = sorted(hazy.keys() & clear.keys())
    skipped = sorted(hazy.keys() ^ clear.keys())
    if skipped:
        logger.warning("%s: %d unpaired file(s) skipped", root, len(skipped))
    return [PairPaths(n, hazy[n], clear[n]) for n in names], skipped

"""
Synthetic haze through the atmosphere scattering model.

    I(x) = J(x) * t(x) + A * (1 - t(x)),    t(x) = exp(-beta * d(x))

with a global scalar atmosphere light A. Depth maps are synthetic so the
pipeline needs no external data.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import cv2
import numpy as np
import torch

from hcd.errors import ConfigurationError, InvalidArgumentError
from hcd.imaging import IMAGE_SUFFIXES, load_image, save_image
from hcd.state_data import DEPTH_MODES, HazeManifestRecord, ImageTensor
from hcd.utils import rng_for

logger = logging.getLogger(__name__)

T_MIN = 1e-3
MANIFEST_NAME = "manifest.jsonl"


def _check_atmosphere(A: float) -> None:
    if not 0.0 < A <= 1.0:
        raise InvalidArgumentError(f"atmosphere light must lie in (0, 1], got {A}")


def _check_broadcast(img: torch.Tensor, t: torch.Tensor) -> None:
    try:
        shape = torch.broadcast_shapes(img.shape, t.shape)
    except RuntimeError as e:
        raise InvalidArgumentError(
            f"transmission {tuple(t.shape)} does not broadcast over image {tuple(img.shape)}"
        ) from e
    if shape != img.shape:
        raise InvalidArgumentError(
            f"transmission {tuple(t.shape)} would enlarge image {tuple(img.shape)}"
        )


def transmission_from_depth(depth: ImageTensor, beta: float) -> ImageTensor:
    """Return t = exp(-beta * depth)."""
    if beta < 0:
        raise InvalidArgumentError(f"beta must be >= 0, got {beta}")
    if not torch.isfinite(depth).all():
        raise InvalidArgumentError("depth contains NaN or Inf")
    if (depth < 0).any():
        raise InvalidArgumentError("depth must be non-negative")
    return torch.exp(-beta * depth)


def compose_haze(clear: ImageTensor, t: ImageTensor, A: float) -> ImageTensor:
    """Apply the scattering model forward. No clamping; that happens at save time."""
    _check_atmosphere(A)
    _check_broadcast(clear, t)
    return clear * t + A * (1.0 - t)


def invert_asm(hazy: ImageTensor, t: ImageTensor, A: float, t_min: float = T_MIN) -> ImageTensor:
    """Recover J = (I - A) / max(t, t_min) + A."""
    _check_broadcast(hazy, t)
    return (hazy - A) / t.clamp(min=t_min) + A


def _normalize(values: np.ndarray) -> np.ndarray:
    span = values.max() - values.min()
    if span <= 0:
        return np.zeros_like(values)
    return (values - values.min()) / span


def make_depth(mode: str, height: int, width: int, rng: np.random.Generator) -> ImageTensor:
    """
    Render a (1, H, W) depth map in [0, 1].

    linear-ramp: a plane tilted in a random direction.
    radial: distance from a random near point.
    perlin: multi-octave smooth noise (cubic-upsampled random grids).
    """
    ys, xs = np.meshgrid(
        np.linspace(0.0, 1.0, height), np.linspace(0.0, 1.0, width), indexing="ij"
    )
    if mode == "linear-ramp":
        angle = rng.uniform(0.0, 2.0 * np.pi)
        depth = _normalize(np.cos(angle) * xs + np.sin(angle) * ys)
    elif mode == "radial":
        cy, cx = rng.uniform(0.0, 1.0, size=2)
        depth = _normalize(np.hypot(ys - cy, xs - cx))
    elif mode == "perlin":
        noise = np.zeros((height, width), dtype=np.float64)
        for scale in (4, 8, 16, 32):
            grid = rng.standard_normal((max(2, height // scale), max(2, width // scale)))
            noise += cv2.resize(grid, (width, height), interpolation=cv2.INTER_CUBIC) * scale
        depth = _normalize(noise)
    else:
        raise InvalidArgumentError(f"unknown depth mode {mode!r}; expected one of {DEPTH_MODES}")
    return torch.from_numpy(np.ascontiguousarray(depth))[None]


def render_clear_scene(size: int, rng: np.random.Generator) -> ImageTensor:
    """Draw a smooth RGB scene: a two-color gradient, soft blobs and a striped texture."""
    ys, xs = np.meshgrid(np.linspace(0.0, 1.0, size), np.linspace(0.0, 1.0, size), indexing="ij")
    top, bottom = rng.uniform(0.05, 0.95, size=(2, 3))
    scene = top[:, None, None] * (1.0 - ys) + bottom[:, None, None] * ys

    for _ in range(int(rng.integers(2, 6))):
        cy, cx = rng.uniform(0.0, 1.0, size=2)
        radius = rng.uniform(0.05, 0.3)
        color = rng.uniform(0.0, 1.0, size=3)
        weight = np.exp(-((ys - cy) ** 2 + (xs - cx) ** 2) / (2.0 * radius**2))
        scene = scene * (1.0 - weight) + color[:, None, None] * weight

    freq = rng.uniform(4.0, 16.0)
    angle = rng.uniform(0.0, np.pi)
    stripes = 0.5 + 0.5 * np.sin(2.0 * np.pi * freq * (np.cos(angle) * xs + np.sin(angle) * ys))
    scene = np.clip(scene * (0.85 + 0.15 * stripes), 0.0, 1.0)
    return torch.from_numpy(np.ascontiguousarray(scene))


def generate_clear_scenes(out_dir: str | Path, count: int, size: int, seed: int) -> List[Path]:
    """Write `count` procedural clear scenes as 8-bit PNGs; scene i depends only on (seed, i)."""
    out = Path(out_dir)
    paths = []
    for index in range(count):
        scene = render_clear_scene(size, rng_for(seed, index))
        paths.append(save_image(scene, out / f"scene_{index:04d}.png"))
    return paths


def _list_sources(clear_dir: Path) -> List[Path]:
    if not clear_dir.is_dir():
        raise ConfigurationError(f"clear image directory {clear_dir} does not exist")
    sources = sorted(
        p for p in clear_dir.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES
    )
    if not sources:
        raise ConfigurationError(f"clear image directory {clear_dir} holds no images")
    return sources


def _synthesize_pair(
    index: int,
    sources: Sequence[Path],
    out: Path,
    seed: int,
    beta_range: Tuple[float, float],
    A_range: Tuple[float, float],
    depth_mode: str,
) -> HazeManifestRecord:
    rng = rng_for(seed, index)
    mode = str(rng.choice(DEPTH_MODES)) if depth_mode == "random" else depth_mode
    beta = float(rng.uniform(*beta_range))
    A = float(rng.uniform(*A_range))

    source = sources[index % len(sources)]
    clear = load_image(source, dtype=torch.float64)
    if clear.shape[0] == 1:
        clear = clear.expand(3, -1, -1).contiguous()
    depth = make_depth(mode, clear.shape[1], clear.shape[2], rng)
    hazy = compose_haze(clear, transmission_from_depth(depth, beta), A)

    name = f"{source.stem}_{index:05d}"
    save_image(hazy, out / "hazy" / f"{name}.png")
    save_image(clear, out / "clear" / f"{name}.png")
    return HazeManifestRecord(
        name=name, beta=beta, A=A, depth_mode=mode, seed=seed, index=index, source=source.name
    )


def synth_dataset(
    clear_dir: str | Path,
    out_dir: str | Path,
    n: int,
    seed: int,
    beta_range: Tuple[float, float],
    A_range: Tuple[float, float],
    depth_mode: str = "random",
    workers: int = 0,
) -> List[HazeManifestRecord]:
    """
    Write `n` (hazy, clear) pairs into `<out_dir>/hazy` and `<out_dir>/clear`.

    Pair i cycles through the sorted clear sources and draws beta, A and the
    depth map from a generator keyed on (seed, i), so the output does not
    depend on `workers`. The manifest (JSON lines) is written to
    `<out_dir>/manifest.jsonl`. With n = 0 nothing is written.

    Raises:
        ConfigurationError: missing or empty clear_dir.
        InvalidArgumentError: ranges outside their domains or an unknown depth mode.
    """
    if n < 0:
        raise InvalidArgumentError(f"n must be >= 0, got {n}")
    if beta_range[0] < 0 or beta_range[1] < beta_range[0]:
        raise InvalidArgumentError(f"invalid beta_range {beta_range}")
    if not 0 < A_range[0] <= A_range[1] <= 1:
        raise InvalidArgumentError(f"invalid atmosphere range {A_range}")
    if depth_mode != "random" and depth_mode not in DEPTH_MODES:
        raise InvalidArgumentError(f"unknown depth mode {depth_mode!r}")
    if n == 0:
        return []

    sources = _list_sources(Path(clear_dir))
    out = Path(out_dir)

    def job(index: int) -> HazeManifestRecord:
        return _synthesize_pair(index, sources, out, seed, beta_range, A_range, depth_mode)

    if workers > 0:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(job, range(n)))
    else:
        records = [job(i) for i in range(n)]

    write_manifest(records, out / MANIFEST_NAME)
    logger.info("Synthesized %d pairs from %d source image(s) into %s", n, len(sources), out)
    return records


def write_manifest(records: Sequence[HazeManifestRecord], path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for record in records:
            fh.write(record.model_dump_json() + "\n")


def read_manifest(path: str | Path) -> List[HazeManifestRecord]:
    """Parse a manifest written by `synth_dataset`."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return [HazeManifestRecord.model_validate_json(line) for line in lines if line.strip()]


def synth_from_config(
    out_dir: str | Path,
    clear_dir: Optional[str],
    count: int,
    seed: int,
    beta_range: Tuple[float, float],
    atmosphere_range: Tuple[float, float],
    depth_mode: str,
    scene_count: int,
    scene_size: int,
    workers: int = 0,
) -> List[HazeManifestRecord]:
    """Run `synth_dataset`, rendering procedural sources into `<out_dir>/sources` when no clear_dir is given."""
    if clear_dir is None and count > 0:
        clear_dir = str(Path(out_dir) / "sources")
        generate_clear_scenes(clear_dir, scene_count, scene_size, seed)
        logger.info("Rendered %d procedural clear scene(s) of %dpx", scene_count, scene_size)
    return synth_dataset(
        clear_dir or "", out_dir, count, seed, beta_range, atmosphere_range, depth_mode, workers
    )

"""
Optimization loop: augmentation, cosine-annealed Adam, validation, checkpoints.

Every batch slot draws its pair, crop and rotation from a generator keyed on
(seed, step, slot). Batches therefore depend on nothing but the step number,
which is what makes resuming from a checkpoint equivalent to never stopping.
"""

import functools
import logging
import math
import shutil
import time
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import torch
from torch.utils.data import DataLoader, Dataset, Sampler

from hcd.checkpoint import load_checkpoint, new_train_state, save_checkpoint
from hcd.config import HcdSettings, write_effective_config
from hcd.errors import ConfigurationError, InvalidArgumentError, NonFiniteLossError
from hcd.evaluation import psnr
from hcd.imaging import PairPaths, build_target_pyramid, list_pairs, load_image
from hcd.losses import PerceptualEncoder, total_loss
from hcd.network import dehaze_image
from hcd.state_data import HazePairRecord
from hcd.state_training import METRIC_COLUMNS, MetricRow, TrainConfig, TrainState
from hcd.utils import configure_determinism, rng_for

logger = logging.getLogger(__name__)

CHECKPOINT_DIR = "checkpoints"
LATEST_NAME = "latest.ckpt"
METRICS_NAME = "metrics.csv"


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Cosine-annealed learning rate from lr_init at step 0 to lr_final at total_steps."""
    if not 0 <= step <= cfg.total_steps:
        raise InvalidArgumentError(f"step {step} outside [0, {cfg.total_steps}]")
    if cfg.total_steps == 0:
        return cfg.lr_init
    cosine = math.cos(math.pi * step / cfg.total_steps)
    return cfg.lr_final + 0.5 * (cfg.lr_init - cfg.lr_final) * (1.0 + cosine)


def _reflect_pad_to(img: torch.Tensor, crop: int) -> torch.Tensor:
    _, h, w = img.shape
    pad_h, pad_w = max(0, crop - h), max(0, crop - w)
    if not (pad_h or pad_w):
        return img
    padded = np.pad(img.numpy(), ((0, 0), (0, pad_h), (0, pad_w)), mode="reflect")
    return torch.from_numpy(np.ascontiguousarray(padded))


def augment_pair(pair: HazePairRecord, rng: np.random.Generator, crop: int = 240) -> HazePairRecord:
    """
    Crop both images at the same random offset, then rotate both by the same
    random multiple of 90 degrees (0 included).

    Images smaller than `crop` are reflect-padded on the bottom/right first.
    The draws are recorded in `meta` as `crop_offset` and `rot90`.
    """
    hazy = _reflect_pad_to(pair.hazy, crop)
    clear = _reflect_pad_to(pair.clear, crop)
    _, h, w = hazy.shape
    top = int(rng.integers(0, h - crop + 1))
    left = int(rng.integers(0, w - crop + 1))
    turns = int(rng.integers(0, 4))

    def apply(img: torch.Tensor) -> torch.Tensor:
        patch = img[:, top : top + crop, left : left + crop]
        return torch.rot90(patch, turns, dims=(1, 2)).contiguous()

    meta = {**pair.meta, "crop_offset": (top, left), "rot90": turns}
    return HazePairRecord(hazy=apply(hazy), clear=apply(clear), meta=meta)


class KeyedPairDataset(Dataset):
    """
    Training pairs addressed by (step, slot) keys instead of indices.

    Each key picks a pair uniformly (with replacement) and augments it, all
    from the generator `rng_for(seed, step, slot)`. At most `cache_size`
    decoded pairs stay in memory (least recently used are dropped first).
    """

    def __init__(self, pairs: Sequence[PairPaths], seed: int, crop: int, cache_size: int = 256):
        self.pairs = list(pairs)
        self.seed = seed
        self.crop = crop
        self.cache_size = cache_size
        self._bind_cache()

    def _bind_cache(self) -> None:
        self.load = functools.lru_cache(maxsize=self.cache_size)(self._read)

    # lru_cache wrappers do not pickle; worker processes build their own.
    def __getstate__(self) -> Dict[str, Any]:
        state = self.__dict__.copy()
        del state["load"]
        return state

    def __setstate__(self, state: Dict[str, Any]) -> None:
        self.__dict__.update(state)
        self._bind_cache()

    def __len__(self) -> int:
        return len(self.pairs)

    def _read(self, index: int) -> HazePairRecord:
        paths = self.pairs[index]
        return HazePairRecord(
            hazy=load_image(paths.hazy), clear=load_image(paths.clear), meta={"name": paths.name}
        )


    def __getitem__(self, key: Tuple[int, int]) -> Tuple[torch.Tensor, torch.Tensor, int]:
        step, slot = key
        rng = rng_for(self.seed, step, slot)
        index = int(rng.integers(0, len(self.pairs)))
        pair = augment_pair(self.load(index), rng, self.crop)
        return pair.hazy, pair.clear, index


class KeyedBatchSampler(Sampler):
    """Yield `[(step, 0), ..., (step, batch - 1)]` for every step in [start, stop)."""

    def __init__(self, start: int, stop: int, batch: int):
        self.start, self.stop, self.batch = start, stop, batch

    def __iter__(self) -> Iterator[List[Tuple[int, int]]]:
        for step in range(self.start, self.stop):
            yield [(step, slot) for slot in range(self.batch)]

    def __len__(self) -> int:
        return max(0, self.stop - self.start)


def _non_finite_samples(
    tensors: Sequence[torch.Tensor], indices: torch.Tensor
) -> List[int]:
    bad = torch.zeros(len(indices), dtype=torch.bool)
    for tensor in tensors:
        bad |= ~torch.isfinite(tensor.detach().cpu()).flatten(1).all(dim=1)
    return [int(i) for i, flag in zip(indices.tolist(), bad.tolist()) if flag]


def train_step(
    state: TrainState,
    batch: Tuple[torch.Tensor, torch.Tensor, torch.Tensor],
    cfg: TrainConfig,
    *,
    use_hcl: bool,
    encoder: Optional[PerceptualEncoder] = None,
) -> MetricRow:
    """
    Run one optimization step in place and return its metrics row.

    Raises:
        NonFiniteLossError: the loss or any updated weight is NaN/Inf. The
            message lists the dataset indices of the samples involved.
    """
    model, optimizer = state["model"], state["optimizer"]
    step = state["step"]
    hazy, clear, indices = batch
    device = next(model.parameters()).device
    hazy, clear = hazy.to(device), clear.to(device)

    lr = lr_at(step, cfg)
    for group in optimizer.param_groups:
        group["lr"] = lr

    started = time.perf_counter()
    model.train()
    optimizer.zero_grad(set_to_none=True)
    outputs = model(hazy)
    losses = total_loss(
        outputs,
        build_target_pyramid(clear),
        build_target_pyramid(hazy),
        lam=cfg.lambda_,
        epsilon=cfg.epsilon,
        use_hcl=use_hcl,
        encoder=encoder,
    )
    if not torch.isfinite(losses.total):
        culprits = _non_finite_samples([hazy, clear, *outputs], indices) or indices.tolist()
        raise NonFiniteLossError(step, culprits, f"loss = {losses.total.item()}")

    losses.total.backward()
    if cfg.grad_clip is not None:
        torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
    optimizer.step()

    for name, param in model.named_parameters():
        if not torch.isfinite(param).all():
            raise NonFiniteLossError(step, indices.tolist(), f"weight {name} became non-finite")

    state["step"] = step + 1
    row = MetricRow(
        step=step + 1,
        lr=lr,
        char=losses.char.item(),
        hcl=losses.hcl.item(),
        total=losses.total.item(),
        wall_ms=(time.perf_counter() - started) * 1000.0,
    )
    state["history"].append(row)
    return row


def load_pairs(pairs: Sequence[PairPaths]) -> List[HazePairRecord]:
    return [
        HazePairRecord(hazy=load_image(p.hazy), clear=load_image(p.clear), meta={"name": p.name})
        for p in pairs
    ]


def validate(model: torch.nn.Module, pairs: Sequence[HazePairRecord]) -> Optional[float]:
    """Mean RGB PSNR of the full-resolution output over `pairs`, or None without pairs."""
    if not pairs:
        return None
    device = next(model.parameters()).device
    scores = []
    for pair in pairs:
        restored = dehaze_image(model, pair.hazy.to(device))[0].cpu()
        scores.append(psnr(restored, pair.clear))
    return float(np.mean(scores))


def write_metrics(history: Sequence[MetricRow], path: Path) -> Path:
    frame = pd.DataFrame([row.model_dump() for row in history], columns=METRIC_COLUMNS)
    frame.to_csv(path, index=False)
    return path


def _split_pairs(cfg: TrainConfig, dataset_dir: Path) -> Tuple[List[PairPaths], List[PairPaths]]:
    pairs, _ = list_pairs(dataset_dir)
    if not pairs:
        raise ConfigurationError(f"{dataset_dir}: no hazy/clear pairs to train on")
    if cfg.val_dir is not None:
        val_pairs, _ = list_pairs(cfg.val_dir)
        return pairs, val_pairs
    if cfg.val_count >= len(pairs):
        raise ConfigurationError(
            f"val_count={cfg.val_count} leaves no training pairs out of {len(pairs)}"
        )
    cut = len(pairs) - cfg.val_count
    return pairs[:cut], pairs[cut:]


def _checkpoint(state: TrainState, cfg: TrainConfig, ckpt_dir: Path) -> Path:
    state["torch_rng"] = torch.get_rng_state()
    path = save_checkpoint(state, ckpt_dir / f"step_{state['step']:06d}.ckpt", cfg)
    shutil.copyfile(path, ckpt_dir / LATEST_NAME)
    logger.info("Checkpoint saved at step %d: %s", state["step"], path.name)
    return path


def run_training(
    settings: HcdSettings,
    out_dir: str | Path,
    dataset_dir: Optional[str | Path] = None,
    *,
    stop_at: Optional[int] = None,
    encoder: Optional[PerceptualEncoder] = None,
) -> Path:
    """
    Train for `settings.train.total_steps` steps, resuming from
    `<out_dir>/checkpoints/latest.ckpt` when it exists.

    Writes `step_NNNNNN.ckpt` every `checkpoint_every` steps and at the end,
    `metrics.csv` (one row per step plus one per validation) and
    `effective_config.json`. `stop_at` ends the run early after checkpointing
    that step, as an interruption would.

    Returns:
        Path of the last checkpoint written.

    Raises:
        ConfigurationError: no dataset, or the checkpoint's model config
            differs from `settings.model`.
        CheckpointError: the checkpoint to resume from is unreadable.
        NonFiniteLossError: training diverged.
    """
    cfg = settings.train
    out = Path(out_dir)
    ckpt_dir = out / CHECKPOINT_DIR
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    write_effective_config(settings, out)
    configure_determinism(cfg.deterministic)

    root = dataset_dir or cfg.dataset_dir
    if root is None:
        raise ConfigurationError("no training dataset: pass a dataset directory or set train.dataset_dir")
    train_pairs, val_paths = _split_pairs(cfg, Path(root))
    val_pairs = load_pairs(val_paths)

    latest = ckpt_dir / LATEST_NAME
    if latest.exists():
        restored = load_checkpoint(latest)
        if restored.model_config != settings.model:
            raise ConfigurationError(
                f"{latest} was trained with a different model config; use a fresh output directory"
            )
        state = restored.state
        torch.set_rng_state(state["torch_rng"])
        logger.info("Resuming from step %d", state["step"])
        last = latest
    else:
        state = new_train_state(settings.model, cfg)
        last = _checkpoint(state, cfg, ckpt_dir)

    model = state["model"].to(cfg.device)
    state["optimizer"].load_state_dict(state["optimizer"].state_dict())

    use_hcl = settings.model.use_hcl
    if use_hcl and encoder is None:
        encoder = PerceptualEncoder.from_config(settings.perceptual)
    if encoder is not None:
        encoder = encoder.to(cfg.device)

    end = cfg.total_steps if stop_at is None else min(stop_at, cfg.total_steps)
    loader = DataLoader(
        KeyedPairDataset(train_pairs, state["seed"], cfg.crop, cfg.pair_cache),
        batch_sampler=KeyedBatchSampler(state["step"], end, cfg.batch),
        num_workers=cfg.workers,
    )
    logger.info(
        "Training steps %d..%d on %d pair(s), %d held for validation",
        state["step"], end, len(train_pairs), len(val_pairs),
    )

    for batch in loader:
        row = train_step(state, batch, cfg, use_hcl=use_hcl, encoder=encoder)
        step = state["step"]
        if step % cfg.log_every == 0 or step == end:
            logger.info(
                "step %d  lr %.3e  char %.5f  hcl %.5f  total %.5f",
                step, row.lr, row.char, row.hcl, row.total,
            )
        if val_pairs and (step % cfg.val_every == 0 or step == cfg.total_steps):
            score = validate(model, val_pairs)
            state["history"].append(MetricRow(step=step, val_psnr=score))
            logger.info("step %d  validation PSNR %.2f dB", step, score)
        if step % cfg.checkpoint_every == 0 or step == end:
            last = _checkpoint(state, cfg, ckpt_dir)
            write_metrics(state["history"], out / METRICS_NAME)

    write_metrics(state["history"], out / METRICS_NAME)
    return last

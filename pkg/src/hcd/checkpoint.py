"""
Checkpoint archive for the network and its training state.

Layout on disk:

    b"HCDCKPT" + version byte | sha256(payload) (32 bytes) | payload

The payload is a `torch.save` archive of plain containers and tensors, so it
loads with `weights_only=True`.
"""

import hashlib
import io
import logging
import os
from pathlib import Path
from typing import NamedTuple, Optional

import torch

from hcd.errors import CheckpointIntegrityError, CheckpointVersionError
from hcd.network import HierarchicalDehazingNetwork, init_weights
from hcd.state_model import ModelConfig
from hcd.state_training import MetricRow, TrainConfig, TrainState

logger = logging.getLogger(__name__)

MAGIC_PREFIX = b"HCDCKPT"
FORMAT_VERSION = 1
MAGIC = MAGIC_PREFIX + bytes([ord("0") + FORMAT_VERSION])
DIGEST_SIZE = 32


class RestoredCheckpoint(NamedTuple):
    state: TrainState
    model_config: ModelConfig
    train_config: Optional[TrainConfig]


def build_optimizer(model: torch.nn.Module, cfg: TrainConfig) -> torch.optim.Adam:
    """Adam with the configured betas; the learning rate is set every step by the schedule."""
    return torch.optim.Adam(model.parameters(), lr=cfg.lr_init, betas=(cfg.beta1, cfg.beta2))


def new_train_state(model_config: ModelConfig, cfg: TrainConfig) -> TrainState:
    """Freshly initialized network and optimizer at step 0."""
    model = init_weights(model_config)
    return TrainState(
        step=0,
        seed=cfg.seed,
        model=model,
        optimizer=build_optimizer(model, cfg),
        torch_rng=torch.get_rng_state(),
        history=[],
    )


def save_checkpoint(state: TrainState, path: str | Path, train_config: Optional[TrainConfig] = None) -> Path:
    """Write `state` atomically to `path`."""
    model = state["model"]
    payload = {
        "format_version": FORMAT_VERSION,
        "model_config": model.config.model_dump_json(),
        "train_config": train_config.model_dump_json(by_alias=True) if train_config else None,
        "state_dict": {k: v.detach().cpu() for k, v in model.state_dict().items()},
        "optimizer": state["optimizer"].state_dict(),
        "step": int(state["step"]),
        "seed": int(state["seed"]),
        "torch_rng": state["torch_rng"],
        "history": [row.model_dump() for row in state["history"]],
    }
    buffer = io.BytesIO()
    torch.save(payload, buffer)
    body = buffer.getvalue()

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with tmp.open("wb") as fh:
        fh.write(MAGIC)
        fh.write(hashlib.sha256(body).digest())
        fh.write(body)
    os.replace(tmp, path)
    logger.debug("Wrote checkpoint %s (step %d)", path, state["step"])
    return path


def _read_payload(path: Path) -> dict:
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise CheckpointIntegrityError(f"{path}: cannot read checkpoint ({e})") from e
    header = len(MAGIC) + DIGEST_SIZE
    if len(raw) < header or not raw.startswith(MAGIC_PREFIX):
        raise CheckpointIntegrityError(f"{path}: not an hcd checkpoint")
    if raw[: len(MAGIC)] != MAGIC:
        found = raw[len(MAGIC_PREFIX) : len(MAGIC)].decode("ascii", errors="replace")
        raise CheckpointVersionError(
            f"{path}: checkpoint format version {found!r}, this build reads {FORMAT_VERSION}"
        )
    digest, body = raw[len(MAGIC) : header], raw[header:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointIntegrityError(f"{path}: checksum mismatch (truncated or modified file)")
    try:
        payload = torch.load(io.BytesIO(body), map_location="cpu", weights_only=True)
    except Exception as e:
        raise CheckpointIntegrityError(f"{path}: payload does not deserialize ({e})") from e
    if payload.get("format_version") != FORMAT_VERSION:
        raise CheckpointVersionError(
            f"{path}: payload version {payload.get('format_version')}, expected {FORMAT_VERSION}"
        )
    return payload


def load_checkpoint(path: str | Path) -> RestoredCheckpoint:
    """
    Rebuild the full training state stored at `path`.

    Raises:
        CheckpointVersionError: written by another archive format version.
        CheckpointIntegrityError: missing, truncated or modified file.
    """
    path = Path(path)
    payload = _read_payload(path)
    model_config = ModelConfig.model_validate_json(payload["model_config"])
    train_config = (
        TrainConfig.model_validate_json(payload["train_config"]) if payload["train_config"] else None
    )

    model = HierarchicalDehazingNetwork(model_config)
    model.load_state_dict(payload["state_dict"])
    optimizer = build_optimizer(model, train_config or TrainConfig())
    optimizer.load_state_dict(payload["optimizer"])

    state = TrainState(
        step=payload["step"],
        seed=payload["seed"],
        model=model,
        optimizer=optimizer,
        torch_rng=payload["torch_rng"],
        history=[MetricRow(**row) for row in payload["history"]],
    )
    return RestoredCheckpoint(state, model_config, train_config)


def load_network(path: str | Path) -> tuple[HierarchicalDehazingNetwork, int]:
    """Return the network stored at `path` (in eval mode) and its training step."""
    path = Path(path)
    payload = _read_payload(path)
    model = HierarchicalDehazingNetwork(ModelConfig.model_validate_json(payload["model_config"]))
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model, int(payload["step"])


from pathlib import Path
from typing import Callable, Sequence

import pytest
import torch

from hcd.config import HcdSettings
from hcd.haze import synth_from_config
from hcd.state_model import ModelConfig


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)
    yield


def project(value: torch.Tensor | Sequence[torch.Tensor], seed: int = 1234) -> torch.Tensor:
    """Reduce tensors to a scalar with fixed random weights (same weights on every call)."""
    tensors = [value] if isinstance(value, torch.Tensor) else list(value)
    gen = torch.Generator().manual_seed(seed)
    total = tensors[0].new_zeros(())
    for t in tensors:
        weights = torch.randn(t.shape, generator=gen, dtype=torch.float64).to(t.dtype)
        total = total + (t * weights).sum()
    return total


def gradient_error(
    fn: Callable[..., torch.Tensor],
    *inputs: torch.Tensor,
    step: float = 1e-4,
    samples: int = 12,
    seed: int = 0,
) -> float:
    """
    Worst-case relative error between autograd and central differences.

    `fn` maps the inputs to a scalar. A random sample of elements of every
    input is perturbed; the error is ||analytic - numeric|| / max(norms).
    """
    leaves = [x.detach().clone().to(torch.float64).requires_grad_(True) for x in inputs]
    analytic = torch.autograd.grad(fn(*leaves), leaves)
    gen = torch.Generator().manual_seed(seed)

    worst = 0.0
    with torch.no_grad():
        for leaf, grad in zip(leaves, analytic):
            flat = leaf.data.view(-1)
            picks = torch.randperm(flat.numel(), generator=gen)[:samples]
            numeric, exact = [], []
            for i in picks.tolist():
                original = flat[i].item()
                flat[i] = original + step
                plus = fn(*leaves).item()
                flat[i] = original - step
                minus = fn(*leaves).item()
                flat[i] = original
                numeric.append((plus - minus) / (2 * step))
                exact.append(grad.reshape(-1)[i].item())
            a = torch.tensor(exact, dtype=torch.float64)
            n = torch.tensor(numeric, dtype=torch.float64)
            scale = max(a.norm().item(), n.norm().item(), 1e-12)
            worst = max(worst, (a - n).norm().item() / scale)
    return worst


@pytest.fixture
def toy_model_config() -> ModelConfig:
    return ModelConfig(base_width=4, him_submodules=1, feb_layers=2, feb_growth=4, fab_reduction=2)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory) -> Path:
    """Twelve 32x32 synthetic hazy/clear pairs."""
    root = tmp_path_factory.mktemp("pairs")
    synth_from_config(
        root, None, count=12, seed=0, beta_range=(0.6, 1.8), atmosphere_range=(0.7, 1.0),
        depth_mode="random", scene_count=4, scene_size=32,
    )
    return root


@pytest.fixture
def tiny_settings(tiny_dataset) -> HcdSettings:
    """Settings for seconds-long training runs on `tiny_dataset`."""
    return HcdSettings(
        model={"base_width": 4, "him_submodules": 1, "feb_layers": 2, "feb_growth": 4, "fab_reduction": 2},
        perceptual={"backend": "random-tiny"},
        train={
            "crop": 16, "batch": 2, "lr_init": 1e-3, "lr_final": 1e-6, "total_steps": 4,
            "val_every": 2, "checkpoint_every": 2, "log_every": 1, "val_count": 2,
            "deterministic": True, "dataset_dir": str(tiny_dataset),
        },
    )

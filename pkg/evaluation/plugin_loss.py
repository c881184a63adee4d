"""
Train an unrelated single-output dehazing network with and without the
hierarchical contrastive loss and overlay the two training curves.

The baseline knows nothing about the hierarchical network: its one output is
area-averaged to three scales and handed to the same objective.

    python evaluation/plugin_loss.py --dataset data/train --out runs/plugin \
        --config configs/desk.json
"""

import argparse
import time
from pathlib import Path
from typing import List, Optional

import numpy as np
import torch
from dotenv import load_dotenv
from torch import nn
from torch.utils.data import DataLoader

from hcd.config import HcdSettings, load_settings, write_effective_config
from hcd.evaluation import emit_curves, psnr
from hcd.imaging import build_target_pyramid, crop_to, list_pairs, pad_to_multiple
from hcd.losses import PerceptualEncoder, total_loss
from hcd.state_data import HazePairRecord
from hcd.state_training import MetricRow
from hcd.training import KeyedBatchSampler, KeyedPairDataset, load_pairs, lr_at, write_metrics
from hcd.utils import configure_determinism, console, setup_logging

load_dotenv()


class BaselineDehazer(nn.Module):
    """Plain conv stack predicting a residual at full resolution."""

    def __init__(self, width: int = 16, depth: int = 5):
        super().__init__()
        layers: List[nn.Module] = [nn.Conv2d(3, width, 3, padding=1), nn.ReLU()]
        for _ in range(depth - 2):
            layers += [nn.Conv2d(width, width, 3, padding=1), nn.ReLU()]
        layers.append(nn.Conv2d(width, 3, 3, padding=1))
        self.body = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.body(x)


@torch.no_grad()
def score(model: nn.Module, pairs: List[HazePairRecord]) -> Optional[float]:
    if not pairs:
        return None
    model.eval()
    values = []
    for pair in pairs:
        padded, size = pad_to_multiple(pair.hazy)
        values.append(psnr(crop_to(model(padded[None])[0], size), pair.clear))
    model.train()
    return float(np.mean(values))


def train_baseline(settings: HcdSettings, args: argparse.Namespace, use_hcl: bool, out_dir: Path) -> Path:
    cfg = settings.train
    configure_determinism(cfg.deterministic)
    pairs, _ = list_pairs(args.dataset)
    cut = len(pairs) - cfg.val_count
    val_pairs = load_pairs(pairs[cut:])

    torch.manual_seed(cfg.seed)
    model = BaselineDehazer(args.width)
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.lr_init, betas=(cfg.beta1, cfg.beta2))
    encoder = PerceptualEncoder.from_config(settings.perceptual) if use_hcl else None
    loader = DataLoader(
        KeyedPairDataset(pairs[:cut], cfg.seed, cfg.crop, cfg.pair_cache),
        batch_sampler=KeyedBatchSampler(0, cfg.total_steps, cfg.batch),
    )

    history: List[MetricRow] = []
    for step, (hazy, clear, _) in enumerate(loader):
        for group in optimizer.param_groups:
            group["lr"] = lr_at(step, cfg)
        started = time.perf_counter()
        optimizer.zero_grad(set_to_none=True)
        outputs = build_target_pyramid(model(hazy))
        losses = total_loss(
            outputs, build_target_pyramid(clear), build_target_pyramid(hazy),
            lam=cfg.lambda_, epsilon=cfg.epsilon, use_hcl=use_hcl, encoder=encoder,
        )
        losses.total.backward()
        optimizer.step()
        history.append(MetricRow(
            step=step + 1, lr=lr_at(step, cfg), char=losses.char.item(), hcl=losses.hcl.item(),
            total=losses.total.item(), wall_ms=(time.perf_counter() - started) * 1000.0,
        ))
        if (step + 1) % cfg.val_every == 0 and val_pairs:
            history.append(MetricRow(step=step + 1, val_psnr=score(model, val_pairs)))

    out_dir.mkdir(parents=True, exist_ok=True)
    write_effective_config(settings, out_dir)
    return write_metrics(history, out_dir / "metrics.csv")


def main() -> None:
    parser = argparse.ArgumentParser(description="Baseline network trained with and without HCL")
    parser.add_argument("--dataset", required=True)
    parser.add_argument("--out", required=True)
    parser.add_argument("--config")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    parser.add_argument("--width", type=int, default=16)
    args = parser.parse_args()

    setup_logging()
    settings = load_settings(args.config, args.set)
    out = Path(args.out)
    runs = {
        "charbonnier": train_baseline(settings, args, False, out / "charbonnier"),
        "charbonnier+hcl": train_baseline(settings, args, True, out / "charbonnier_hcl"),
    }
    summary = emit_curves(list(runs.values()), out, labels=list(runs))
    for run in summary.runs:
        console.print(
            f"{run.label}: final loss {run.loss.final}, final PSNR {run.val_psnr.final}"
        )


if __name__ == "__main__":
    main()

"""
Ablation sweep over the four network/objective presets.

Each preset is trained from scratch on the same dataset with the same recipe,
then scored on a held-out paired dataset. Results land in
`<out>/ablation.json` and are printed as a table.

    python evaluation/ablation.py --dataset data/train --test data/test \
        --out runs/ablation --config configs/desk.json
"""

import argparse
import json
from pathlib import Path

from dotenv import load_dotenv

from hcd.checkpoint import load_network
from hcd.config import load_settings
from hcd.evaluation import evaluate_model
from hcd.network import param_count
from hcd.state_model import VARIANT_FLAGS
from hcd.training import run_training
from hcd.utils import setup_logging, show_table

load_dotenv()


def run_variant(name: str, args: argparse.Namespace) -> dict:
    flags = [f"model.{key}={json.dumps(value)}" for key, value in VARIANT_FLAGS[name].items()]
    settings = load_settings(args.config, [*flags, *args.set])
    run_dir = Path(args.out) / name
    last = run_training(settings, run_dir, args.dataset)

    model, step = load_network(last)
    report = evaluate_model(model, args.test, args.mode, f"{name}@step{step}")
    return {
        "variant": name,
        "parameters": param_count(model),
        "steps": step,
        "mean_psnr_db": report.mean_psnr_db,
        "mean_ssim": report.mean_ssim,
    }


def main() -> None:
    parser = argparse.ArgumentParser(description="Train and score every ablation preset")
    parser.add_argument("--dataset", required=True, help="training pairs")
    parser.add_argument("--test", required=True, help="held-out pairs to score")
    parser.add_argument("--out", required=True)
    parser.add_argument("--config")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    parser.add_argument("--mode", default="rgb", choices=["rgb", "y-channel"])
    parser.add_argument("--variants", nargs="+", default=list(VARIANT_FLAGS))
    args = parser.parse_args()

    setup_logging()
    results = [run_variant(name, args) for name in args.variants]

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.json").write_text(json.dumps(results, indent=2) + "\n", encoding="utf-8")
    show_table(
        "Ablation",
        ["variant", "parameters", "PSNR (dB)", "SSIM"],
        [(r["variant"], r["parameters"], r["mean_psnr_db"], r["mean_ssim"]) for r in results],
    )


if __name__ == "__main__":
    main()

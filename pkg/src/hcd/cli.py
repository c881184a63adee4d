"""
`hcd` command line.

    hcd synth   --out DIR                      write a synthetic hazy/clear dataset
    hcd train   --out DIR [--dataset DIR]      train (resumes from DIR/checkpoints)
    hcd eval    --out DIR --checkpoint F --dataset DIR
    hcd dehaze  --in IMG --out IMG [--checkpoint F] [--all-scales]
    hcd inspect [--out DIR]                    parameter table of the configured network
    hcd curves  --out DIR --metrics CSV [CSV ...] [--labels ...]

Every subcommand accepts `--config FILE` and repeatable `--set key=value`
overrides, and echoes the resolved configuration as effective_config.json.
Exit codes: 0 success, 1 user error, 2 internal error.
"""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, NoReturn, Optional, Sequence

from dotenv import load_dotenv

from hcd.config import HcdSettings, load_settings, write_effective_config
from hcd.errors import ConfigurationError, HcdError
from hcd.utils import console, setup_logging, show_config, show_table

logger = logging.getLogger("hcd.cli")


class _Parser(argparse.ArgumentParser):
    """Usage errors exit with status 1 like every other user error."""

    def error(self, message: str) -> NoReturn:
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="JSON config file")
    parser.add_argument(
        "--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
        help="dotted override, e.g. train.total_steps=10 (repeatable)",
    )
    parser.add_argument("--log-level", default="INFO", help="logging level (default: INFO)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="hcd", description="Hierarchical contrastive dehazing")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    synth = sub.add_parser("synth", help="synthesize hazy/clear pairs")
    _common(synth)
    synth.add_argument("--out", required=True)
    synth.add_argument("--clear-dir", help="clear source images (procedural scenes when omitted)")
    synth.add_argument("--count", type=int)
    synth.add_argument("--seed", type=int)

    train = sub.add_parser("train", help="train the network")
    _common(train)
    train.add_argument("--out", required=True)
    train.add_argument("--dataset", help="training pairs (overrides train.dataset_dir)")

    evaluate = sub.add_parser("eval", help="score a checkpoint on a paired dataset")
    _common(evaluate)
    evaluate.add_argument("--out", required=True)
    evaluate.add_argument("--checkpoint")
    evaluate.add_argument("--dataset")
    evaluate.add_argument("--mode", choices=["rgb", "y-channel"])

    dehaze = sub.add_parser("dehaze", help="dehaze one image")
    _common(dehaze)
    dehaze.add_argument("--in", dest="input", required=True)
    dehaze.add_argument("--out", required=True, help="output image path")
    dehaze.add_argument("--checkpoint", help="trained weights (fresh initialization when omitted)")
    dehaze.add_argument("--all-scales", action="store_true", help="also write the 1/2 and 1/4 outputs")

    inspect = sub.add_parser("inspect", help="print parameter counts")
    _common(inspect)
    inspect.add_argument("--out")

    curves = sub.add_parser("curves", help="plot training curves")
    _common(curves)
    curves.add_argument("--out", required=True)
    curves.add_argument("--metrics", nargs="+", required=True)
    curves.add_argument("--labels", nargs="+")
    return parser


def _flag_overrides(args: argparse.Namespace) -> List[str]:
    """Translate convenience flags into dotted overrides; explicit --set wins over them."""
    mapping = {
        "synth": {"clear_dir": "synth.clear_dir", "count": "synth.count", "seed": "synth.seed"},
        "train": {"dataset": "train.dataset_dir"},
        "eval": {"checkpoint": "eval.checkpoint", "dataset": "eval.dataset_dir", "mode": "eval.mode"},
    }.get(args.command, {})
    overrides = []
    for attr, key in mapping.items():
        value = getattr(args, attr, None)
        if value is not None:
            overrides.append(f"{key}={json.dumps(value)}")
    return overrides + list(args.overrides)


def _synth(settings: HcdSettings, args: argparse.Namespace) -> None:
    from hcd.haze import synth_from_config

    cfg = settings.synth
    records = synth_from_config(
        args.out, cfg.clear_dir, cfg.count, cfg.seed, cfg.beta_range, cfg.atmosphere_range,
        cfg.depth_mode, cfg.scene_count, cfg.scene_size, cfg.workers,
    )
    console.print(f"[green]Wrote {len(records)} pair(s) to {args.out}[/green]")


def _train(settings: HcdSettings, args: argparse.Namespace) -> None:
    from hcd.training import run_training

    last = run_training(settings, args.out)
    console.print(f"[green]Training finished; last checkpoint {last}[/green]")


def _eval(settings: HcdSettings, args: argparse.Namespace) -> None:
    from hcd.evaluation import evaluate_dir

    cfg = settings.eval
    if cfg.checkpoint is None or cfg.dataset_dir is None:
        raise ConfigurationError("eval needs a checkpoint and a dataset (--checkpoint/--dataset)")
    report = evaluate_dir(cfg.checkpoint, cfg.dataset_dir, cfg.mode, args.out, cfg.workers)
    show_table(
        f"{report.checkpoint} ({report.mode})",
        ["image", "PSNR (dB)", "SSIM"],
        [(r.name, r.psnr_db, r.ssim) for r in report.rows]
        + [("mean", report.mean_psnr_db, report.mean_ssim)],
    )
    if report.skipped:
        logger.warning("Skipped unpaired: %s", ", ".join(report.skipped))


def _dehaze(settings: HcdSettings, args: argparse.Namespace) -> None:
    from hcd.checkpoint import load_network
    from hcd.imaging import load_image, save_image
    from hcd.network import dehaze_image, init_weights

    if args.checkpoint:
        model, step = load_network(args.checkpoint)
        logger.info("Loaded %s (step %d)", args.checkpoint, step)
    else:
        logger.warning("No --checkpoint given; dehazing with freshly initialized weights")
        model = init_weights(settings.model)

    img = load_image(args.input)
    if img.shape[0] == 1:
        img = img.expand(3, -1, -1)
    outputs = dehaze_image(model, img)

    out = Path(args.out)
    save_image(outputs[0], out)
    if args.all_scales:
        for k, scaled in enumerate(outputs[1:], start=1):
            save_image(scaled, out.with_name(f"{out.stem}_x{2**k}{out.suffix}"))
    console.print(f"[green]Wrote {out}[/green]")


def _inspect(settings: HcdSettings, args: argparse.Namespace) -> None:
    from hcd.network import init_weights, param_count, parameter_table

    model = init_weights(settings.model)
    rows = parameter_table(model)
    total = param_count(model)
    show_table("Parameters", ["component", "parameters"], rows + [("total", total)])
    if args.out:
        payload = {"total": total, "components": dict(rows)}
        (Path(args.out) / "parameters.json").write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")


def _curves(settings: HcdSettings, args: argparse.Namespace) -> None:
    from hcd.evaluation import emit_curves

    summary = emit_curves(args.metrics, args.out, args.labels)
    show_table(
        "Curves",
        ["run", "steps", "loss final", "PSNR final"],
        [(r.label, r.steps, r.loss.final, r.val_psnr.final) for r in summary.runs],
    )


COMMANDS = {
    "synth": _synth,
    "train": _train,
    "eval": _eval,
    "dehaze": _dehaze,
    "inspect": _inspect,
    "curves": _curves,
}


def _out_dir(args: argparse.Namespace) -> Optional[Path]:
    if args.out is None:
        return None
    # dehaze's --out names an image; its config goes next to it
    return Path(args.out).parent if args.command == "dehaze" else Path(args.out)


def dispatch(argv: Optional[Sequence[str]] = None) -> int:
    """Run one subcommand and return its exit code."""
    load_dotenv()
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)

    setup_logging(args.log_level.upper())
    try:
        settings = load_settings(args.config, _flag_overrides(args))
        out = _out_dir(args)
        if out is not None:
            write_effective_config(settings, out)
        if args.command in ("train", "inspect"):
            show_config(settings.dump())
        COMMANDS[args.command](settings, args)
    except HcdError as e:
        logger.error("%s", e)
        return e.exit_code
    except Exception:
        logger.exception("Internal error")
        return 2
    return 0


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()

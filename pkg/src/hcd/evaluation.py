"""
Full-reference metrics, dataset evaluation and training-curve plots.

PSNR and SSIM both score images clamped to [0, 1] with a peak value of 1.
"""

import logging
import math
import re
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import List, Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np
import pandas as pd
import torch
import torch.nn.functional as F

from hcd.checkpoint import load_network
from hcd.config import config_fingerprint
from hcd.errors import InvalidArgumentError, MetricsParseError
from hcd.imaging import PairPaths, list_pairs, load_image
from hcd.network import HierarchicalDehazingNetwork, dehaze_image
from hcd.state_eval import CurveSummary, EvalReport, EvalRow, PsnrMode, RunCurveSummary, SeriesStats
from hcd.state_training import METRIC_COLUMNS

logger = logging.getLogger(__name__)

PSNR_CAP_DB = 100.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
BT601_LUMA = (0.299, 0.587, 0.114)

REPORT_JSON = "eval_report.json"
REPORT_CSV = "eval_report.csv"
SUMMARY_JSON = "curve_summary.json"
LOSS_PLOT = "loss_curve.png"
PSNR_PLOT = "psnr_curve.png"


def _check_same_shape(x: torch.Tensor, y: torch.Tensor) -> None:
    if x.shape != y.shape:
        raise InvalidArgumentError(f"shape mismatch: {tuple(x.shape)} vs {tuple(y.shape)}")


def to_luma(img: torch.Tensor) -> torch.Tensor:
    """Full-range BT.601 luma of a (3, H, W) image; single-channel input passes through."""
    if img.shape[-3] == 1:
        return img
    r, g, b = img.unbind(dim=-3)
    return (BT601_LUMA[0] * r + BT601_LUMA[1] * g + BT601_LUMA[2] * b).unsqueeze(-3)


def psnr(x: torch.Tensor, y: torch.Tensor, mode: PsnrMode = "rgb") -> float:
    """
    Peak signal-to-noise ratio in dB with MAX = 1.

    Identical images report the 100 dB cap instead of infinity.
    """
    _check_same_shape(x, y)
    x = x.detach().to(torch.float64).clamp(0.0, 1.0)
    y = y.detach().to(torch.float64).clamp(0.0, 1.0)
    if mode == "y-channel":
        x, y = to_luma(x), to_luma(y)
    elif mode != "rgb":
        raise InvalidArgumentError(f"unknown PSNR mode {mode!r}")
    mse = torch.mean((x - y) ** 2).item()
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * math.log10(1.0 / mse))


def _gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> torch.Tensor:
    coords = torch.arange(size, dtype=torch.float64) - (size - 1) / 2
    kernel = torch.exp(-(coords**2) / (2.0 * sigma**2))
    kernel = kernel / kernel.sum()
    return torch.outer(kernel, kernel)[None, None]


def ssim(x: torch.Tensor, y: torch.Tensor) -> float:
    """
    Single-scale SSIM on the channel-mean grayscale image.

    11x11 Gaussian window (sigma 1.5), K1 = 0.01, K2 = 0.03, L = 1, averaged
    over the windows that fit entirely inside the image.

    Raises:
        InvalidArgumentError: shapes differ or the image is below 11x11.
    """
    _check_same_shape(x, y)
    if x.shape[-1] < SSIM_WINDOW or x.shape[-2] < SSIM_WINDOW:
        raise InvalidArgumentError(
            f"SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {x.shape[-2]}x{x.shape[-1]}"
        )

    def gray(img: torch.Tensor) -> torch.Tensor:
        img = img.detach().to(torch.float64).clamp(0.0, 1.0)
        if img.dim() == 3:
            img = img.mean(dim=0)
        return img[None, None]

    a, b = gray(x), gray(y)
    window = _gaussian_window()
    c1, c2 = SSIM_K1**2, SSIM_K2**2

    mu_a = F.conv2d(a, window)
    mu_b = F.conv2d(b, window)
    var_a = F.conv2d(a * a, window) - mu_a * mu_a
    var_b = F.conv2d(b * b, window) - mu_b * mu_b
    cov = F.conv2d(a * b, window) - mu_a * mu_b

    numerator = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    denominator = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return (numerator / denominator).mean().item()


def _score_pair(model: HierarchicalDehazingNetwork, pair: PairPaths, mode: PsnrMode) -> Optional[EvalRow]:
    """Score one pair, or return None when the hazy and clear images cannot be compared."""
    hazy = load_image(pair.hazy)
    clear = load_image(pair.clear)
    if hazy.shape[0] == 1:
        hazy = hazy.expand(3, -1, -1)
    if clear.shape[0] == 1:
        clear = clear.expand(3, -1, -1)
    restored = dehaze_image(model, hazy)[0].clamp(0.0, 1.0)
    try:
        return EvalRow(name=pair.name, psnr_db=psnr(restored, clear, mode), ssim=ssim(restored, clear))
    except InvalidArgumentError as e:
        logger.warning("%s: skipped, %s", pair.name, e)
        return None


def evaluate_model(
    model: HierarchicalDehazingNetwork,
    dataset_dir: str | Path,
    mode: PsnrMode = "rgb",
    checkpoint_id: str = "in-memory",
    workers: int = 0,
) -> EvalReport:
    """Score the full-resolution output of `model` on every pair under `dataset_dir`."""
    pairs, skipped = list_pairs(dataset_dir)
    if not pairs:
        logger.warning("%s: no hazy/clear pairs to evaluate", dataset_dir)
    model.eval()
    if workers > 0:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            scored = list(pool.map(lambda p: _score_pair(model, p, mode), pairs))
    else:
        scored = [_score_pair(model, p, mode) for p in pairs]
    rows = [row for row in scored if row is not None]
    skipped = sorted([*skipped, *(p.name for p, row in zip(pairs, scored) if row is None)])

    return EvalReport(
        config_fingerprint=config_fingerprint(model.config),
        checkpoint=checkpoint_id,
        mode=mode,
        rows=rows,
        mean_psnr_db=float(np.mean([r.psnr_db for r in rows])) if rows else None,
        mean_ssim=float(np.mean([r.ssim for r in rows])) if rows else None,
        skipped=skipped,
    )


def write_report(report: EvalReport, out_dir: str | Path) -> Path:
    """Write `eval_report.json` and `eval_report.csv` into `out_dir`."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / REPORT_JSON).write_text(report.model_dump_json(indent=2) + "\n", encoding="utf-8")
    frame = pd.DataFrame([r.model_dump() for r in report.rows], columns=["name", "psnr_db", "ssim"])
    frame.to_csv(out / REPORT_CSV, index=False)
    return out / REPORT_JSON


def evaluate_dir(
    checkpoint: str | Path,
    dataset_dir: str | Path,
    mode: PsnrMode = "rgb",
    out_dir: Optional[str | Path] = None,
    workers: int = 0,
) -> EvalReport:
    """
    Evaluate a checkpoint on a paired dataset.

    Unpaired names and pairs whose images differ in size are listed in
    `skipped`; an empty dataset yields an empty
    report. When `out_dir` is given, the JSON and CSV reports are written there.
    """
    model, step = load_network(checkpoint)
    report = evaluate_model(model, dataset_dir, mode, f"{Path(checkpoint).name}@step{step}", workers)
    if out_dir is not None:
        write_report(report, out_dir)
    if report.rows:
        logger.info(
            "%d image(s): mean PSNR %.3f dB, mean SSIM %.4f",
            len(report.rows), report.mean_psnr_db, report.mean_ssim,
        )
    return report


def _line_of(message: str) -> Optional[int]:
    match = re.search(r"line (\d+)", message)
    return int(match.group(1)) if match else None


def read_metrics(path: str | Path) -> pd.DataFrame:
    """
    Load a training metrics CSV with every column numeric.

    Raises:
        MetricsParseError: unreadable CSV, missing columns or non-numeric cells,
            with the 1-based line number when it can be located.
    """
    path = Path(path)
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    except FileNotFoundError as e:
        raise MetricsParseError(str(path), None, "no such file") from e
    except pd.errors.EmptyDataError as e:
        raise MetricsParseError(str(path), 1, "missing header row") from e
    except pd.errors.ParserError as e:
        raise MetricsParseError(str(path), _line_of(str(e)), str(e).strip()) from e

    missing = [c for c in METRIC_COLUMNS if c not in frame.columns]
    if missing:
        raise MetricsParseError(str(path), 1, f"missing column(s): {', '.join(missing)}")

    numeric = {}
    for column in METRIC_COLUMNS:
        raw = frame[column].str.strip()
        values = pd.to_numeric(raw.replace("", np.nan), errors="coerce")
        bad = values.isna() & (raw != "")
        if bad.any():
            row = int(np.flatnonzero(bad.to_numpy())[0])
            raise MetricsParseError(
                str(path), row + 2, f"column {column!r} holds non-numeric value {raw.iloc[row]!r}"
            )
        numeric[column] = values.astype(float)
    return pd.DataFrame(numeric, columns=METRIC_COLUMNS)


def _stats(series: pd.Series) -> SeriesStats:
    if series.empty:
        return SeriesStats()
    return SeriesStats(
        initial=float(series.iloc[0]),
        final=float(series.iloc[-1]),
        min=float(series.min()),
        max=float(series.max()),
    )


def _plot(runs: Sequence[tuple[str, pd.DataFrame]], column: str, ylabel: str, path: Path) -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    for label, frame in runs:
        ax.plot(frame["step"], frame[column], label=label)
    ax.set_xlabel("step")
    ax.set_ylabel(ylabel)
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def emit_curves(
    metrics_csvs: Sequence[str | Path],
    out_dir: str | Path,
    labels: Optional[Sequence[str]] = None,
) -> CurveSummary:
    """
    Plot total loss and validation PSNR against step, one series per CSV.

    Writes `loss_curve.png` / `psnr_curve.png` when the runs have data for
    them, and always `curve_summary.json` with per-run initial/final/min/max.
    """
    paths = [Path(p) for p in metrics_csvs]
    if labels is None:
        labels = [p.parent.name or p.stem for p in paths]
    if len(labels) != len(paths):
        raise InvalidArgumentError(f"{len(labels)} label(s) for {len(paths)} metrics file(s)")

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    loss_runs: List[tuple[str, pd.DataFrame]] = []
    psnr_runs: List[tuple[str, pd.DataFrame]] = []
    summary = CurveSummary()
    for label, path in zip(labels, paths):
        frame = read_metrics(path)
        training = frame[frame["total"].notna()]
        validation = frame[frame["val_psnr"].notna()]
        summary.runs.append(RunCurveSummary(
            label=label,
            steps=len(training),
            loss=_stats(training["total"]),
            val_psnr=_stats(validation["val_psnr"]),
        ))
        if not training.empty:
            loss_runs.append((label, training))
        if not validation.empty:
            psnr_runs.append((label, validation))

    if loss_runs:
        _plot(loss_runs, "total", "total loss", out / LOSS_PLOT)
        summary.plots.append(LOSS_PLOT)
    if psnr_runs:
        _plot(psnr_runs, "val_psnr", "validation PSNR (dB)", out / PSNR_PLOT)
        summary.plots.append(PSNR_PLOT)

    (out / SUMMARY_JSON).write_text(summary.model_dump_json(indent=2) + "\n", encoding="utf-8")
    return summary

import json
import logging
from typing import Any, Iterable, Mapping

import numpy as np
import torch
from rich.console import Console
from rich.logging import RichHandler
from rich.panel import Panel
from rich.table import Table
from rich.text import Text

console = Console()

_LOGGING_READY = False


def setup_logging(level: int | str = logging.INFO) -> None:
    """Route stdlib logging through rich. Safe to call more than once."""
    global _LOGGING_READY
    if _LOGGING_READY:
        logging.getLogger("hcd").setLevel(level)
        return
    handler = RichHandler(console=console, show_path=False, rich_tracebacks=True)
    handler.setFormatter(logging.Formatter("%(message)s", datefmt="[%X]"))
    root = logging.getLogger("hcd")
    root.addHandler(handler)
    root.setLevel(level)
    root.propagate = False
    _LOGGING_READY = True


def rng_for(*keys: int) -> np.random.Generator:
    """Return a numpy generator keyed on a tuple of integers, e.g. (seed, index)."""
    return np.random.default_rng([int(k) for k in keys])


def torch_generator(seed: int) -> torch.Generator:
    """Return a CPU torch generator seeded with `seed`."""
    gen = torch.Generator()
    gen.manual_seed(int(seed))
    return gen


def configure_determinism(strict: bool) -> None:
    """Pin torch to a single thread and deterministic kernels when `strict`."""
    if strict:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True, warn_only=True)


def show_config(config: Mapping[str, Any], title: str = "Effective config", border_style: str = "blue"):
    """
    Display a configuration mapping as highlighted JSON inside a panel.

    Args:
        config: The configuration to display
        title: Title for the panel (default: "Effective config")
        border_style: Border color style (default: "blue")
    """
    formatted_text = Text(json.dumps(config, indent=2, sort_keys=True))
    formatted_text.highlight_regex(r'"[^"]+":', style="bold cyan")  # Keys
    formatted_text.highlight_regex(r"\b(true|false|null)\b", style="bold magenta")

    console.print(Panel(
        formatted_text,
        title=f"[bold green]{title}[/bold green]",
        border_style=border_style,
        padding=(1, 2)
    ))


def show_table(title: str, columns: Iterable[str], rows: Iterable[Iterable[Any]]):
    """Print a simple rich table; numbers are right-aligned."""
    table = Table(title=title)
    columns = list(columns)
    for i, name in enumerate(columns):
        table.add_column(name, justify="left" if i == 0 else "right")
    for row in rows:
        table.add_row(*(_format_cell(v) for v in row))
    console.print(table)


def _format_cell(value: Any) -> str:
    if value is None:
        return "-"
    if isinstance(value, float):
        return f"{value:.4f}"
    if isinstance(value, int):
        return f"{value:,}"
    return str(value)

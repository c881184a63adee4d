"""
Configuration loading: one schema for every subcommand.

Precedence, highest first: dotted `--set` overrides, the JSON config file,
`HCD_*` environment variables (a `.env` file is loaded by the CLI), defaults.
"""

import hashlib
import json
from pathlib import Path
from typing import Any, Dict, Iterable, Optional

from pydantic import Field, ValidationError
from pydantic_settings import BaseSettings, SettingsConfigDict

from hcd.errors import ConfigurationError
from hcd.state_data import SynthConfig
from hcd.state_eval import EvalConfig
from hcd.state_model import ModelConfig, PerceptualConfig
from hcd.state_training import TrainConfig

EFFECTIVE_CONFIG_NAME = "effective_config.json"


class HcdSettings(BaseSettings):
    """Resolved configuration shared by all subcommands."""

    model_config = SettingsConfigDict(
        env_prefix="HCD_",
        env_nested_delimiter="__",
        extra="forbid",
        populate_by_name=True,
    )

    model: ModelConfig = Field(default_factory=ModelConfig)
    perceptual: PerceptualConfig = Field(default_factory=PerceptualConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    synth: SynthConfig = Field(default_factory=SynthConfig)
    eval: EvalConfig = Field(default_factory=EvalConfig)

    def dump(self) -> Dict[str, Any]:
        """Return the JSON-ready form written to effective_config.json."""
        return self.model_dump(mode="json", by_alias=True)


def parse_override(item: str) -> tuple[list[str], Any]:
    """Split `a.b.c=value` into (["a", "b", "c"], parsed value)."""
    key, sep, raw = item.partition("=")
    if not sep or not key.strip():
        raise ConfigurationError(f"override {item!r} is not of the form dotted.key=value")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return [part for part in key.strip().split(".")], value


def apply_overrides(data: Dict[str, Any], overrides: Iterable[str]) -> Dict[str, Any]:
    """Return a copy of `data` with every dotted override written into it."""
    merged = json.loads(json.dumps(data))
    for item in overrides:
        path, value = parse_override(item)
        node = merged
        for part in path[:-1]:
            child = node.setdefault(part, {})
            if not isinstance(child, dict):
                raise ConfigurationError(f"override {item!r}: {part!r} is not a section")
            node = child
        node[path[-1]] = value
    return merged


def load_settings(config_path: Optional[str | Path] = None, overrides: Iterable[str] = ()) -> HcdSettings:
    """
    Build settings from an optional JSON file plus dotted overrides.

    Raises:
        ConfigurationError: unreadable file, invalid JSON, unknown keys or
            values outside their validity domain.
    """
    data: Dict[str, Any] = {}
    if config_path is not None:
        path = Path(config_path)
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except OSError as e:
            raise ConfigurationError(f"cannot read config {path}: {e}") from e
        except json.JSONDecodeError as e:
            raise ConfigurationError(f"{path}:{e.lineno}: invalid JSON ({e.msg})") from e
        if not isinstance(data, dict):
            raise ConfigurationError(f"{path}: top level must be a JSON object")
    data = apply_overrides(data, overrides)
    try:
        return HcdSettings(**data)
    except ValidationError as e:
        raise ConfigurationError(f"invalid configuration:\n{e}") from e


def write_effective_config(settings: HcdSettings, out_dir: str | Path) -> Path:
    """Echo the resolved settings into `out_dir`."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / EFFECTIVE_CONFIG_NAME
    path.write_text(json.dumps(settings.dump(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def config_fingerprint(model_config: ModelConfig) -> str:
    """Return a short stable hash of the architecture config."""
    canonical = json.dumps(model_config.model_dump(mode="json"), sort_keys=True)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]

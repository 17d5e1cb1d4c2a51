import argparse
import logging
from pathlib import Path
from typing import Optional

from app.config import RunConfig, config_hash, get_settings, load_config
from app.errors import ConfigError

logger = logging.getLogger(__name__)


def add_common_flags(parser: argparse.ArgumentParser, checkpoint: bool = False) -> None:
    parser.add_argument("--config", help="JSON run configuration (defaults apply when omitted)")
    parser.add_argument("--seed", type=int, help="override the run seed")
    parser.add_argument("--out", help="output directory")
    if checkpoint:
        parser.add_argument("--checkpoint", help="engine checkpoint file")


def load_run_config(args: argparse.Namespace) -> RunConfig:
    config = load_config(args.config)
    updates = {}
    if getattr(args, "seed", None) is not None:
        updates["rng_seed"] = args.seed
        updates["seeds"] = None
    if getattr(args, "out", None):
        updates["out_dir"] = args.out
    if getattr(args, "dataset", None):
        updates["dataset"] = args.dataset
    if not updates:
        return config
    try:
        return RunConfig(**{**config.model_dump(), **updates})
    except ValueError as e:
        raise ConfigError(f"invalid configuration: {e}") from e


def out_dir(config: RunConfig) -> Path:
    path = Path(config.out_dir or get_settings().default_out_dir)
    path.mkdir(parents=True, exist_ok=True)
    return path


def require(value: Optional[str], flag: str) -> str:
    if not value:
        raise ConfigError(f"{flag} is required for this command")
    return value


def describe(config: RunConfig) -> str:
    return f"config_hash={config_hash(config)} seeds={config.run_seeds()}"

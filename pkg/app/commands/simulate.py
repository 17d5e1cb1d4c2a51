import argparse
import logging

from app.commands.common import add_common_flags
from app.config import SimulationConfig, config_hash, get_settings, load_config
from app.errors import ConfigError
from app.services import simulator
from app.services.dataset import write_dataset

logger = logging.getLogger(__name__)


def register(subparsers) -> None:
    parser = subparsers.add_parser("simulate", help="generate the shear-building transmissibility dataset")
    add_common_flags(parser)
    parser.add_argument("--scale", choices=["desk", "full"], default=None,
                        help="full: 600/200 samples with 300 s records")
    parser.add_argument("--workers", type=int, default=None)
    parser.set_defaults(handler=cmd_simulate)


def simulation_config(args: argparse.Namespace) -> SimulationConfig:
    config = load_config(args.config).simulation
    updates = {}
    if args.scale == "full":
        updates.update(SimulationConfig.full_scale().model_dump(include={"scenarios", "duration"}))
    if args.seed is not None:
        updates["seed"] = args.seed
    if args.out:
        updates["output"] = args.out
    if not updates:
        return config
    try:
        return SimulationConfig(**{**config.model_dump(), **updates})
    except ValueError as e:
        raise ConfigError(f"invalid simulation configuration: {e}") from e


def cmd_simulate(args: argparse.Namespace) -> int:
    config = simulation_config(args)
    workers = args.workers or get_settings().workers
    logger.info(f"Simulating with config_hash={config_hash(config)} seed={config.seed} workers={workers}")
    data = simulator.build_dataset(config, workers=workers)
    bin_path, json_path = write_dataset(data, config.output)
    logger.info(f"✅ Wrote {bin_path} and {json_path}")
    return 0

import argparse
import logging

import pandas as pd

from app.commands.common import add_common_flags, describe, load_run_config, out_dir, require
from app.commands.train import record
from app.config import config_hash, get_settings
from app.errors import ConfigError
from app.services import reporting, runner
from app.services.dataset import read_dataset

logger = logging.getLogger(__name__)


def register(subparsers) -> None:
    parser = subparsers.add_parser("sensitivity", help="repeat training across concentration parameters")
    add_common_flags(parser)
    parser.add_argument("--dataset", help="dataset path (.bin/.json pair)")
    parser.add_argument("--alphas", type=float, nargs="+", help="override the configured alpha list")
    parser.add_argument("--workers", type=int, default=None)
    parser.set_defaults(handler=cmd_sensitivity)


def cmd_sensitivity(args: argparse.Namespace) -> int:
    config = load_run_config(args)
    alphas = args.alphas or config.alphas
    if any(alpha <= 0 for alpha in alphas):
        raise ConfigError(f"alphas must be positive, got {alphas}")
    data = read_dataset(require(config.dataset, "--dataset"))
    root = out_dir(config)
    digest = config_hash(config)
    logger.info(f"Sensitivity over alpha={alphas}, {describe(config)}")

    results = runner.sensitivity(config, data, alphas, args.workers or get_settings().workers)
    rows = [result.summary_row() for result in results]
    reporting.write_table(pd.DataFrame(rows), root / "sensitivity_runs.csv", digest)
    reporting.write_table(reporting.summarize(rows, group="alpha"), root / "sensitivity.csv", digest)
    record(results, config, "sensitivity", root)
    logger.info(f"✅ Sensitivity table written to {root / 'sensitivity.csv'}")
    return 0

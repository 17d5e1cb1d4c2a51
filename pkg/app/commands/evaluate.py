import argparse
import logging

import pandas as pd

from app.commands.common import add_common_flags, load_run_config, out_dir, require
from app.config import config_hash
from app.services import checkpoint, reporting, runner
from app.services.dataset import read_dataset

logger = logging.getLogger(__name__)


def register(subparsers) -> None:
    parser = subparsers.add_parser("eval", help="score a labeled dataset against a checkpoint")
    add_common_flags(parser, checkpoint=True)
    parser.add_argument("--dataset", help="labeled dataset path (.bin/.json pair)")
    parser.set_defaults(handler=cmd_eval)


def cmd_eval(args: argparse.Namespace) -> int:
    config = load_run_config(args)
    ckpt = checkpoint.load(require(args.checkpoint, "--checkpoint"))
    data = read_dataset(require(config.dataset, "--dataset"))
    root = out_dir(config)
    digest = config_hash(ckpt.config)

    scores, verdicts = runner.evaluate(ckpt, data, config.healthy_label)
    assignments = pd.DataFrame({
        "sample_id": range(len(data)),
        "label": data.labels,
        "cluster": verdicts.assigned,
        "tail_mass": verdicts.tail,
        "anomaly": verdicts.anomaly,
    })
    reporting.write_table(assignments, root / "assignments.csv", digest, ckpt.config.rng_seed)
    reporting.write_table(pd.DataFrame([scores]), root / "metrics.csv", digest, ckpt.config.rng_seed)
    reporting.write_json({
        "config_hash": digest,
        "seed": ckpt.config.rng_seed,
        "dataset": config.dataset,
        "rows": len(data),
        "k_active": ckpt.k_active,
        "metrics": scores,
        "dda_source": "engine anomaly rule (unhealthy component or dominant tail mass)",
    }, root / "metrics.json")
    logger.info(f"✅ Evaluation: {scores}")
    return 0

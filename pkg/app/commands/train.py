import argparse
import logging
from pathlib import Path
from typing import List

import pandas as pd

from app.commands.common import add_common_flags, describe, load_run_config, out_dir, require
from app.config import RunConfig, config_hash, get_settings
from app.services import checkpoint, metrics, reporting, run_registry, runner
from app.services.dataset import read_dataset

logger = logging.getLogger(__name__)


def register(subparsers) -> None:
    parser = subparsers.add_parser("train", help="train through the class schedule and report metrics")
    add_common_flags(parser)
    parser.add_argument("--dataset", help="dataset path (.bin/.json pair)")
    parser.add_argument("--workers", type=int, default=None)
    parser.set_defaults(handler=cmd_train)


def write_run_artifacts(result: runner.TrainResult, config: RunConfig, run_dir: Path) -> None:
    """Checkpoint, epoch trace, held-out metrics and the latent scatter for one seed."""
    digest = config_hash(config)
    checkpoint.save(result.checkpoint, run_dir / "checkpoint.ckpt")
    reporting.write_table(reporting.trace_frame(result.trace), run_dir / "trace.csv", digest, result.seed)
    reporting.write_json({
        "config_hash": digest,
        "seed": result.seed,
        "alpha": result.alpha,
        "k_active": result.checkpoint.k_active,
        "healthy_components": sorted(result.checkpoint.registry.ids),
        "test": result.test,
        "validation": result.validation,
        "dda_source": "engine anomaly rule (unhealthy component or dominant tail mass)",
    }, run_dir / "metrics.json")
    if result.test_latents is not None and result.test_latents.shape[0] >= 2:
        coords = metrics.pca2d(result.test_latents)
        reporting.scatter_svg(coords, result.test_clusters, run_dir / "pca.svg", title=f"seed {result.seed}")


def record(results: List[runner.TrainResult], config: RunConfig, command: str, root: Path) -> None:
    db = run_registry.open_session()
    if db is None:
        return
    try:
        for result in results:
            run_id = run_registry.start_run(
                db, command, config_hash(config), result.seed, str(root), alpha=result.alpha,
            )
            run_registry.record_epochs(db, run_id, result.trace)
            run_registry.finish_run(db, run_id, result.test, result.checkpoint.k_active)
    finally:
        db.close()


def cmd_train(args: argparse.Namespace) -> int:
    config = load_run_config(args)
    data = read_dataset(require(config.dataset, "--dataset"))
    root = out_dir(config)
    workers = args.workers or get_settings().workers
    logger.info(f"Training on {config.dataset} ({len(data)} rows), {describe(config)}")

    results = runner.train_many(config, data, config.run_seeds(), workers)
    for result in results:
        write_run_artifacts(result, config, root / f"seed_{result.seed}")
    rows = [result.summary_row() for result in results if result.test]
    if rows:
        reporting.write_table(reporting.summarize(rows), root / "summary.csv", config_hash(config))
        reporting.write_table(pd.DataFrame(rows), root / "runs.csv", config_hash(config))
    record(results, config, "train", root)
    logger.info(f"✅ Training finished; artifacts in {root}")
    return 0

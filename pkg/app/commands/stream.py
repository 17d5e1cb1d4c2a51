import argparse
import logging
from pathlib import Path

import pandas as pd

from app.commands.common import add_common_flags, load_run_config, out_dir, require
from app.config import config_hash
from app.services import checkpoint, engine, reporting, run_registry
from app.services.dataset import read_dataset

logger = logging.getLogger(__name__)


def register(subparsers) -> None:
    parser = subparsers.add_parser("stream", help="ingest new feature batches into a trained checkpoint")
    add_common_flags(parser, checkpoint=True)
    parser.add_argument("batches", nargs="*", help="dataset files, ingested in order")
    parser.set_defaults(handler=cmd_stream)


def cmd_stream(args: argparse.Namespace) -> int:
    config = load_run_config(args)
    ckpt = checkpoint.load(require(args.checkpoint, "--checkpoint"))
    root = out_dir(config)
    digest = config_hash(ckpt.config)
    if not args.batches:
        logger.info("No batches given; checkpoint left unchanged")
        return 0

    db = run_registry.open_session()
    run_id = run_registry.start_run(db, "stream", digest, ckpt.config.rng_seed, str(root))
    rows = []
    try:
        for batch_path in args.batches:
            batch = read_dataset(batch_path)
            ckpt, verdicts = engine.ingest_with_verdicts(ckpt, batch.features)
            batch_rows = [
                {
                    "batch": Path(batch_path).stem,
                    "sample_id": i,
                    "cluster": int(verdicts.assigned[i]),
                    "tail_mass": float(verdicts.tail[i]),
                    "anomaly": bool(verdicts.anomaly[i]),
                }
                for i in range(len(verdicts))
            ]
            run_registry.record_verdicts(db, run_id, Path(batch_path).stem, batch_rows)
            rows.extend(batch_rows)
            flagged = sum(row["anomaly"] for row in batch_rows)
            logger.info(f"Batch {batch_path}: {flagged}/{len(batch_rows)} anomalous, K_a={ckpt.k_active}")
        reporting.write_table(
            pd.DataFrame(rows, columns=reporting.VERDICT_COLUMNS), root / "verdicts.csv", digest, ckpt.config.rng_seed,
        )
        checkpoint.save(ckpt, root / "checkpoint.ckpt")
        run_registry.finish_run(db, run_id, k_active=ckpt.k_active)
    except Exception as e:
        run_registry.finish_run(db, run_id, error=str(e))
        raise
    finally:
        if db is not None:
            db.close()
    return 0

import argparse
import logging

import pandas as pd

from app.commands.common import add_common_flags, load_run_config, out_dir, require
from app.config import config_hash
from app.services import checkpoint, engine, metrics, reporting
from app.services.dataset import read_dataset, to_frame

logger = logging.getLogger(__name__)


def register(subparsers) -> None:
    parser = subparsers.add_parser("export", help="dataset to CSV, or latent PCA coordinates with --checkpoint")
    add_common_flags(parser, checkpoint=True)
    parser.add_argument("--dataset", help="dataset path (.bin/.json pair)")
    parser.set_defaults(handler=cmd_export)


def cmd_export(args: argparse.Namespace) -> int:
    config = load_run_config(args)
    data = read_dataset(require(config.dataset, "--dataset"))
    root = out_dir(config)

    if not args.checkpoint:
        path = reporting.write_table(to_frame(data), root / "dataset.csv", config_hash(config), config.rng_seed)
        logger.info(f"✅ Dataset exported to {path}")
        return 0

    ckpt = checkpoint.load(args.checkpoint)
    X = engine.normalize(ckpt, data.features)
    verdicts = engine.score(ckpt, X)
    coords = metrics.pca2d(engine.latent_means(ckpt, X))
    frame = pd.DataFrame({
        "sample_id": range(len(data)),
        "label": data.labels,
        "cluster": verdicts.assigned,
        "pc1": coords[:, 0],
        "pc2": coords[:, 1],
    })
    digest = config_hash(ckpt.config)
    reporting.write_table(frame, root / "latent_pca.csv", digest, ckpt.config.rng_seed)
    reporting.scatter_svg(coords, verdicts.assigned, root / "latent_pca.svg", title="latent means")
    logger.info(f"✅ Latent projection exported to {root}")
    return 0

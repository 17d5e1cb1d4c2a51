import argparse
import logging
import sys
from typing import List, Optional

from app.commands import COMMANDS
from app.config import get_settings
from app.errors import DpvilError

logger = logging.getLogger(__name__)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dpvil",
        description="Incremental damage detection with a DP-mixture variational autoencoder",
    )
    parser.add_argument("--log-level", default=None, help="overrides DPVIL_LOG_LEVEL")
    subparsers = parser.add_subparsers(dest="command", required=True)
    for command in COMMANDS:
        command.register(subparsers)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    settings = get_settings()
    logging.basicConfig(
        level=(args.log_level or settings.log_level).upper(),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.handler(args)
    except DpvilError as e:
        logger.error(f"❌ {args.command} failed: {e}")
        return e.exit_code
    except Exception as e:
        logger.error(f"❌ {args.command} failed unexpectedly: {e}", exc_info=True)
        return 1


if __name__ == "__main__":
    sys.exit(main())

import argparse
import logging
import sys
from typing import List, Optional

from app.core.config import settings
from app.core.errors import GestureError
from app.routers.cli import register


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gesture-strokes",
                                     description="Co-speech gesture stroke detection from speech and pose")
    subparsers = parser.add_subparsers(dest="command", required=True)
    register(subparsers)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    logging.basicConfig(level=getattr(logging, settings.LOG_LEVEL.upper(), logging.INFO),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        args.handler(args)
    except GestureError as e:
        logging.getLogger("app").error(f"{args.command}: {e}")
        return e.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())

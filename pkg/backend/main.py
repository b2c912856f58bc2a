import logging
import os
import sys
from typing import Sequence

from dotenv import load_dotenv

load_dotenv()

from commands import COMMANDS  # noqa: E402
from commands.common import CliParser  # noqa: E402
from services.errors import MMAError  # noqa: E402

logger = logging.getLogger(__name__)


def configure_logging() -> None:
    level = os.getenv("MMA_LOG_LEVEL", "INFO").upper()
    logging.basicConfig(
        level=getattr(logging, level, logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
        force=True,
    )


def build_parser() -> CliParser:
    parser = CliParser(prog="mma", description="Multi-manifold attention vision transformer toolkit")
    subparsers = parser.add_subparsers(dest="command", metavar="command", parser_class=CliParser)
    subparsers.required = True
    for command in COMMANDS:
        command.register(subparsers)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    configure_logging()
    try:
        args = build_parser().parse_args(argv)
        return args.handler(args)
    except MMAError as exc:
        logger.error("%s", exc)
        return exc.exit_code
    except Exception:
        logger.exception("unexpected failure")
        return 1


if __name__ == "__main__":
    sys.exit(main())

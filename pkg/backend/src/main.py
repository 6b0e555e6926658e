import argparse
import logging
import sys
from typing import List, Optional

from pydantic import ValidationError

from cli import data, evaluate, kg, train
from services.config import settings
from services.errors import DataError, NumericError, UsageError

logger = logging.getLogger(__name__)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class CommandParser(argparse.ArgumentParser):
    """argparse exits with 2 on bad flags; usage errors exit with 1 here."""

    def error(self, message: str) -> None:
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        sys.exit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    parser = CommandParser(prog="diffkg", description="Differentiable KG reasoning for dialogue responses")
    parser.add_argument("--verbose", action="store_true", help="Log at DEBUG level")
    subparsers = parser.add_subparsers(dest="command", required=True, parser_class=CommandParser)
    for module in (kg, data, train, evaluate):
        module.register(subparsers)
    return parser


def configure_logging(verbose: bool) -> None:
    level = logging.DEBUG if verbose else getattr(logging, settings.log_level.upper(), logging.INFO)
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    if settings.log_file:
        handler = logging.FileHandler(settings.log_file, encoding="utf-8")
        handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
        logging.getLogger().addHandler(handler)


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.verbose)

    try:
        return args.handler(args)
    except (ValidationError, UsageError) as e:
        logger.error(f"❌ Usage error: {e}")
        return EXIT_USAGE
    except (DataError, FileNotFoundError) as e:
        logger.error(f"❌ Data error: {e}")
        return EXIT_DATA
    except NumericError as e:
        logger.error(f"❌ Numeric failure: {e}")
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())

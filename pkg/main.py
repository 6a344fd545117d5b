"""
MVP Lesion Detection Toolkit - Main Entry Point
Command-line dispatch to one module per subcommand

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

import argparse
import logging
import sys
from typing import List, Optional

from commands import COMMANDS
from config import DEBUG_MODE, EXIT_DATA, EXIT_OK, EXIT_USAGE, LOG_FORMAT, VERBOSE_LOGGING
from errors import MvpError, UsageError

logger = logging.getLogger(__name__)


class CliParser(argparse.ArgumentParser):
    """ArgumentParser that raises UsageError instead of exiting"""

    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}\n{self.format_usage()}")


def build_parser() -> CliParser:
    parser = CliParser(
        prog="mvp",
        description="Multi-view, position-aware lesion detection on CT (toy scale)",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="Debug logging")
    subparsers = parser.add_subparsers(dest="command", metavar="command")
    for command in COMMANDS:
        command.add_parser(subparsers)
    return parser


def setup_logging(verbose: bool = False) -> None:
    """Logs go to stderr so command results on stdout stay byte-identical"""
    if verbose or DEBUG_MODE:
        level = logging.DEBUG
    elif VERBOSE_LOGGING:
        level = logging.INFO
    else:
        level = logging.WARNING
    logging.basicConfig(level=level, format=LOG_FORMAT, stream=sys.stderr, force=True)


def dispatch(argv: Optional[List[str]] = None) -> int:
    """
    Parse arguments and run a subcommand

    Args:
        argv: Arguments without the program name (defaults to sys.argv[1:])

    Returns:
        Process exit code
    """
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not args.command:
            raise UsageError(f"missing command\n{parser.format_usage()}")
    except UsageError as e:
        print(str(e), file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as e:
        # --help / --version
        return int(e.code or EXIT_OK)

    setup_logging(args.verbose)
    try:
        return args.run(args)
    except MvpError as e:
        logger.error("%s", e)
        return e.exit_code
    except (OSError, ValueError) as e:
        logger.error("%s: %s", type(e).__name__, e)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(dispatch())

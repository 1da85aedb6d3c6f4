"""Command-line entry point for the spectrum foundation model toolkit"""

import argparse
import logging
import sys
from typing import List, Optional

import torch

from . import __version__
from .commands import analysis, data, training
from .config import settings
from .errors import ConfigError, SpecfmError

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2

COMMAND_MODULES = (data, training, analysis)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """ArgumentParser that reports usage errors to the caller instead of exiting 2"""

    def error(self, message: str):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def common_options() -> argparse.ArgumentParser:
    """Flags every subcommand accepts"""
    parent = argparse.ArgumentParser(add_help=False)
    group = parent.add_argument_group("run options")
    group.add_argument("--config", help="key = value configuration file")
    group.add_argument(
        "--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
        help="override one configuration value (repeatable)",
    )
    group.add_argument("--seed", type=int, help="seed for every random stream of the run")
    group.add_argument("--log-level", help="logging level (default from SPECFM_LOG_LEVEL or INFO)")
    return parent


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="specfm", description="Spectrum foundation model toolkit")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    subparsers = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    subparsers.required = True
    parent = common_options()
    for module in COMMAND_MODULES:
        module.register(subparsers, parent)
    return parser


def configure_logging(level: Optional[str]) -> None:
    logging.basicConfig(
        level=(level or settings.log_level).upper(),
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
        stream=sys.stderr,
    )


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(str(e), file=sys.stderr)
        return EXIT_USAGE
    configure_logging(args.log_level)
    if settings.torch_threads:
        torch.set_num_threads(settings.torch_threads)

    try:
        args.handler(args)
    except ConfigError as e:
        logger.error(f"{args.command}: {e}")
        print(f"specfm {args.command}: {e}", file=sys.stderr)
        return EXIT_USAGE
    except SpecfmError as e:
        logger.error(f"{args.command}: {e.kind}: {e}")
        print(f"specfm {args.command}: {e}", file=sys.stderr)
        return EXIT_DATA
    except OSError as e:
        logger.error(f"{args.command}: {e}")
        print(f"specfm {args.command}: {e}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

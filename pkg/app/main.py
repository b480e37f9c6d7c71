"""
hlik: hierarchical-likelihood GLMM fitting, simulation and benchmarks.

Exit codes: 0 success, 1 configuration error, 2 data error, 3 numerical
failure.
"""

import argparse
import logging
import sys

from pydantic import ValidationError

from app.commands import bench, fit, oracle, schema, simulate, study
from app.config import get_settings
from app.errors import ConfigError, HlikError

log = logging.getLogger("app")


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    s = get_settings()
    parser = _Parser(prog="hlik", description=__doc__.strip().splitlines()[0])
    parser.add_argument(
        "--log-level",
        default=s.log_level,
        help="DEBUG, INFO, WARNING or ERROR (default HLIK_LOG_LEVEL)",
    )
    sub = parser.add_subparsers(
        dest="command", required=True, parser_class=_Parser
    )
    for command in (fit, simulate, study, oracle, bench, schema):
        command.register(sub)
    return parser


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except ConfigError as exc:
        sys.stderr.write(f"hlik: error: {exc.detail}\n")
        return exc.exit_code
    logging.basicConfig(
        level=args.log_level.upper(),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.handler(args)
    except ValidationError as exc:
        log.error("invalid configuration:\n%s", exc)
        return ConfigError.exit_code
    except HlikError as exc:
        log.error("%s: %s", type(exc).__name__, exc.detail)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())

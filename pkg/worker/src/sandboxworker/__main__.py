"""Entry point: ``python -m sandboxworker [--stderr-cap BYTES]``."""

from __future__ import annotations

import argparse
import sys

from . import DEFAULT_STDERR_CAP_BYTES, serve_once


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="sandboxworker")
    parser.add_argument(
        "--stderr-cap",
        type=int,
        default=DEFAULT_STDERR_CAP_BYTES,
        help="truncate captured stderr to this many bytes before transmission",
    )
    args = parser.parse_args(argv)
    return serve_once(sys.stdin, sys.stdout, stderr_cap=args.stderr_cap)


if __name__ == "__main__":
    sys.exit(main())

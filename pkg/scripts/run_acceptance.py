#!/usr/bin/env python3
"""Wrapper for `faultscope acceptance`."""

from __future__ import annotations

import sys

from faultscope.cli import main as cli_main


def main() -> int:
    return cli_main(["acceptance", *sys.argv[1:]])


if __name__ == "__main__":
    raise SystemExit(main())

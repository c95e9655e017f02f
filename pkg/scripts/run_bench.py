#!/usr/bin/env python
"""Cost scaling study: token-update and attention MACs versus pair count.

Usage: python scripts/run_bench.py [OUT_DIR]
"""

import sys

from particlesim.cli import main as cli_main


def run(argv=None):
    out = argv[0] if argv else "runs/bench"
    return cli_main(["bench", "--out", out])


if __name__ == "__main__":
    sys.exit(run(sys.argv[1:]))

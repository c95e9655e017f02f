#!/usr/bin/env python
"""Run the oracle verification suites (implicit-edge identity, sigma
recovery, gradient checks, neighbor-search equivalence).

Usage: python scripts/verify_identities.py [--fast]
"""

import sys

from particlesim.cli import main as cli_main


if __name__ == "__main__":
    sys.exit(cli_main(["verify"] + sys.argv[1:]))

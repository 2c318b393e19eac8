#!/usr/bin/env python3
"""Run the stent tracker command line: python3 stent_cli.py <command> [options]"""

import sys

from stent_tracker.cli import main

if __name__ == "__main__":
    sys.exit(main())

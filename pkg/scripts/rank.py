"""Test RMSE vs true rank with p equal to the rank.

Usage: python scripts/rank.py [--seed N] [--scale desk|paper] [--out DIR] [--threads N]
"""

import sys

from mlam.cli import main
from run_kind import run_kind

if __name__ == "__main__":
    sys.exit(run_kind(main, "bench", "mc-rank", sys.argv[1:]))

"""Test RMSE when the factor width p overshoots the true rank.

Usage: python scripts/blind_rank.py [--seed N] [--scale desk|paper] [--out DIR] [--threads N]
"""

import sys

from mlam.cli import main
from run_kind import run_kind

if __name__ == "__main__":
    sys.exit(run_kind(main, "bench", "mc-blind-p", sys.argv[1:]))

"""Test RMSE vs observation rate for MLAM, tuned SGD and ALS.

Usage: python scripts/obsrate.py [--seed N] [--scale desk|paper] [--out DIR] [--threads N]
"""

import sys

from mlam.cli import main
from run_kind import run_kind

if __name__ == "__main__":
    sys.exit(run_kind(main, "bench", "mc-obsrate", sys.argv[1:]))

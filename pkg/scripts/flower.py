"""MLAM and EM on the 8-petal flower mixture.

Usage: python scripts/flower.py [--seed N] [--scale desk|paper] [--out DIR] [--threads N]
"""

import sys

from mlam.cli import main
from run_kind import run_kind

if __name__ == "__main__":
    sys.exit(run_kind(main, "bench", "gmm-flower", sys.argv[1:]))

"""One MLAM trained on problems of mixed rank, scored per rank.

Usage: python scripts/mixed_rank.py [--seed N] [--scale desk|paper] [--out DIR] [--threads N]
"""

import sys

from mlam.cli import main
from run_kind import run_kind

if __name__ == "__main__":
    sys.exit(run_kind(main, "bench", "mc-mixed", sys.argv[1:]))

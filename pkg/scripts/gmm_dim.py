"""Per-sample NLL of MLAM and EM vs data dimension.

Usage: python scripts/gmm_dim.py [--seed N] [--scale desk|paper] [--out DIR] [--threads N]
"""

import sys

from mlam.cli import main
from run_kind import run_kind

if __name__ == "__main__":
    sys.exit(run_kind(main, "bench", "gmm-dim", sys.argv[1:]))

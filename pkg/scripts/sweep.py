"""Grid over inner steps t_in and meta-update period t_out.

Usage: python scripts/sweep.py [--seed N] [--scale desk|paper] [--out DIR] [--threads N]
"""

import sys

from mlam.cli import main
from run_kind import run_kind

if __name__ == "__main__":
    sys.exit(run_kind(main, "sweep", "sweep-tin-tout", sys.argv[1:]))

"""Entry point for running the toolkit from a checkout.

Usage:
    uv run python src/sparsefactor.py simulate --preset reference --out runs/sim
    uv run python src/sparsefactor.py run --preset simulation --out runs/full
"""

import sys

from cli.main import main

if __name__ == "__main__":
    sys.exit(main())

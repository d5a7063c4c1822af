"""Module entry point so ``python -m tarco`` mirrors the console script."""

import sys

from tarco.cli import main

if __name__ == "__main__":
    sys.exit(main())

"""Entry point for the spectrum foundation model toolkit"""

import sys

from specfm.cli import main

if __name__ == "__main__":
    sys.exit(main())

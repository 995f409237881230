"""Allow ``python -m ymwml`` as an alternative to the ``ymwml`` script."""

import sys

from .cli import main

if __name__ == "__main__":
    sys.exit(main())

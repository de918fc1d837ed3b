"""Entry point for one stage worker process: ``python -m cmt.serving.worker``.

Kept separate from the stage module (which the package imports) so running
it under ``-m`` does not execute the server code twice.
"""

import sys

from .stage import main

if __name__ == "__main__":
    sys.exit(main())

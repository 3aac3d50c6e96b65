"""Console entry point.

BLAS thread caps only take effect if the environment variables exist before
numpy first loads, so this module scans argv for ``--threads`` and exports
them without importing anything heavy; the real CLI is imported afterwards.
"""

import os
import sys

_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")


def _scan_threads(argv):
    for i, arg in enumerate(argv):
        if arg == "--threads":
            if i + 1 >= len(argv):
                return None, "option --threads needs a value"
            return argv[i + 1], None
        if arg.startswith("--threads="):
            return arg.split("=", 1)[1], None
    return None, None


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    raw, err = _scan_threads(argv)
    if err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    if raw is not None:
        if not raw.isdigit() or int(raw) < 1:
            print(f"error: --threads must be a positive integer, got {raw!r}",
                  file=sys.stderr)
            return 2
        for var in _THREAD_VARS:
            os.environ[var] = raw

    from .cli import run

    return run(argv)

"""Console entry point.

VOXELSR_THREADS caps internal parallelism; it must be applied to the BLAS
thread-pool environment variables before numpy is first imported, which is
why this module touches os.environ before pulling in the rest of the package.
"""

import os
import sys


def _apply_thread_cap():
    cap = os.environ.get("VOXELSR_THREADS")
    if not cap:
        return
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMEXPR_NUM_THREADS"):
        os.environ.setdefault(var, cap)


def main(argv=None) -> int:
    _apply_thread_cap()
    from .cli import main as cli_main

    return cli_main(argv)


if __name__ == "__main__":
    sys.exit(main())

"""Pin the suite to one BLAS/numba thread before numpy loads anywhere.

Determinism assertions (bit-identical reruns) assume single-threaded math,
and the acceptance runtime bounds are calibrated for it too.
"""

import os
import sys

for var in (
    "OMP_NUM_THREADS",
    "OPENBLAS_NUM_THREADS",
    "MKL_NUM_THREADS",
    "NUMEXPR_NUM_THREADS",
    "NUMBA_NUM_THREADS",
):
    os.environ.setdefault(var, "1")

sys.path.insert(0, os.path.dirname(__file__))

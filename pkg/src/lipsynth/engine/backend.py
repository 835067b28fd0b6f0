"""Kernel backend selection.

The hot kernels (im2col/col2im, pooling, LSTM recurrences, overlap-add) exist
twice: as numba @njit loops and as a pure-numpy fallback. ``LIPSYNTH_BACKEND``
picks which one the engine uses:

    LIPSYNTH_BACKEND=numba   jit kernels, error if numba is unavailable
    LIPSYNTH_BACKEND=numpy   pure numpy
    (unset)                  numba when importable, numpy otherwise

Matrix products run through BLAS on both paths; the backend only swaps the
data-movement and recurrence code, so results agree to float rounding.
"""

from __future__ import annotations

import os

_VALID = ("numba", "numpy")


def _select():
    flag = os.environ.get("LIPSYNTH_BACKEND", "").strip().lower()
    if flag and flag not in _VALID:
        raise ValueError(
            f"LIPSYNTH_BACKEND must be one of {_VALID}, got {flag!r}"
        )
    if flag == "numpy":
        from . import kernels_numpy

        return kernels_numpy, "numpy"
    try:
        from . import kernels_numba

        return kernels_numba, "numba"
    except ImportError:
        if flag == "numba":
            raise
        from . import kernels_numpy

        return kernels_numpy, "numpy"


kernels, name = _select()


def backend_name() -> str:
    """Name of the active kernel backend ('numba' or 'numpy')."""
    return name

"""Backend dispatch for the hot numeric kernels.

Two implementations with identical semantics: numba ``@njit`` loops and a
pure-numpy path (the convolutions there reduce to im2col + BLAS matmul).
Selection, at import time, via the ``EVSEG_BACKEND`` environment variable:

* ``auto`` (default) -- numba if importable, else numpy
* ``numba``          -- require numba, raise if missing
* ``numpy``          -- force the pure-numpy path

``benchmarks/bench_kernels.py`` compares the backends per kernel.
"""

import os

_choice = os.environ.get("EVSEG_BACKEND", "auto").lower()

if _choice not in ("auto", "numba", "numpy"):
    raise RuntimeError(f"EVSEG_BACKEND must be auto|numba|numpy, got {_choice!r}")

if _choice == "numpy":
    from . import numpy_impl as _impl
else:
    try:
        from . import numba_impl as _impl
    except ImportError:
        if _choice == "numba":
            raise
        from . import numpy_impl as _impl

voxel_accumulate = _impl.voxel_accumulate
event_automaton = _impl.event_automaton
conv2d_forward = _impl.conv2d_forward
conv2d_backward_input = _impl.conv2d_backward_input
conv2d_backward_params = _impl.conv2d_backward_params


def backend_name() -> str:
    """Name of the active kernel backend ("numba" or "numpy")."""
    return _impl.BACKEND

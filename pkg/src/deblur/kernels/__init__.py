"""Backend selection for the hot numeric kernels.

Two interchangeable implementations exist: a numba-jitted one (fast) and a
pure-numpy one (no extra dependency). The env var DEBLUR_KERNELS picks one:

    DEBLUR_KERNELS=auto   use numba when importable, else numpy (default)
    DEBLUR_KERNELS=numba  require numba, fail loudly if missing
    DEBLUR_KERNELS=numpy  force the pure-numpy fallback

DEBLUR_THREADS caps the numba thread pool (ignored on the numpy path).
benchmarks/bench_kernels.py compares the two backends.
"""

import os

_choice = os.environ.get("DEBLUR_KERNELS", "auto").strip().lower()
if _choice not in ("auto", "numba", "numpy"):
    raise ValueError(
        f"DEBLUR_KERNELS must be one of auto/numba/numpy, got {_choice!r}"
    )

_impl = None
if _choice in ("auto", "numba"):
    try:
        import numba as _nb

        _threads = os.environ.get("DEBLUR_THREADS")
        if _threads:
            _nb.set_num_threads(max(1, min(int(_threads), _nb.config.NUMBA_NUM_THREADS)))
        from . import _numba as _impl

        BACKEND = "numba"
    except ImportError:
        if _choice == "numba":
            raise
if _impl is None:
    from . import _numpy as _impl

    BACKEND = "numpy"

dwconv2d = _impl.dwconv2d
dwconv2d_weight_grad = _impl.dwconv2d_weight_grad
gelu_fwd = _impl.gelu_fwd
gelu_bwd = _impl.gelu_bwd


def backend_name():
    """Name of the active kernel backend ('numba' or 'numpy')."""
    return BACKEND

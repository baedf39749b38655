"""Build-time switches read once from the environment.

CLBENCH_DTYPE   real precision of tensors, ``float32`` (default) or ``float64``
CLBENCH_NUMBA   set to ``0`` to force the pure-numpy kernel path
"""
import os

import numpy as np

_dtype_name = os.environ.get("CLBENCH_DTYPE", "float32").lower()
if _dtype_name not in ("float32", "float64"):
    raise ValueError(f"CLBENCH_DTYPE must be float32 or float64, got {_dtype_name!r}")
DTYPE = np.dtype(_dtype_name)

USE_NUMBA = os.environ.get("CLBENCH_NUMBA", "1").strip().lower() not in ("0", "false", "no", "off")
if USE_NUMBA:
    try:
        import numba  # noqa: F401
    except ImportError:  # pragma: no cover - numba is optional
        USE_NUMBA = False

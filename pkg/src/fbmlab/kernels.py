"""Backend selection for the hot kernels.

The compiled extension is used when it imports; setting ``FBMLAB_PURE_PYTHON=1``
forces the numpy fallback. ``BACKEND`` names the active choice.
"""
import os

import numpy as np

from . import _kernels as python_backend

compiled_backend = None
if os.environ.get("FBMLAB_PURE_PYTHON", "").lower() not in ("1", "true", "yes"):
    try:
        from . import _ckernels as compiled_backend
    except ImportError:  # extension not built
        compiled_backend = None

_impl = compiled_backend if compiled_backend is not None else python_backend
BACKEND = "cython" if compiled_backend is not None else "python"


def holder_seminorm(times, values, gamma):
    return _impl.holder_seminorm(times, values, gamma)


def propagate_dbeta(A, A2, Q, Q2, jump, c, heun=True):
    args = [np.ascontiguousarray(a, dtype=float) for a in (A, A2, Q, Q2, jump, c)]
    return _impl.propagate_dbeta(*args, heun=bool(heun))

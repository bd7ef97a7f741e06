"""Numeric hot kernels with selectable backend.

Set ``BTLOC_KERNELS=numpy`` to force the pure-numpy fallback, or
``BTLOC_KERNELS=numba`` to require the compiled path (default: numba when
importable, numpy otherwise).  ``benchmarks/bench_kernels.py`` compares the
two directly.
"""

from __future__ import annotations

import logging
import os

_log = logging.getLogger(__name__)

_requested = os.environ.get("BTLOC_KERNELS", "auto").strip().lower()

if _requested in ("numpy", "np"):
    from . import numpy_impl as _impl
elif _requested == "numba":
    from . import numba_impl as _impl
elif _requested in ("auto", ""):
    try:
        from . import numba_impl as _impl
    except ImportError:  # pragma: no cover - depends on environment
        _log.warning("numba unavailable, falling back to numpy kernels")
        from . import numpy_impl as _impl
else:
    raise RuntimeError(f"BTLOC_KERNELS must be 'numba', 'numpy' or 'auto', got {_requested!r}")

IMPL_NAME = _impl.IMPL_NAME

propagate_mean = _impl.propagate_mean
motion_jacobian = _impl.motion_jacobian
process_noise_rate = _impl.process_noise_rate
predict_step = _impl.predict_step
gate_d2 = _impl.gate_d2
associate = _impl.associate
rigid_align = _impl.rigid_align
dr_propagate_batch = _impl.dr_propagate_batch

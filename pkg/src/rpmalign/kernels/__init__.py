"""Hot numeric kernels with selectable backend.

The numba backend is the default. Set ``RPM_ALIGN_NUMBA=0`` to force the
pure-numpy fallback (useful on platforms without a working numba, and for
the backend benchmark in ``rpmalign.benchmark``). Both backends are
deterministic; results agree to floating-point roundoff, not bitwise.
"""

from __future__ import annotations

import os

from . import _numpy

_FUNCS = (
    "pairwise_sqdist",
    "pairwise_sqdist_vjp",
    "sinkhorn_log_nograd",
    "sinkhorn_log_fwd",
    "sinkhorn_log_vjp",
    "segment_max",
    "radius_pairs",
    "ppf_rows",
)

__all__ = list(_FUNCS) + ["BACKEND"]


def _want_numba() -> bool:
    flag = os.environ.get("RPM_ALIGN_NUMBA", "1").strip().lower()
    return flag not in ("0", "false", "no", "off")


BACKEND = "numpy"
if _want_numba():
    try:
        from . import _numba as _impl

        BACKEND = "numba"
    except ImportError:
        _impl = _numpy
else:
    _impl = _numpy

for _name in _FUNCS:
    globals()[_name] = getattr(_impl, _name)
del _name

"""Backend selection for the aggregation kernels.

The compiled extension is used when it imports; set ``HYBRIDML_PURE_PYTHON=1``
to force the numpy fallback. Both backends produce identical bits.
"""
import os
from types import ModuleType

from . import _kernels_py

_compiled: ModuleType | None
try:
    from . import _kernels as _compiled  # type: ignore[attr-defined]
except ImportError:  # extension not built
    _compiled = None

if _compiled is not None and not os.environ.get("HYBRIDML_PURE_PYTHON"):
    _active: ModuleType = _compiled
    BACKEND = "cython"
else:
    _active = _kernels_py
    BACKEND = "python"


def available_backends() -> dict[str, ModuleType]:
    backends = {"python": _kernels_py}
    if _compiled is not None:
        backends["cython"] = _compiled
    return backends


def weighted_mean_rows(rows, weights):
    """Weighted mean of the rows of a 2-D array, summed in row order."""
    return _active.weighted_mean_rows(rows, weights)


def segment_weighted_mean(stack, seg_weights, fallback, seg_len):
    """Per-segment weighted mean with fallback for segments nobody sent.

    ``seg_weights[i, s] > 0`` means row ``i`` contributes segment ``s``.
    """
    return _active.segment_weighted_mean(stack, seg_weights, fallback, seg_len)

"""Kernel backend selection.

The hot per-pixel kernels exist twice: a Cython extension (``_native``) and a
pure numpy fallback (``fallback``). The compiled backend is picked at import
time when available; set ``PANU_BACKEND=fallback`` or ``PANU_BACKEND=native``
to force one. All scalar loss reductions go through :func:`tree_sum` so
results do not depend on the backend's internal summation order.
"""

import os

import numpy as np

from . import fallback

_requested = os.environ.get("PANU_BACKEND", "").strip().lower()
if _requested not in ("", "native", "fallback"):
    raise ImportError(f"PANU_BACKEND must be 'native' or 'fallback', got {_requested!r}")

try:
    from . import _native
except ImportError:
    _native = None
    if _requested == "native":
        raise

if _requested == "fallback" or _native is None:
    impl = fallback
else:
    impl = _native

es_per_pixel = impl.es_per_pixel
es_grad = impl.es_grad
nearest_center = impl.nearest_center
mode_votes = impl.mode_votes
nms_peaks = impl.nms_peaks
bin_stats = impl.bin_stats


def backend_name() -> str:
    return "native" if impl is _native else "fallback"


def native_available() -> bool:
    return _native is not None


def backends() -> dict:
    """Name -> module for every importable backend (used by tests and bench)."""
    out = {"fallback": fallback}
    if _native is not None:
        out["native"] = _native
    return out


def tree_sum(values) -> float:
    """Pairwise (tree) sum of a float64 array with a fixed association order.

    Deterministic for a given input regardless of backend or thread count;
    error grows O(log n) instead of O(n).
    """
    x = np.asarray(values, dtype=np.float64).ravel()
    if x.size == 0:
        return 0.0
    while x.size > 1:
        m = x.size // 2
        head = x[: 2 * m]
        paired = head[0::2] + head[1::2]
        if x.size % 2:
            paired = np.concatenate([paired, x[2 * m :]])
        x = paired
    return float(x[0])


def tree_mean(values) -> float:
    x = np.asarray(values, dtype=np.float64).ravel()
    if x.size == 0:
        return 0.0
    return tree_sum(x) / x.size

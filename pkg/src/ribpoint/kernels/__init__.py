"""Point-sampling kernels with a compiled core and a NumPy fallback.

The compiled Cython backend is preferred when importable; set
``RIBPOINT_KERNELS=python`` or ``RIBPOINT_KERNELS=cython`` to force one.
Both backends implement identical semantics (verified bit-exactly by the
parity tests), so the choice only affects speed.
"""

from __future__ import annotations

import importlib
import logging
import os

import numpy as np

from . import _pykern

__all__ = [
    "farthest_point_sample",
    "ball_query",
    "three_nn",
    "backend_name",
    "available_backends",
]

logger = logging.getLogger(__name__)

_requested = os.environ.get("RIBPOINT_KERNELS", "auto").lower()
_compiled = None
if _requested in ("auto", "cython"):
    try:
        _compiled = importlib.import_module("._ckern", __name__)
    except ImportError:
        if _requested == "cython":
            raise
        logger.debug("compiled kernels unavailable; using NumPy fallback")
elif _requested != "python":
    raise ValueError(f"RIBPOINT_KERNELS must be auto, python or cython, "
                     f"got {_requested!r}")

_impl = _compiled if _compiled is not None else _pykern


def backend_name() -> str:
    """Name of the active kernel backend ('cython' or 'python')."""
    return "cython" if _impl is not _pykern else "python"


def available_backends() -> dict[str, object]:
    """Importable backend modules by name (for parity tests and benchmarks)."""
    out = {"python": _pykern}
    if _compiled is not None:
        out["cython"] = _compiled
    return out


def _as_points(a, name: str) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[1] != 3:
        raise ValueError(f"{name} must be an (N, 3) array, got shape {a.shape}")
    return a


def farthest_point_sample(coords, m: int, seed: int, *, impl=None) -> np.ndarray:
    """Greedy max-min selection of ``m`` point indices.

    The start index is ``seed % N``; each later pick maximizes the minimum
    squared distance to the already-selected set, ties to the lowest index.
    """
    coords = _as_points(coords, "coords")
    n = coords.shape[0]
    if n == 0:
        raise ValueError("cannot sample from an empty point set")
    if not 1 <= m <= n:
        raise ValueError(f"need 1 <= m <= N, got m={m}, N={n}")
    start = int(seed) % n
    return (impl or _impl).fps(coords, m, start)


def ball_query(centers, coords, radius: float, nsample: int, *, impl=None) -> np.ndarray:
    """Fixed-radius groups: per center, the first ``nsample`` in-radius
    indices in ascending order; short groups pad with their first hit and
    empty groups pad with the nearest point overall."""
    centers = _as_points(centers, "centers")
    coords = _as_points(coords, "coords")
    if not radius > 0:
        raise ValueError(f"radius must be positive, got {radius}")
    if nsample < 1:
        raise ValueError(f"nsample must be >= 1, got {nsample}")
    if coords.shape[0] == 0:
        raise ValueError("cannot query an empty point set")
    return (impl or _impl).ball_query(centers, coords, float(radius), nsample)


def three_nn(query, ref, k: int = 3, *, impl=None) -> tuple[np.ndarray, np.ndarray]:
    """k nearest reference points per query, ordered by (distance, index).

    Returns (indices (Q, k) int64, squared distances (Q, k) float64).
    """
    query = _as_points(query, "query")
    ref = _as_points(ref, "ref")
    if not 1 <= k <= ref.shape[0]:
        raise ValueError(f"need 1 <= k <= len(ref), got k={k}, len(ref)={ref.shape[0]}")
    return (impl or _impl).three_nn(query, ref, k)

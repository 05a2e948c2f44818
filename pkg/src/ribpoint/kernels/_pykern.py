"""NumPy implementations of the hot point-sampling kernels.

These are the reference semantics; the compiled backend must match them
bit for bit (float64 accumulation, x/y/z term order, lowest-index tie
breaks), which the parity tests assert.
"""

import numpy as np


def fps(coords: np.ndarray, m: int, start: int) -> np.ndarray:
    """Greedy max-min selection of ``m`` indices starting at ``start``."""
    n = coords.shape[0]
    selected = np.empty(m, dtype=np.int64)
    selected[0] = start
    min_d2 = np.full(n, np.inf)
    last = start
    for i in range(1, m):
        diff = coords - coords[last]
        d2 = diff[:, 0] * diff[:, 0] + diff[:, 1] * diff[:, 1] + diff[:, 2] * diff[:, 2]
        np.minimum(min_d2, d2, out=min_d2)
        last = int(np.argmax(min_d2))  # first occurrence wins ties
        selected[i] = last
    return selected


def ball_query(centers: np.ndarray, coords: np.ndarray,
               radius: float, nsample: int) -> np.ndarray:
    """Per center: first ``nsample`` in-radius indices in ascending order.

    Short groups pad with their first hit; empty groups pad with the
    nearest point overall.
    """
    m = centers.shape[0]
    r2 = radius * radius
    out = np.empty((m, nsample), dtype=np.int64)
    for j in range(m):
        diff = coords - centers[j]
        d2 = diff[:, 0] * diff[:, 0] + diff[:, 1] * diff[:, 1] + diff[:, 2] * diff[:, 2]
        hits = np.nonzero(d2 <= r2)[0]
        if hits.size:
            take = hits[:nsample]
            out[j, :take.size] = take
            out[j, take.size:] = take[0]
        else:
            out[j, :] = int(np.argmin(d2))
    return out


def three_nn(query: np.ndarray, ref: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """k nearest refs per query, ordered by (distance, index)."""
    q = query.shape[0]
    m = ref.shape[0]
    idx_out = np.empty((q, k), dtype=np.int64)
    d2_out = np.empty((q, k), dtype=np.float64)
    # Chunk rows so the (rows, m) distance matrix stays small.
    rows_per_chunk = max(1, int(4_000_000 // max(m, 1)))
    for s in range(0, q, rows_per_chunk):
        qc = query[s:s + rows_per_chunk]
        diff = qc[:, None, :] - ref[None, :, :]
        d2 = (diff[:, :, 0] * diff[:, :, 0]
              + diff[:, :, 1] * diff[:, :, 1]
              + diff[:, :, 2] * diff[:, :, 2])
        if k == m:
            part = np.broadcast_to(np.arange(m, dtype=np.int64), d2.shape).copy()
        else:
            part = np.argpartition(d2, kth=k - 1, axis=1)[:, :k].astype(np.int64)
        sub = np.take_along_axis(d2, part, axis=1)
        order = np.lexsort((part, sub), axis=1)
        idx_out[s:s + qc.shape[0]] = np.take_along_axis(part, order, axis=1)
        d2_out[s:s + qc.shape[0]] = np.take_along_axis(sub, order, axis=1)
    return idx_out, d2_out

"""Per-rib centerline extraction.

Each rib mask is dilated into a solid tube, endpoints are picked
deterministically as the geodesic diameter of that region (double
breadth-first sweep), and the centerline is the shortest path between
them on the 26-neighbourhood graph, weighted to prefer voxels deep
inside the region.  The raw voxel path is then smoothed and resampled to
uniform arc length.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import dijkstra as _csgraph_dijkstra

from .volume import BinaryMask, StructuringElement, morph

__all__ = ["Centerline", "extract_centerline", "smooth_resample"]

logger = logging.getLogger(__name__)


@dataclass
class Centerline:
    """Ordered polyline along one rib, in millimetres."""

    points: np.ndarray  # (M, 3) float64
    arc_length: float

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[1] != 3:
            raise ValueError(f"points must be (M, 3), got {self.points.shape}")


def _polyline_length(points: np.ndarray) -> float:
    if len(points) < 2:
        return 0.0
    return float(np.linalg.norm(np.diff(points, axis=0), axis=1).sum())


_NEIGHBOR_OFFSETS = np.array(
    [(dz, dy, dx)
     for dz in (-1, 0, 1) for dy in (-1, 0, 1) for dx in (-1, 0, 1)
     if (dz, dy, dx) != (0, 0, 0)],
    dtype=np.int64)


def _region_graph(region: np.ndarray, spacing, weight_by_depth: bool):
    """CSR graph over foreground voxels of a (small, cropped) region.

    Edge weight = Euclidean step length, optionally scaled by the
    medialness penalty 1 / (1 + boundary distance of the target voxel).
    """
    nz, ny, nx = region.shape
    flat_ids = -np.ones(region.shape, dtype=np.int64)
    zz, yy, xx = np.nonzero(region)
    n = zz.size
    flat_ids[zz, yy, xx] = np.arange(n)
    if weight_by_depth:
        depth = ndimage.distance_transform_edt(region, sampling=spacing[::-1])
        penalty = 1.0 / (1.0 + depth)
    sx, sy, sz = spacing
    rows, cols, weights = [], [], []
    for dz, dy, dx in _NEIGHBOR_OFFSETS:
        tz, ty, tx = zz + dz, yy + dy, xx + dx
        ok = ((0 <= tz) & (tz < nz) & (0 <= ty) & (ty < ny)
              & (0 <= tx) & (tx < nx))
        ok[ok] &= region[tz[ok], ty[ok], tx[ok]]
        src = flat_ids[zz[ok], yy[ok], xx[ok]]
        dst = flat_ids[tz[ok], ty[ok], tx[ok]]
        step = np.sqrt((dx * sx) ** 2 + (dy * sy) ** 2 + (dz * sz) ** 2)
        w = np.full(src.size, step)
        if weight_by_depth:
            w *= penalty[tz[ok], ty[ok], tx[ok]]
        rows.append(src)
        cols.append(dst)
        weights.append(w)
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    weights = np.concatenate(weights)
    graph = csr_matrix((weights, (rows, cols)), shape=(n, n))
    return graph, np.stack([zz, yy, xx], axis=1)


def _farthest_from(graph, start: int) -> np.ndarray:
    dist = _csgraph_dijkstra(graph, indices=start)
    dist[np.isinf(dist)] = -1.0
    return dist


def _snap_medial(dist: np.ndarray, depth: np.ndarray) -> int:
    """Pick the most medial voxel inside the far end-cap region.

    The raw geodesic-diameter endpoint sits on the region's rim; among
    voxels whose distance is within one cap-length of the maximum, the
    highest boundary distance (ties to lowest index) recenters it.
    """
    margin = 2.0 * float(depth.max()) + 1.0
    cap = dist >= dist.max() - margin
    best = np.flatnonzero(cap & (depth == depth[cap].max()))
    return int(best[0])


def extract_centerline(rib: BinaryMask,
                       se: StructuringElement = StructuringElement(3, "ball"),
                       vertebra: BinaryMask | None = None,
                       smooth_window: int = 5,
                       resample_step_mm: float = 2.0) -> Centerline:
    """Centerline of one connected rib component.

    Endpoint selection is deterministic rather than random: a double
    sweep finds the geodesic diameter, then each endpoint snaps to the
    most medial voxel of its end cap so the path enters and leaves on the
    tube axis.  The shortest path itself prefers medial voxels.  The
    polyline is oriented posterior-to-anterior: it starts at the endpoint
    nearer the vertebra when a vertebra mask is given, else at the
    endpoint with the larger y coordinate.
    """
    if not rib.bits.any():
        raise ValueError("rib mask is empty")
    sx, sy, sz = rib.spacing
    if rib.count == 1:
        logger.warning("single-voxel rib: degenerate one-point centerline")
        zz, yy, xx = np.nonzero(rib.bits)
        pt = np.array([[(xx[0] + 0.5) * sx, (yy[0] + 0.5) * sy, (zz[0] + 0.5) * sz]])
        return Centerline(pt, 0.0)

    dilated = morph(rib, se, "dilate")

    # Crop to the dilated bounding box: the graph stays small.
    zz, yy, xx = np.nonzero(dilated.bits)
    z0, z1 = zz.min(), zz.max() + 1
    y0, y1 = yy.min(), yy.max() + 1
    x0, x1 = xx.min(), xx.max() + 1
    region = dilated.bits[z0:z1, y0:y1, x0:x1]

    plain, coords = _region_graph(region, rib.spacing, weight_by_depth=False)
    depth_grid = ndimage.distance_transform_edt(region, sampling=rib.spacing[::-1])
    depth = depth_grid[region]
    lowest = 0  # first foreground voxel in scan order
    u = _snap_medial(_farthest_from(plain, lowest), depth)
    v = _snap_medial(_farthest_from(plain, u), depth)
    u = _snap_medial(_farthest_from(plain, v), depth)

    weighted, _ = _region_graph(region, rib.spacing, weight_by_depth=True)
    dist, pred = _csgraph_dijkstra(weighted, indices=u, return_predecessors=True)
    if np.isinf(dist[v]):
        raise ValueError("endpoints are not connected inside the dilated region")
    path = [v]
    while path[-1] != u:
        path.append(int(pred[path[-1]]))
    path = np.array(path[::-1])

    vox = coords[path] + np.array([z0, y0, x0])
    mm = np.empty((len(vox), 3), dtype=np.float64)
    mm[:, 0] = (vox[:, 2] + 0.5) * sx
    mm[:, 1] = (vox[:, 1] + 0.5) * sy
    mm[:, 2] = (vox[:, 0] + 0.5) * sz

    poly = smooth_resample(mm, window=smooth_window, step=resample_step_mm)

    if vertebra is not None and vertebra.bits.any():
        vzz, vyy, vxx = np.nonzero(vertebra.bits)
        ref = np.stack([(vxx + 0.5) * sx, (vyy + 0.5) * sy, (vzz + 0.5) * sz], axis=1)
        d_start = np.min(np.linalg.norm(ref - poly[0], axis=1))
        d_end = np.min(np.linalg.norm(ref - poly[-1], axis=1))
        if d_end < d_start:
            poly = poly[::-1].copy()
    elif poly[-1, 1] > poly[0, 1]:  # +y is posterior
        poly = poly[::-1].copy()

    return Centerline(poly, _polyline_length(poly))


def smooth_resample(polyline: np.ndarray, window: int, step: float) -> np.ndarray:
    """Centered moving average (edges clamped), then uniform arc-length
    resampling.  The original endpoints are preserved exactly."""
    polyline = np.asarray(polyline, dtype=np.float64)
    if polyline.ndim != 2 or polyline.shape[1] != 3 or len(polyline) < 2:
        raise ValueError("polyline must be (M, 3) with M >= 2")
    if step <= 0:
        raise ValueError(f"step must be positive, got {step}")
    if window < 1:
        raise ValueError(f"window must be >= 1, got {window}")
    if window % 2 == 0:
        window += 1

    if window > 1:
        half = window // 2
        padded = np.concatenate([np.repeat(polyline[:1], half, axis=0),
                                 polyline,
                                 np.repeat(polyline[-1:], half, axis=0)])
        kernel = np.ones(window) / window
        smoothed = np.stack(
            [np.convolve(padded[:, c], kernel, mode="valid") for c in range(3)],
            axis=1)
        smoothed[0] = polyline[0]
        smoothed[-1] = polyline[-1]
    else:
        smoothed = polyline

    seg = np.linalg.norm(np.diff(smoothed, axis=0), axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    total = cum[-1]
    if total == 0:
        return smoothed[:1].copy()
    n_samples = max(2, int(round(total / step)) + 1)
    targets = np.linspace(0.0, total, n_samples)
    out = np.empty((n_samples, 3), dtype=np.float64)
    for c in range(3):
        out[:, c] = np.interp(targets, cum, smoothed[:, c])
    out[0] = smoothed[0]
    out[-1] = smoothed[-1]
    return out

"""Back from sparse predictions to dense masks and anatomical rib instances."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .pointcloud import NormTransform, PointSet
from .volume import (BinaryMask, LabelMap, StructuringElement,
                     connected_components, intersect, morph)

__all__ = ["RibInstance", "points_to_voxel_mask", "label_rib_instances",
           "instances_manifest"]

logger = logging.getLogger(__name__)

EXPECTED_INSTANCE_RANGE = (20, 24)
MIN_INSTANCE_VOXELS = 50
MAX_PAIRS = 12


@dataclass(frozen=True)
class RibInstance:
    """One rib: instance id, body side, and pair index counted from the top."""

    instance_id: int
    side: str  # "left" | "right"
    pair_index: int  # 1..12, superior first
    voxel_count: int

    def __post_init__(self):
        if self.side not in ("left", "right"):
            raise ValueError(f"side must be 'left' or 'right', got {self.side!r}")
        if not 1 <= self.pair_index <= MAX_PAIRS:
            raise ValueError(f"pair_index must be in [1, {MAX_PAIRS}]")


def points_to_voxel_mask(pred: PointSet, t: NormTransform | None,
                         binarized: BinaryMask,
                         se: StructuringElement = StructuringElement(2, "ball"),
                         ) -> BinaryMask:
    """Positively-predicted points -> voxels, dilated, clipped to the
    binarized mask.  The output is always a subset of ``binarized``.

    Points map to voxels through ``voxel_index`` back-references when
    present, otherwise by inverting the normalization transform.
    """
    if pred.labels is None:
        raise ValueError("prediction point set has no labels")
    nx, ny, nz = binarized.dims
    positive = pred.labels.astype(bool)
    seed_bits = np.zeros(binarized.bits.shape, dtype=bool)
    if pred.voxel_index is not None:
        flat = pred.voxel_index[positive]
        if flat.size and (flat.min() < 0 or flat.max() >= nx * ny * nz):
            raise ValueError("voxel_index out of range for the binarized grid")
        seed_bits.reshape(-1)[flat] = True
    else:
        if t is None:
            raise ValueError("need voxel_index or a NormTransform to invert")
        mm = t.invert(pred.coords[positive])
        sx, sy, sz = binarized.spacing
        ix = np.floor(mm[:, 0] / sx).astype(np.int64)
        iy = np.floor(mm[:, 1] / sy).astype(np.int64)
        iz = np.floor(mm[:, 2] / sz).astype(np.int64)
        ok = ((0 <= ix) & (ix < nx) & (0 <= iy) & (iy < ny) & (0 <= iz) & (iz < nz))
        if not ok.all():
            raise ValueError("inverted point coordinates fall outside the grid")
        seed_bits[iz, iy, ix] = True
    seeds = BinaryMask(binarized.dims, binarized.spacing, seed_bits)
    out = intersect(morph(seeds, se, "dilate"), binarized)
    assert not np.any(out.bits & ~binarized.bits), "containment violated"
    return out


def _split_bilateral(labels: np.ndarray, midline: float, band: float = 1.0):
    """Split components that span the sagittal midline into two halves."""
    x_coord = np.arange(labels.shape[2], dtype=np.float64)
    next_id = labels.max() + 1
    for k in range(1, labels.max() + 1):
        comp = labels == k
        if not comp.any():
            continue
        xs = x_coord[comp.any(axis=(0, 1))]
        if xs.min() < midline - band and xs.max() > midline + band:
            right = comp & (x_coord[None, None, :] >= midline)
            labels[right] = next_id
            next_id += 1
    return labels


def label_rib_instances(ribs: BinaryMask,
                        min_voxels: int = MIN_INSTANCE_VOXELS,
                        ) -> tuple[LabelMap, list[RibInstance]]:
    """Connected rib components -> anatomically ordered instances.

    Side comes from the component centroid relative to the sagittal
    midline (median x of all rib voxels); pair index is the rank of the
    centroid's z within its side, superior first.  Instances are numbered
    top to bottom, left before right.  Counts outside the expected range
    log a warning; components ranked beyond pair 12 are dropped.
    """
    empty = LabelMap(ribs.dims, ribs.spacing,
                     np.zeros(ribs.bits.shape, dtype=np.int32))
    if not ribs.bits.any():
        return empty, []

    cc = connected_components(ribs, connectivity=26)
    labels = cc.labels.copy()
    sizes = np.bincount(labels.ravel())
    for k in range(1, labels.max() + 1):
        if sizes[k] < min_voxels:
            labels[labels == k] = 0

    zz, yy, xx = np.nonzero(labels > 0)
    if xx.size == 0:
        return empty, []
    midline = float(np.median(xx))
    labels = _split_bilateral(labels, midline)

    comps = []
    for k in np.unique(labels):
        if k == 0:
            continue
        comp = labels == k
        count = int(comp.sum())
        if count < min_voxels:
            labels[comp] = 0
            continue
        czz, _, cxx = np.nonzero(comp)
        comps.append({
            "old": int(k),
            "cx": float(cxx.mean()),
            "cz": float(czz.mean()),
            "count": count,
        })

    for c in comps:
        c["side"] = "left" if c["cx"] < midline else "right"
    for side in ("left", "right"):
        group = sorted((c for c in comps if c["side"] == side),
                       key=lambda c: -c["cz"])  # superior (high z) first
        for rank, c in enumerate(group, start=1):
            c["pair"] = rank

    kept = [c for c in comps if c["pair"] <= MAX_PAIRS]
    dropped = [c for c in comps if c["pair"] > MAX_PAIRS]
    if dropped:
        logger.warning("dropping %d components ranked beyond pair %d",
                       len(dropped), MAX_PAIRS)

    # top to bottom, left before right
    kept.sort(key=lambda c: (c["pair"], 0 if c["side"] == "left" else 1))
    out = np.zeros_like(labels)
    instances = []
    for new_id, c in enumerate(kept, start=1):
        out[labels == c["old"]] = new_id
        instances.append(RibInstance(new_id, c["side"], c["pair"], c["count"]))

    n = len(instances)
    lo, hi = EXPECTED_INSTANCE_RANGE
    if n and not lo <= n <= hi:
        logger.warning("found %d rib instances, outside the expected [%d, %d]",
                       n, lo, hi)
    return LabelMap(ribs.dims, ribs.spacing, out), instances


def instances_manifest(instances: list[RibInstance]) -> dict:
    """Sidecar manifest for an instance label map."""
    return {
        "instances": [
            {"id": i.instance_id, "side": i.side, "pair_index": i.pair_index,
             "voxel_count": i.voxel_count}
            for i in instances
        ]
    }

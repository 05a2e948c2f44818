"""Dense volume types and voxel-domain operations.

Conventions used throughout the package:

* Voxel data is stored z-major: a C-ordered array of shape
  ``(nz, ny, nx)`` indexed ``data[z, y, x]``, so axial slices are
  contiguous.  ``dims`` is always reported as ``(nx, ny, nz)``.
* ``spacing`` is millimetres per voxel along (x, y, z).
* Linear voxel indices are flat indices into the z-major array.
* Morphology uses Euclidean balls measured in voxel units; anisotropic
  spacing is honoured later, in point coordinates, not here.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

__all__ = [
    "Volume",
    "BinaryMask",
    "LabelMap",
    "StructuringElement",
    "binarize",
    "morph",
    "intersect",
    "connected_components",
    "remove_exterior",
    "separate_ribs_from_vertebra",
    "BONE_HU_THRESHOLD",
    "BODY_HU_THRESHOLD",
]

BONE_HU_THRESHOLD = 200
BODY_HU_THRESHOLD = -200
MIN_COMPONENT_VOXELS = 50


def _check_grid(dims, spacing, data, expected_dtype):
    nx, ny, nz = dims
    if min(nx, ny, nz) <= 0:
        raise ValueError(f"dims must be positive, got {dims}")
    sp = np.asarray(spacing, dtype=np.float64)
    if sp.shape != (3,) or not np.all(np.isfinite(sp)) or np.any(sp <= 0):
        raise ValueError(f"spacing must be three finite positive values, got {spacing}")
    if data.shape != (nz, ny, nx):
        raise ValueError(f"data shape {data.shape} does not match dims {dims} "
                         f"(expected z-major {(nz, ny, nx)})")
    if data.dtype != expected_dtype:
        raise ValueError(f"expected dtype {expected_dtype}, got {data.dtype}")


@dataclass
class Volume:
    """A dense grid of HU intensities with physical voxel spacing."""

    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    data: np.ndarray  # int16, shape (nz, ny, nx)

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        self.spacing = tuple(float(s) for s in self.spacing)
        self.data = np.ascontiguousarray(self.data)
        _check_grid(self.dims, self.spacing, self.data, np.dtype(np.int16))

    @property
    def voxel_count(self) -> int:
        return int(self.data.size)


@dataclass
class BinaryMask:
    """One boolean per voxel on the same grid convention as Volume."""

    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    bits: np.ndarray  # bool, shape (nz, ny, nx)

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        self.spacing = tuple(float(s) for s in self.spacing)
        self.bits = np.ascontiguousarray(self.bits)
        _check_grid(self.dims, self.spacing, self.bits, np.dtype(np.bool_))

    @property
    def count(self) -> int:
        return int(np.count_nonzero(self.bits))

    def like(self, bits: np.ndarray) -> "BinaryMask":
        return BinaryMask(self.dims, self.spacing, bits.astype(bool))


@dataclass
class LabelMap:
    """Integer instance labels per voxel; 0 is background, ids run 1..K."""

    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    labels: np.ndarray  # int32, shape (nz, ny, nx)

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        self.spacing = tuple(float(s) for s in self.spacing)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int32)
        _check_grid(self.dims, self.spacing, self.labels, np.dtype(np.int32))
        if self.labels.size and self.labels.min() < 0:
            raise ValueError("labels must be non-negative")

    @property
    def num_instances(self) -> int:
        return int(self.labels.max(initial=0))

    def instance_mask(self, instance_id: int) -> BinaryMask:
        return BinaryMask(self.dims, self.spacing, self.labels == instance_id)

    def foreground(self) -> BinaryMask:
        return BinaryMask(self.dims, self.spacing, self.labels > 0)


@dataclass(frozen=True)
class StructuringElement:
    """Ball or cube neighbourhood of a given voxel radius; radius 0 is identity."""

    radius: int = 1
    shape: str = "ball"
    _offsets: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.radius < 0:
            raise ValueError("radius must be non-negative")
        if self.shape not in ("ball", "cube"):
            raise ValueError(f"unknown structuring element shape {self.shape!r}")
        object.__setattr__(self, "_offsets", self._build_offsets())

    def _build_offsets(self) -> np.ndarray:
        r = self.radius
        ax = np.arange(-r, r + 1)
        dz, dy, dx = np.meshgrid(ax, ax, ax, indexing="ij")
        if self.shape == "ball":
            keep = dx * dx + dy * dy + dz * dz <= r * r
        else:
            keep = np.ones(dx.shape, dtype=bool)
        return np.stack([dz[keep], dy[keep], dx[keep]], axis=1)

    def footprint(self) -> np.ndarray:
        """Dense boolean footprint of shape (2r+1,)*3 for scipy morphology."""
        r = self.radius
        fp = np.zeros((2 * r + 1,) * 3, dtype=bool)
        off = self._offsets + r
        fp[off[:, 0], off[:, 1], off[:, 2]] = True
        return fp

    @property
    def offsets(self) -> np.ndarray:
        """(K, 3) array of (dz, dy, dx) offsets inside the element."""
        return self._offsets


def _connectivity_structure(connectivity: int) -> np.ndarray:
    if connectivity == 6:
        return ndimage.generate_binary_structure(3, 1)
    if connectivity == 18:
        return ndimage.generate_binary_structure(3, 2)
    if connectivity == 26:
        return ndimage.generate_binary_structure(3, 3)
    raise ValueError(f"connectivity must be 6, 18 or 26, got {connectivity}")


def binarize(v: Volume, threshold: int = BONE_HU_THRESHOLD) -> BinaryMask:
    """Foreground is every voxel with HU >= threshold (inclusive)."""
    return BinaryMask(v.dims, v.spacing, v.data >= threshold)


def morph(m: BinaryMask, se: StructuringElement, mode: str) -> BinaryMask:
    """Binary dilation or erosion with the given structuring element."""
    if mode not in ("dilate", "erode"):
        raise ValueError(f"mode must be 'dilate' or 'erode', got {mode!r}")
    if se.radius == 0:
        return m.like(m.bits.copy())
    fp = se.footprint()
    if mode == "dilate":
        out = ndimage.binary_dilation(m.bits, structure=fp)
    else:
        out = ndimage.binary_erosion(m.bits, structure=fp, border_value=0)
    return m.like(out)


def intersect(a: BinaryMask, b: BinaryMask) -> BinaryMask:
    """Voxelwise AND of two masks on the same grid."""
    if a.dims != b.dims:
        raise ValueError(f"mask dims differ: {a.dims} vs {b.dims}")
    return a.like(a.bits & b.bits)


def connected_components(m: BinaryMask, connectivity: int = 26) -> LabelMap:
    """Label connected foreground, ids 1..K in decreasing component size.

    Size ties keep scipy's scan order, so the result is deterministic.
    """
    structure = _connectivity_structure(connectivity)
    raw, k = ndimage.label(m.bits, structure=structure)
    if k == 0:
        return LabelMap(m.dims, m.spacing, np.zeros_like(raw, dtype=np.int32))
    sizes = np.bincount(raw.ravel())[1:]  # index 0 is background
    order = np.argsort(-sizes, kind="stable")  # big first, ties by scan order
    remap = np.zeros(k + 1, dtype=np.int32)
    remap[order + 1] = np.arange(1, k + 1, dtype=np.int32)
    return LabelMap(m.dims, m.spacing, remap[raw])


def remove_exterior(v: Volume,
                    bone_threshold: int = BONE_HU_THRESHOLD,
                    body_threshold: int = BODY_HU_THRESHOLD) -> BinaryMask:
    """Binarized bone voxels restricted to the body region.

    The body is the largest above-air connected component (6-connectivity,
    HU >= ``body_threshold``) after hole filling, which drops the scanner
    table and other high-density objects surrounded by air.
    """
    above_air = v.data >= body_threshold
    if not above_air.any():
        return BinaryMask(v.dims, v.spacing, np.zeros_like(above_air))
    structure = _connectivity_structure(6)
    raw, k = ndimage.label(above_air, structure=structure)
    sizes = np.bincount(raw.ravel())
    sizes[0] = 0
    body = raw == np.argmax(sizes)
    body = ndimage.binary_fill_holes(body)
    return BinaryMask(v.dims, v.spacing, (v.data >= bone_threshold) & body)


def separate_ribs_from_vertebra(
    bone: BinaryMask,
    erosion_radius: int = 2,
    corridor_fraction: float = 0.25,
    reconstruct_margin: int = 1,
) -> tuple[BinaryMask, BinaryMask]:
    """Split a body-interior bone mask into (ribs, vertebra).

    Erosion breaks the thin costovertebral bridges; eroded components that
    intersect a central sagittal corridor (a fraction of the bone bounding
    box's x-extent) seed the vertebra, which is re-expanded into the bone
    mask.  Everything else seeds the ribs: connected components of the
    remaining bone that contain a rib seed.  Outputs are disjoint and
    contained in the input.
    """
    empty = bone.like(np.zeros_like(bone.bits))
    if not bone.bits.any():
        return empty, empty.like(np.zeros_like(bone.bits))

    eroded = morph(bone, StructuringElement(erosion_radius, "ball"), "erode")

    x_any = bone.bits.any(axis=(0, 1))
    xs = np.nonzero(x_any)[0]
    x_lo, x_hi = xs[0], xs[-1]
    center = 0.5 * (x_lo + x_hi)
    half_width = 0.5 * corridor_fraction * (x_hi - x_lo + 1)
    x_idx = np.arange(bone.dims[0])
    corridor_cols = np.abs(x_idx - center) <= half_width

    seeds = connected_components(eroded, connectivity=26)
    vertebra_seed = np.zeros_like(bone.bits)
    rib_seed = np.zeros_like(bone.bits)
    for k in range(1, seeds.num_instances + 1):
        comp = seeds.labels == k
        if comp[:, :, corridor_cols].any():
            vertebra_seed |= comp
        else:
            rib_seed |= comp

    if vertebra_seed.any():
        grow = StructuringElement(erosion_radius + reconstruct_margin, "ball")
        vertebra_bits = ndimage.binary_dilation(vertebra_seed, structure=grow.footprint())
        vertebra_bits &= bone.bits
    else:
        vertebra_bits = np.zeros_like(bone.bits)

    remainder = bone.bits & ~vertebra_bits
    ribs_bits = np.zeros_like(bone.bits)
    if rib_seed.any() and remainder.any():
        comp_labels, n = ndimage.label(remainder, structure=_connectivity_structure(26))
        if n:
            seeded = np.unique(comp_labels[rib_seed & remainder])
            seeded = seeded[seeded > 0]
            if seeded.size:
                ribs_bits = np.isin(comp_labels, seeded)

    return bone.like(ribs_bits), bone.like(vertebra_bits)

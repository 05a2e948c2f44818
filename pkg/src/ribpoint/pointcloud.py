"""Sparse point sets: voxel conversion, normalization, sampling, augmentation.

Point coordinates are physical millimetres (voxel center = (index + 0.5)
times spacing) so anisotropic spacing is respected before the network
sees anything.  Coordinates are kept in float64; file and network layers
downcast to float32 at their own boundaries.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import io, rng
from .volume import BinaryMask, LabelMap

__all__ = [
    "PointSet",
    "NormTransform",
    "AugmentConfig",
    "voxels_to_points",
    "normalize",
    "random_downsample",
    "augment",
    "load_points",
    "save_points",
]


@dataclass
class PointSet:
    """N points with optional per-point class labels and voxel back-references.

    ``labels``: 0 = non-rib bone, 1 = rib.  ``voxel_index``: flat indices
    into the originating z-major grid, carried so predictions can be
    mapped back onto voxels without inverting coordinates.
    """

    coords: np.ndarray  # (N, 3) float64, millimetres (or normalized units)
    labels: np.ndarray | None = None  # (N,) uint8
    voxel_index: np.ndarray | None = None  # (N,) int64

    def __post_init__(self):
        self.coords = np.ascontiguousarray(self.coords, dtype=np.float64)
        if self.coords.ndim != 2 or self.coords.shape[1] != 3:
            raise ValueError(f"coords must be (N, 3), got {self.coords.shape}")
        if not np.all(np.isfinite(self.coords)):
            raise ValueError("coords must be finite")
        n = self.coords.shape[0]
        if self.labels is not None:
            self.labels = np.ascontiguousarray(self.labels, dtype=np.uint8)
            if self.labels.shape != (n,):
                raise ValueError("labels length must equal point count")
        if self.voxel_index is not None:
            self.voxel_index = np.ascontiguousarray(self.voxel_index, dtype=np.int64)
            if self.voxel_index.shape != (n,):
                raise ValueError("voxel_index length must equal point count")

    def __len__(self) -> int:
        return self.coords.shape[0]

    def take(self, idx: np.ndarray) -> "PointSet":
        return PointSet(
            self.coords[idx],
            None if self.labels is None else self.labels[idx],
            None if self.voxel_index is None else self.voxel_index[idx],
        )


@dataclass(frozen=True)
class NormTransform:
    """Centroid shift + isotropic scale mapping points into the unit ball."""

    centroid: tuple[float, float, float]
    scale: float

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError(f"scale must be positive, got {self.scale}")

    def apply(self, coords: np.ndarray) -> np.ndarray:
        return (coords - np.asarray(self.centroid)) / self.scale

    def invert(self, coords: np.ndarray) -> np.ndarray:
        return coords * self.scale + np.asarray(self.centroid)


@dataclass(frozen=True)
class AugmentConfig:
    """Training-time augmentation magnitudes, in normalized units."""

    scale_range: tuple[float, float] = (0.9, 1.1)
    translate_range: float = 0.1
    jitter_sigma: float = 0.01
    jitter_clip: float = 0.05

    def __post_init__(self):
        lo, hi = self.scale_range
        if not (0 < lo <= hi):
            raise ValueError(f"scale_range must satisfy 0 < lo <= hi, got {self.scale_range}")
        if self.jitter_clip < 0:
            raise ValueError("jitter_clip must be non-negative")


def voxels_to_points(m: BinaryMask, labels: LabelMap | None = None) -> PointSet:
    """One point per foreground voxel, at the voxel center in millimetres."""
    if labels is not None and labels.dims != m.dims:
        raise ValueError(f"label dims {labels.dims} do not match mask dims {m.dims}")
    zz, yy, xx = np.nonzero(m.bits)
    sx, sy, sz = m.spacing
    coords = np.empty((zz.size, 3), dtype=np.float64)
    coords[:, 0] = (xx + 0.5) * sx
    coords[:, 1] = (yy + 0.5) * sy
    coords[:, 2] = (zz + 0.5) * sz
    nx, ny = m.dims[0], m.dims[1]
    flat = (zz.astype(np.int64) * ny + yy) * nx + xx
    point_labels = None
    if labels is not None:
        point_labels = (labels.labels[zz, yy, xx] > 0).astype(np.uint8)
    return PointSet(coords, point_labels, flat)


def normalize(p: PointSet) -> tuple[PointSet, NormTransform]:
    """Center on the centroid and scale the farthest point onto the unit sphere.

    A single point (or any zero-radius set) keeps scale 1 so the transform
    stays invertible.
    """
    if len(p) == 0:
        raise ValueError("cannot normalize an empty point set")
    centroid = p.coords.mean(axis=0)
    shifted = p.coords - centroid
    radius = float(np.sqrt((shifted * shifted).sum(axis=1).max()))
    scale = radius if radius > 0 else 1.0
    t = NormTransform(tuple(float(c) for c in centroid), scale)
    return PointSet(shifted / scale, p.labels, p.voxel_index), t


def random_downsample(p: PointSet, n: int, seed: int) -> PointSet:
    """Sample ``n`` points, deterministically per seed.

    With N >= n the sample is uniform without replacement.  With N < n
    every point is kept once and the remainder is drawn with replacement,
    so downstream batch shapes stay fixed; the result is shuffled.
    """
    if n <= 0:
        raise ValueError(f"sample size must be positive, got {n}")
    if len(p) == 0:
        raise ValueError("cannot sample from an empty point set")
    g = rng.generator(seed)
    n_in = len(p)
    if n_in >= n:
        idx = g.choice(n_in, size=n, replace=False)
    else:
        extra = g.integers(0, n_in, size=n - n_in, dtype=np.int64)
        idx = np.concatenate([np.arange(n_in, dtype=np.int64), extra])
        g.shuffle(idx)
    return p.take(idx)


def augment(p: PointSet, cfg: AugmentConfig, seed: int) -> PointSet:
    """Global scale + translation, then clipped per-point Gaussian jitter.

    Draw order (Philox stream): 1 uniform scale, 3 uniform translations,
    then N x 3 normal jitter.  Labels and back-references are untouched.
    """
    g = rng.generator(seed)
    lo, hi = cfg.scale_range
    s = g.uniform(lo, hi)
    t = g.uniform(-cfg.translate_range, cfg.translate_range, size=3)
    coords = p.coords * s + t
    if cfg.jitter_sigma > 0:
        jitter = g.standard_normal(size=coords.shape) * cfg.jitter_sigma
        np.clip(jitter, -cfg.jitter_clip, cfg.jitter_clip, out=jitter)
        coords = coords + jitter
    return PointSet(coords, p.labels, p.voxel_index)


def save_points(p: PointSet, path) -> None:
    io.write_rpts(p.coords, p.labels, path)


def load_points(path) -> PointSet:
    coords, labels = io.read_rpts(path)
    return PointSet(coords, labels)

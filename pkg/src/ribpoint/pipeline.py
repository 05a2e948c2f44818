"""End-to-end wiring shared by the CLI and the acceptance experiments."""

from __future__ import annotations

import numpy as np

from .nn import ModelParams, infer
from .pointcloud import PointSet, normalize, random_downsample, voxels_to_points
from .postprocess import points_to_voxel_mask
from .volume import BinaryMask, LabelMap, StructuringElement, Volume, binarize, remove_exterior

__all__ = ["bone_mask", "segment_volume", "point_dice_against_truth"]


def bone_mask(volume: Volume, raw: bool = False, threshold: int = 200) -> BinaryMask:
    """Candidate bone voxels: body-interior by default, plain threshold with
    ``raw=True``."""
    if raw:
        return binarize(volume, threshold)
    return remove_exterior(volume, bone_threshold=threshold)


def segment_volume(model: ModelParams, volume: Volume, n_points: int = 250000,
                   seed: int = 0, raw: bool = False, threshold: int = 200,
                   dilate_radius: int = 2, chunk: int = 65536,
                   ) -> tuple[BinaryMask, PointSet, BinaryMask]:
    """Binarize, sample, segment, and convert back to a voxel mask.

    Returns (predicted mask, predicted point set with labels and voxel
    back-references, binarized mask).
    """
    bone = bone_mask(volume, raw=raw, threshold=threshold)
    if not bone.bits.any():
        empty = BinaryMask(volume.dims, volume.spacing,
                           np.zeros(bone.bits.shape, dtype=bool))
        return empty, PointSet(np.empty((0, 3))), bone
    pts = voxels_to_points(bone)
    normed, t = normalize(pts)
    sampled = random_downsample(normed, n_points, seed=seed)
    labels, _probs = infer(model, sampled, chunk=chunk)
    pred_points = PointSet(sampled.coords, labels, sampled.voxel_index)
    mask = points_to_voxel_mask(pred_points, t, bone,
                                StructuringElement(dilate_radius, "ball"))
    return mask, pred_points, bone


def point_dice_against_truth(pred_points: PointSet, gt: LabelMap) -> float:
    """Sparse point-level Dice: predicted vs ground-truth labels over the
    same sampled indices (looked up through voxel back-references)."""
    if pred_points.voxel_index is None or pred_points.labels is None:
        raise ValueError("need voxel back-references and predicted labels")
    truth = gt.labels.reshape(-1)[pred_points.voxel_index] > 0
    pred = pred_points.labels.astype(bool)
    denom = int(truth.sum()) + int(pred.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((truth & pred).sum()) / denom

"""Sparse point-cloud rib segmentation pipeline.

Dense CT volumes are binarized at a bone threshold, converted to point
sets, segmented by a set-abstraction point network, and post-processed
back to voxel masks, rib instances, and per-rib centerlines.  A phantom
generator provides desk-scale volumes with exact ground truth.
"""

__version__ = "0.1.0"

from .errors import FormatError, RibPointError, UnsupportedFeatureError

__all__ = [
    "FormatError",
    "RibPointError",
    "UnsupportedFeatureError",
    "__version__",
]

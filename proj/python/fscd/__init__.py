"""Exemplar-conditioned object counting and detection.

Thin Python face over the C++ core: geometry and matching utilities,
counting/detection metrics, synthetic scene generation, and model
checkpoint loading with thresholded prediction.
"""

try:
    # Wheel layout: the extension lives inside the package.
    from ._fscd import (
        FscdError,
        Model,
        average_precision,
        counting_errors,
        generate_synthetic,
        giou,
        hungarian_match,
        iou,
        make_anchor_points,
    )
except ImportError:
    # In-tree builds put the extension directly on PYTHONPATH.
    from _fscd import (
        FscdError,
        Model,
        average_precision,
        counting_errors,
        generate_synthetic,
        giou,
        hungarian_match,
        iou,
        make_anchor_points,
    )

__all__ = [
    "FscdError",
    "Model",
    "average_precision",
    "counting_errors",
    "generate_synthetic",
    "giou",
    "hungarian_match",
    "iou",
    "make_anchor_points",
]

"""Observed point sets from target label probability maps."""

import logging
from typing import Optional

import numpy as np

from .errors import NoEvidenceError, ValidationError
from .model import LabelProbMap, PointSet

DEFAULT_THRESHOLD = 0.01
DEFAULT_STRIDE = 2

module_logger = logging.getLogger(__name__)


def extract_points(prob_map: LabelProbMap, threshold: float = DEFAULT_THRESHOLD) -> PointSet:
    """One point per pixel whose best facade label reaches the threshold.

    Points are in row-major order and carry all K prior values.
    """
    if not 0.0 < threshold < 1.0:
        raise ValidationError(f"threshold must lie in (0, 1), got {threshold}")
    probs = prob_map.probs.astype(np.float64)
    keep = probs.max(axis=2) >= threshold
    ys, xs = np.nonzero(keep)  # row-major
    if len(xs) == 0:
        raise NoEvidenceError(
            f"no facade evidence: no pixel reaches probability {threshold}"
        )
    xy = np.column_stack([xs, ys]).astype(np.float64)
    return PointSet(xy, probs[ys, xs, :], prob_map.dims, prob_map.labels)


def downsample(
    points: PointSet, stride: int, logger: Optional[logging.Logger] = None
) -> PointSet:
    """Keep points with x and y both multiples of stride; same coordinate frame."""
    if int(stride) != stride or stride < 1:
        raise ValidationError(f"stride must be a positive integer, got {stride}")
    if stride == 1:
        return points
    coords = np.rint(points.xy).astype(np.int64)
    keep = (coords[:, 0] % stride == 0) & (coords[:, 1] % stride == 0)
    if not keep.any():
        (logger or module_logger).warning(
            f"Downsampling {len(points)} points with stride {stride} left nothing, "
            f"using the full set"
        )
        return points
    return points.subset(keep)

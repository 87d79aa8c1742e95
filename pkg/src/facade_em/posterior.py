"""Posterior label transfer from EM responsibilities back to pixel space."""

from typing import NamedTuple

import numpy as np

from .errors import ValidationError
from .model import LabelProbMap, LpMixtureModel, PointSet, Responsibilities


class PointPosterior(NamedTuple):
    """Per-point posterior: label masses (N, K) and outlier mass (N,)."""

    labels: np.ndarray
    outlier: np.ndarray


def posterior_labels(
    points: PointSet, resp: Responsibilities, model: LpMixtureModel
) -> PointPosterior:
    """Sum component responsibilities per label; outlier mass is gamma."""
    if resp.beta.shape != (len(points), len(model)):
        raise ValidationError(
            f"responsibilities {resp.beta.shape} do not match "
            f"{len(points)} points and {len(model)} components"
        )
    if len(points.labels) != len(model.labels):
        raise ValidationError("point priors and model use different label sets")
    per_label = np.zeros((len(points), len(model.labels)))
    # column j accumulates beta over the components of label j
    np.add.at(per_label.T, model.label_index, resp.beta.T)
    return PointPosterior(per_label, resp.gamma.copy())


def render_posterior_map(
    points: PointSet, posteriors: PointPosterior, prior_map: LabelProbMap
) -> LabelProbMap:
    """Write point posteriors into a copy of the prior map.

    Outlier mass goes to the implicit non-facade residual (1 - sum of labels);
    pixels that are not points keep their prior values.
    """
    if points.source_dims != prior_map.dims:
        raise ValidationError(
            f"points come from a {points.source_dims} map, prior map is {prior_map.dims}"
        )
    probs = np.array(prior_map.probs, dtype=np.float32, copy=True)
    if len(points):
        cols = np.rint(points.xy[:, 0]).astype(np.intp)
        rows = np.rint(points.xy[:, 1]).astype(np.intp)
        values = np.clip(posteriors.labels, 0.0, 1.0)
        totals = values.sum(axis=1)
        # float32 rounding can push a row just above 1
        over = totals > 1.0
        if over.any():
            values[over] /= totals[over, None]
        probs[rows, cols, :] = values.astype(np.float32)
    return LabelProbMap(prior_map.labels, probs)


def argmax_label_image(prob_map: LabelProbMap) -> np.ndarray:
    """Indexed label image: j + 1 for the winning label j, 0 where the residual wins."""
    probs = prob_map.probs.astype(np.float64)
    residual = np.clip(1.0 - probs.sum(axis=2), 0.0, None)
    best = probs.argmax(axis=2)
    best_mass = probs.max(axis=2)
    image = np.where(best_mass > residual, best + 1, 0)
    return image.astype(np.uint8 if len(prob_map.labels) < 255 else np.uint16)


def label_accuracy(
    prob_map: LabelProbMap, truth: np.ndarray, mask: np.ndarray
) -> float:
    """Fraction of masked pixels whose argmax label equals the true indexed label."""
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (prob_map.height, prob_map.width):
        raise ValidationError("accuracy mask does not match the map dimensions")
    if not mask.any():
        raise ValidationError("accuracy mask selects no pixel")
    predicted = argmax_label_image(prob_map)
    return float(np.mean(predicted[mask] == np.asarray(truth)[mask]))

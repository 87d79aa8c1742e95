"""Registration error metrics, cumulative histograms and the grid oracle."""

import math
from dataclasses import dataclass
from typing import Callable, Iterable, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import minimize_scalar
from scipy.special import logsumexp

from .errors import ValidationError
from .model import (
    LpMixtureModel,
    PointSet,
    Similarity,
    TransformState,
    axis_mass,
    dirichlet_log_prior,
    even_power,
    log_normalization_constant,
    log_outlier_density,
    log_prior_columns,
    map_objective,
)

DEFAULT_TRANSLATION_THRESHOLDS = (0.25, 0.5, 1.0, 2.0, 5.0, 10.0)
DEFAULT_SCALE_THRESHOLDS = (0.0025, 0.005, 0.01, 0.02, 0.05)

POLISH_SWEEPS = 20
POLISH_TOL = 1e-9
CHUNK_ELEMENTS = 4_000_000


class RegError(NamedTuple):
    """Translation error in pixels and relative scale error."""

    dt: float
    ds: float


def registration_error(estimate: Sequence[float], truth: Sequence[float]) -> RegError:
    tx, ty, s = estimate
    tx_true, ty_true, s_true = truth
    if not s_true > 0:
        raise ValidationError(f"true scale must be positive, got {s_true}")
    return RegError(math.hypot(tx - tx_true, ty - ty_true), abs(s - s_true) / s_true)


def cumulative_histogram(values: Iterable[float], thresholds: Sequence[float]) -> List[float]:
    """Fraction of values <= each threshold."""
    data = np.sort(np.asarray(list(values), dtype=np.float64))
    if data.size == 0:
        raise ValidationError("histogram needs at least one value")
    counts = np.searchsorted(data, np.asarray(thresholds, dtype=np.float64), side="right")
    return [float(c) / data.size for c in counts]


@dataclass
class HistogramTable:
    """Cumulative normalized histograms of translation and scale errors."""

    translation_thresholds: Tuple[float, ...]
    translation: List[float]
    scale_thresholds: Tuple[float, ...]
    scale: List[float]
    runs: int

    def rows(self) -> List[Tuple[str, float, float]]:
        translation = zip(self.translation_thresholds, self.translation)
        scale = zip(self.scale_thresholds, self.scale)
        return [("translation_px", t, f) for t, f in translation] + [
            ("scale_rel", t, f) for t, f in scale
        ]

    def to_tsv(self, generated_at: Optional[str] = None) -> str:
        lines = []
        if generated_at:
            lines.append(f"# generated_at={generated_at}")
        lines.append(f"# runs={self.runs}")
        lines.append("metric\tthreshold\tfraction")
        for metric, threshold, fraction in self.rows():
            lines.append(f"{metric}\t{threshold:g}\t{fraction:.6f}")
        return "\n".join(lines) + "\n"


def evaluate(
    results: Sequence[RegError],
    translation_thresholds: Sequence[float] = DEFAULT_TRANSLATION_THRESHOLDS,
    scale_thresholds: Sequence[float] = DEFAULT_SCALE_THRESHOLDS,
) -> HistogramTable:
    """Cumulative normalized histograms over registration runs."""
    if not results:
        raise ValidationError("evaluation needs at least one result")
    t_thresholds = tuple(sorted(float(t) for t in translation_thresholds))
    s_thresholds = tuple(sorted(float(t) for t in scale_thresholds))
    return HistogramTable(
        t_thresholds,
        cumulative_histogram((r.dt for r in results), t_thresholds),
        s_thresholds,
        cumulative_histogram((r.ds for r in results), s_thresholds),
        len(results),
    )


class GridRange(NamedTuple):
    """Inclusive range start..stop sampled every step."""

    start: float
    stop: float
    step: float

    def values(self) -> np.ndarray:
        if not all(math.isfinite(v) for v in self) or self.step <= 0 or self.stop < self.start:
            raise ValidationError(f"invalid grid range {tuple(self)}")
        count = int(math.floor((self.stop - self.start) / self.step + 1e-9)) + 1
        return self.start + self.step * np.arange(count)  # type: ignore[no-any-return]


DEFAULT_ORACLE_RANGES = (
    GridRange(-40.0, 40.0, 0.5),
    GridRange(-40.0, 40.0, 0.5),
    GridRange(0.6, 1.6, 0.01),
)


class OracleResult(NamedTuple):
    similarity: Similarity
    objective: float
    grid_similarity: Similarity
    grid_objective: float


def polish(
    objective: Callable[[Similarity], float],
    start: Similarity,
    steps: Sequence[float],
) -> Tuple[Similarity, float]:
    """Coordinate ascent, each coordinate searched within one grid step."""
    theta = list(start)
    best = objective(Similarity(*theta))
    for _ in range(POLISH_SWEEPS):
        previous = best
        for axis, step in enumerate(steps):
            low, high = theta[axis] - step, theta[axis] + step
            if axis == 2:
                low = max(low, 1e-9)

            def negative(value: float, axis: int = axis) -> float:
                trial = list(theta)
                trial[axis] = value
                return -objective(Similarity(*trial))

            found = minimize_scalar(negative, bounds=(low, high), method="bounded")
            if -found.fun > best:
                theta[axis] = float(found.x)
                best = -float(found.fun)
        if best - previous <= POLISH_TOL * max(1.0, abs(best)):
            break
    return Similarity(*theta), best


def grid_argmax(
    objective: Callable[[Similarity], float],
    ranges: Sequence[GridRange],
    refine: bool = True,
) -> OracleResult:
    """Exhaustive maximization of any objective over a (tx, ty, s) grid."""
    axes = [r.values() for r in ranges]
    best_value = -math.inf
    best = None
    for s in axes[2]:
        if s <= 0:
            continue
        for tx in axes[0]:
            for ty in axes[1]:
                value = objective(Similarity(float(tx), float(ty), float(s)))
                if value > best_value:
                    best_value, best = value, Similarity(float(tx), float(ty), float(s))
    if best is None:
        raise ValidationError("grid has no cell with positive scale")
    if not refine:
        return OracleResult(best, best_value, best, best_value)
    polished, value = polish(objective, best, [r.step for r in ranges])
    return OracleResult(polished, value, best, best_value)


def _objective_over_ty(
    points: PointSet,
    model: LpMixtureModel,
    log_weights: np.ndarray,
    log_prior: np.ndarray,
    log_lambda: float,
    tx: float,
    s: float,
    tys: np.ndarray,
    clip_to_image: bool = True,
) -> np.ndarray:
    """Sum of ln D_i for every ty in tys at fixed (tx, s)."""
    p = model.p
    width, height = points.source_dims
    ux = (points.xy[:, 0:1] - (model.centers[None, :, 0] * s + tx)) / s
    column = log_weights - log_normalization_constant(model.spreads, s, p)
    if clip_to_image:
        x_mass = axis_mass(model.centers[:, 0], model.spreads[:, 0], tx, s, width, p)
        column = column - x_mass.log
    base = column[None, :] + log_prior - even_power(ux, p) / model.spreads[None, :, 0]
    n, m = base.shape
    chunk = max(1, CHUNK_ELEMENTS // max(1, n * m))
    out = np.empty(len(tys))
    for start in range(0, len(tys), chunk):
        ty = tys[start : start + chunk]
        centers_y = model.centers[None, :, 1] * s + ty[:, None]  # (T, M)
        uy = (points.xy[None, :, 1:2] - centers_y[:, None, :]) / s  # (T, N, M)
        log_num = base[None, :, :] - even_power(uy, p) / model.spreads[None, None, :, 1]
        if clip_to_image:
            y_mass = axis_mass(
                model.centers[:, 1], model.spreads[:, 1], ty[:, None], s, height, p
            )
            log_num -= y_mass.log[:, None, :]
        with np.errstate(divide="ignore", invalid="ignore"):
            log_d = np.logaddexp(logsumexp(log_num, axis=2), log_lambda)
        out[start : start + len(ty)] = log_d.sum(axis=1)
    return out


def grid_oracle(
    points: PointSet,
    model: LpMixtureModel,
    weights: Optional[np.ndarray] = None,
    outlier_rate: float = 0.1,
    ranges: Sequence[GridRange] = DEFAULT_ORACLE_RANGES,
    refine: bool = True,
    clip_to_image: bool = True,
) -> OracleResult:
    """argmax of map_objective over a grid of (tx, ty, s) at fixed weights and alpha.

    Result is independent of point order.
    """
    if len(points) == 0:
        raise ValidationError("oracle needs at least one point")
    weights = model.weights if weights is None else np.asarray(weights, dtype=np.float64)
    with np.errstate(divide="ignore"):
        log_weights = np.log(weights)
    log_prior = log_prior_columns(points, model)
    log_lambda = log_outlier_density(outlier_rate, points.image_area)
    prior_term = dirichlet_log_prior(weights, model.dirichlet)

    tx_values, ty_values, s_values = (r.values() for r in ranges)
    best_value = -math.inf
    best = None
    for s in s_values:
        if s <= 0:
            continue
        for tx in tx_values:
            values = _objective_over_ty(
                points,
                model,
                log_weights,
                log_prior,
                log_lambda,
                float(tx),
                float(s),
                ty_values,
                clip_to_image,
            )
            k = int(np.argmax(values))
            if values[k] > best_value:
                best_value = float(values[k])
                best = Similarity(float(tx), float(ty_values[k]), float(s))
    if best is None:
        raise ValidationError("grid has no cell with positive scale")
    best_value += prior_term

    def objective(sim: Similarity) -> float:
        state = TransformState(sim.tx, sim.ty, sim.s, weights, outlier_rate)
        return map_objective(points, model, state, clip_to_image)

    if not refine:
        return OracleResult(best, best_value, best, best_value)
    polished, value = polish(objective, best, [r.step for r in ranges])
    return OracleResult(polished, value, best, best_value)

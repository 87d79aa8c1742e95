"""Reference model construction from a ground-truth facade segmentation."""

import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np
from scipy import ndimage
from scipy.special import gammaln

from .errors import EmptyModelError, ValidationError
from .model import LabelSet, LpComponent, LpMixtureModel, check_exponent

MIN_COMPONENT_PX = 4
VARIANCE_FLOOR = 0.25  # px^2

# Gauss-Newton settings for the shape fit.
REFINE_MAX_ITERS = 50
REFINE_STEP_TOL = 1e-6
REFINE_WINDOW_DILATION = 0.5
REFINE_SPREAD_BOX = (0.25, 4.0)
LM_INITIAL_DAMPING = 1e-3
LM_DAMPING_FACTOR = 10.0
LM_MAX_DAMPING = 1e12

module_logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class ReferenceSegmentation:
    """Indexed mask of the reference image: 0 = background, j + 1 = label j."""

    labels: LabelSet
    mask: np.ndarray

    def __post_init__(self) -> None:
        mask = np.array(self.mask, copy=True)
        if mask.ndim != 2:
            raise ValidationError(f"segmentation mask must be 2D, got {mask.shape}")
        if not np.issubdtype(mask.dtype, np.integer):
            raise ValidationError("segmentation mask must hold integers")
        mask = mask.astype(np.int32)
        if mask.size and (mask.min() < 0 or mask.max() > len(self.labels)):
            raise ValidationError(
                f"mask values must lie in 0..{len(self.labels)}, "
                f"found {mask.min()}..{mask.max()}"
            )
        mask.setflags(write=False)
        object.__setattr__(self, "mask", mask)

    @property
    def height(self) -> int:
        return int(self.mask.shape[0])

    @property
    def width(self) -> int:
        return int(self.mask.shape[1])


@dataclass(frozen=True, eq=False)
class ConnectedComponent:
    """4-connected pixel blob of one label; pixels as (x, y) rows."""

    label_index: int
    pixels: np.ndarray

    def __len__(self) -> int:
        return int(self.pixels.shape[0])

    @property
    def bbox(self) -> Tuple[int, int, int, int]:
        """(x_min, y_min, x_max, y_max), inclusive."""
        x_min, y_min = self.pixels.min(axis=0)
        x_max, y_max = self.pixels.max(axis=0)
        return int(x_min), int(y_min), int(x_max), int(y_max)


@dataclass
class RefineResult:
    """Outcome of the Gauss-Newton shape fit of one component."""

    component: LpComponent
    initial_cost: float
    final_cost: float
    iterations: int
    cost_trace: List[float] = field(default_factory=list)
    status: str = "ok"  # ok, clamped, diverged, no_improvement

    @property
    def flagged(self) -> bool:
        return self.status in ("clamped", "diverged")


def extract_components(
    seg: ReferenceSegmentation, min_component_px: int = MIN_COMPONENT_PX
) -> List[ConnectedComponent]:
    """4-connected components per label, dropping blobs below min_component_px."""
    structure = ndimage.generate_binary_structure(2, 1)
    components = []
    for j in range(len(seg.labels)):
        labeled, count = ndimage.label(seg.mask == j + 1, structure=structure)
        if count == 0:
            continue
        for k, window in enumerate(ndimage.find_objects(labeled), start=1):
            if window is None:
                continue
            ys, xs = np.nonzero(labeled[window] == k)
            if len(xs) < min_component_px:
                continue
            pixels = np.column_stack(
                [xs + window[1].start, ys + window[0].start]
            ).astype(np.int64)
            components.append(ConnectedComponent(j, pixels))
    if not components:
        raise EmptyModelError("empty reference model")
    return components


def spread_constant(p: int) -> float:
    """c_p with Var[exp(-|x|^p / S)] = S^(2/p) / c_p, i.e. Gamma(1/p) / Gamma(3/p)."""
    return math.exp(gammaln(1.0 / p) - gammaln(3.0 / p))


def moment_init(cc: ConnectedComponent, p: int) -> LpComponent:
    """Centre at the pixel mean, spreads matched to the pixel variances."""
    p = check_exponent(p)
    coords = cc.pixels.astype(np.float64)
    mean = coords.mean(axis=0)
    var = np.maximum(coords.var(axis=0), VARIANCE_FLOOR)
    spread = (spread_constant(p) * var) ** (p / 2.0)
    return LpComponent(cc.label_index, (mean[0], mean[1]), (spread[0], spread[1]))


def _refine_window(cc: ConnectedComponent) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Pixel grid of the dilated bounding box and the component indicator on it."""
    x_min, y_min, x_max, y_max = cc.bbox
    pad_x = int(math.ceil(REFINE_WINDOW_DILATION * (x_max - x_min + 1)))
    pad_y = int(math.ceil(REFINE_WINDOW_DILATION * (y_max - y_min + 1)))
    x0, y0 = x_min - pad_x, y_min - pad_y
    width = x_max - x_min + 1 + 2 * pad_x
    height = y_max - y_min + 1 + 2 * pad_y
    indicator = np.zeros((height, width), dtype=np.float64)
    indicator[cc.pixels[:, 1] - y0, cc.pixels[:, 0] - x0] = 1.0
    qy, qx = np.mgrid[y0 : y0 + height, x0 : x0 + width]
    return qx.ravel().astype(np.float64), qy.ravel().astype(np.float64), indicator.ravel()


def _shape_residuals(
    params: np.ndarray, qx: np.ndarray, qy: np.ndarray, target: np.ndarray, p: int
) -> Tuple[np.ndarray, np.ndarray]:
    """Residual 1_cc(q) - exp(-||q - mu||^p) and its Jacobian in
    (mu_x, mu_y, ln sxx, ln syy)."""
    mx, my, log_sx, log_sy = params
    sx, sy = math.exp(log_sx), math.exp(log_sy)
    dx = qx - mx
    dy = qy - my
    tx = dx**p / sx
    ty = dy**p / sy
    g = np.exp(-(tx + ty))
    r = target - g
    jac = np.empty((len(r), 4))
    # dr/dtheta = g * dn/dtheta
    jac[:, 0] = g * (-p * dx ** (p - 1) / sx)
    jac[:, 1] = g * (-p * dy ** (p - 1) / sy)
    jac[:, 2] = g * (-tx)
    jac[:, 3] = g * (-ty)
    return r, jac


def shape_cost(cc: ConnectedComponent, component: LpComponent, p: int) -> float:
    """Sum of squared indicator residuals over the dilated window."""
    qx, qy, target = _refine_window(cc)
    params = np.array(
        [
            component.center[0],
            component.center[1],
            math.log(component.spread[0]),
            math.log(component.spread[1]),
        ]
    )
    r, _ = _shape_residuals(params, qx, qy, target, p)
    return float(r @ r)


def refine_component(
    cc: ConnectedComponent,
    init: LpComponent,
    p: int,
    max_iters: int = REFINE_MAX_ITERS,
    step_tol: float = REFINE_STEP_TOL,
) -> RefineResult:
    """Levenberg-damped Gauss-Newton fit of the component's Lp shape to its pixels."""
    p = check_exponent(p)
    qx, qy, target = _refine_window(cc)
    start = np.array(
        [init.center[0], init.center[1], math.log(init.spread[0]), math.log(init.spread[1])]
    )
    r, jac = _shape_residuals(start, qx, qy, target, p)
    initial_cost = float(r @ r)
    params, cost = start.copy(), initial_cost
    trace = [initial_cost]
    damping = LM_INITIAL_DAMPING
    iterations = 0

    while iterations < max_iters:
        iterations += 1
        normal = jac.T @ jac
        grad = jac.T @ r
        lhs = normal + damping * np.diag(np.diag(normal) + 1e-12)
        try:
            step = np.linalg.solve(lhs, -grad)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(lhs, -grad, rcond=None)[0]
        if not np.all(np.isfinite(step)):
            return RefineResult(init, initial_cost, initial_cost, iterations, trace, "diverged")
        trial = params + step
        trial_r, trial_jac = _shape_residuals(trial, qx, qy, target, p)
        trial_cost = float(trial_r @ trial_r)
        if not math.isfinite(trial_cost):
            return RefineResult(init, initial_cost, initial_cost, iterations, trace, "diverged")
        if trial_cost < cost:
            params, r, jac, cost = trial, trial_r, trial_jac, trial_cost
            trace.append(cost)
            damping = max(damping / LM_DAMPING_FACTOR, 1e-12)
        else:
            damping *= LM_DAMPING_FACTOR
            if damping > LM_MAX_DAMPING:
                break
        if np.linalg.norm(step) < step_tol:
            break

    status = "ok"
    low, high = REFINE_SPREAD_BOX
    spread = np.exp(params[2:])
    bounded = np.clip(spread, low * np.array(init.spread), high * np.array(init.spread))
    if not np.allclose(bounded, spread, rtol=0, atol=0):
        status = "clamped"
        params = np.concatenate([params[:2], np.log(bounded)])
        r, _ = _shape_residuals(params, qx, qy, target, p)
        cost = float(r @ r)
        if cost > initial_cost:
            return RefineResult(init, initial_cost, initial_cost, iterations, trace, "clamped")
    elif cost >= initial_cost:
        return RefineResult(init, initial_cost, initial_cost, iterations, trace, "no_improvement")

    refined = LpComponent(
        init.label_index,
        (params[0], params[1]),
        (math.exp(params[2]), math.exp(params[3])),
        init.weight,
    )
    return RefineResult(refined, initial_cost, cost, iterations, trace, status)


def calibrate_spread(cc: ConnectedComponent, component: LpComponent, p: int) -> LpComponent:
    """Rescale Sigma so the component's own pixels have maximum-likelihood scale 1.

    Under -2 ln s - (E dx^p / sxx + E dy^p / syy) / s^p the optimum is
    s^p = (p / 2)(E dx^p / sxx + E dy^p / syy); scaling Sigma by that factor
    moves the optimum to s = 1 and keeps the aspect ratio.
    """
    p = check_exponent(p)
    d = cc.pixels.astype(np.float64) - np.array(component.center)
    moments = np.mean(d**p, axis=0)
    kappa = 0.5 * p * (moments[0] / component.spread[0] + moments[1] / component.spread[1])
    if not math.isfinite(kappa) or kappa <= 0:
        return component
    return LpComponent(
        component.label_index,
        component.center,
        (component.spread[0] * kappa, component.spread[1] * kappa),
        component.weight,
    )


class ReferenceModelBuilder:
    """Builds an LpMixtureModel from a reference segmentation."""

    def __init__(
        self,
        p: int = 4,
        min_component_px: int = MIN_COMPONENT_PX,
        calibrate: bool = True,
        logger: Optional[logging.Logger] = None,
    ):
        self.p = check_exponent(p)
        self.min_component_px = min_component_px
        self.calibrate = calibrate
        self.logger = logger or module_logger
        self.last_fits: List[RefineResult] = []

    def fit_component(self, cc: ConnectedComponent) -> LpComponent:
        init = moment_init(cc, self.p)
        result = refine_component(cc, init, self.p)
        self.last_fits.append(result)
        if result.flagged:
            self.logger.warning(
                f"Shape fit of label {cc.label_index} component at "
                f"({init.center[0]:.1f}, {init.center[1]:.1f}) {result.status}, "
                f"cost {result.initial_cost:.3f} -> {result.final_cost:.3f}"
            )
        else:
            self.logger.debug(
                f"Component ({init.center[0]:.1f}, {init.center[1]:.1f}) fitted in "
                f"{result.iterations} iterations, cost {result.initial_cost:.3f} -> "
                f"{result.final_cost:.3f}"
            )
        component = result.component
        if self.calibrate:
            component = calibrate_spread(cc, component, self.p)
        return component

    def build_model(self, seg: ReferenceSegmentation) -> LpMixtureModel:
        """Fit one Lp Gaussian per connected component and set the mixture weights."""
        self.last_fits = []
        components = extract_components(seg, self.min_component_px)
        self.logger.info(
            f"Extracted {len(components)} connected components from "
            f"{seg.width}x{seg.height} reference"
        )
        sizes = np.array([len(cc) for cc in components], dtype=np.float64)
        weights = sizes / sizes.sum()

        fitted = []
        for cc, weight in zip(components, weights):
            comp = self.fit_component(cc)
            fitted.append(
                LpComponent(comp.label_index, comp.center, comp.spread, float(weight))
            )

        fitted.sort(key=lambda c: (c.label_index, c.center[1], c.center[0]))
        # Renormalize after sorting so the float sum is exact to rounding.
        ordered = np.array([c.weight for c in fitted])
        ordered = ordered / ordered.sum()
        fitted = [
            LpComponent(c.label_index, c.center, c.spread, float(w))
            for c, w in zip(fitted, ordered)
        ]
        model = LpMixtureModel(
            labels=seg.labels,
            components=tuple(fitted),
            p=self.p,
            ref_dims=(seg.width, seg.height),
            dirichlet=ordered.copy(),
        )
        per_label = ", ".join(
            f"{name}={count}"
            for name, count in zip(seg.labels, model.components_per_label())
        )
        self.logger.info(f"[OK] Reference model with p={self.p}: {per_label}")
        return model


def build_model(
    seg: ReferenceSegmentation,
    p: int = 4,
    min_component_px: int = MIN_COMPONENT_PX,
    calibrate: bool = True,
) -> LpMixtureModel:
    """Functional shortcut for ReferenceModelBuilder(...).build_model(seg)."""
    return ReferenceModelBuilder(p, min_component_px, calibrate).build_model(seg)

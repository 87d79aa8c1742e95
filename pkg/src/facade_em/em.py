"""MAP Expectation-Maximization registration of a facade model onto a point set.

Each iteration assigns points to components or to the uniform outlier class
(E-step), then updates the similarity (tx, ty, s), the mixture weights and the
outlier rate (M-step). Iterates are accepted only if the MAP objective R does
not decrease.
"""

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from scipy.special import comb

from .config import EmConfig
from .errors import DegenerateDetectionError, FacadeEMError, ValidationError
from .model import (
    LpMixtureModel,
    PointSet,
    Responsibilities,
    Similarity,
    TransformState,
    WEIGHT_FLOOR,
    dirichlet_log_prior,
    domain_mass,
    even_power,
    log_domain_mass,
    log_joint_terms,
    log_normalization_constant,
    log_outlier_density,
    log_prior_columns,
)
from .points import downsample

ASCENT_TOLERANCE = 1e-6  # relative
GN_INITIAL_DAMPING = 1e-9
GN_DAMPING_FACTOR = 10.0
DEGENERATE_EPS = 1e-12
# ln m_c below which a component counts as cut by the image border
CLIP_TOLERANCE = 1e-9

module_logger = logging.getLogger(__name__)

__all__ = [
    "Box",
    "EmConfig",
    "EmReport",
    "EMRegistrar",
    "IterationRecord",
    "LevelSummary",
    "scale_form_coefficients",
    "e_step",
    "init_from_box",
    "init_outlier_rate",
    "m_step_closed_form_p2",
    "m_step_refine_p4",
    "r_tilde",
    "r_tilde_derivatives",
    "update_weights",
]


@dataclass(frozen=True)
class Box:
    """Axis-aligned detection rectangle in the target frame."""

    x: float
    y: float
    width: float
    height: float

    @property
    def center(self) -> Tuple[float, float]:
        return self.x + self.width / 2.0, self.y + self.height / 2.0

    def corners(self) -> np.ndarray:
        x0, y0, x1, y1 = self.x, self.y, self.x + self.width, self.y + self.height
        return np.array([[x0, y0], [x1, y0], [x0, y1], [x1, y1]], dtype=np.float64)

    def translated(self, dx: float, dy: float) -> "Box":
        return Box(self.x + dx, self.y + dy, self.width, self.height)


def init_from_box(box: Box, ref_dims: Sequence[float]) -> Similarity:
    """Least-squares similarity mapping the reference corners onto the box corners."""
    w, h = (float(v) for v in ref_dims)
    if box.width <= 0 or box.height <= 0:
        raise DegenerateDetectionError(
            f"degenerate detection: box {box.width}x{box.height} has no area"
        )
    if w <= 0 or h <= 0:
        raise ValidationError(f"reference dimensions must be positive: {ref_dims}")
    s = (w * box.width + h * box.height) / (w * w + h * h)
    if not s > 0:
        raise DegenerateDetectionError(f"degenerate detection: scale {s}")
    cx, cy = box.center
    return Similarity(cx - s * w / 2.0, cy - s * h / 2.0, s)


def init_outlier_rate(
    s: float,
    ref_dims: Sequence[float],
    target_dims: Sequence[float],
    alpha_bounds: Tuple[float, float] = (0.01, 0.9),
) -> float:
    """alpha = 0.25 (1 - s^2 h w / (H W)), clamped to alpha_bounds."""
    if not s > 0:
        raise ValidationError(f"scale must be positive, got {s}")
    w, h = ref_dims
    width, height = target_dims
    alpha = 0.25 * (1.0 - s * s * h * w / (height * width))
    return float(min(max(alpha, alpha_bounds[0]), alpha_bounds[1]))


def _posteriors(
    log_num: np.ndarray, log_lambda: float
) -> Tuple[np.ndarray, Responsibilities, int]:
    """ln D_i, beta and gamma from a single max-shifted exponential.

    Points with zero evidence get ln D = -inf and go to the outlier class.
    """
    lam_finite = math.isfinite(log_lambda)
    with np.errstate(under="ignore", invalid="ignore"):
        peak = log_num.max(axis=1)
        if lam_finite:
            peak = np.maximum(peak, log_lambda)
        dead = ~np.isfinite(peak)
        peak[dead] = 0.0
        beta = log_num - peak[:, None]
        np.exp(beta, out=beta)
        gamma = np.exp(log_lambda - peak) if lam_finite else np.zeros(len(peak))
        total = beta.sum(axis=1) + gamma
        dead |= ~(total > 0)
        total[dead] = 1.0
        log_d = peak + np.log(total)
        beta /= total[:, None]
        gamma /= total
    if dead.any():
        log_d[dead] = -math.inf
        beta[dead] = 0.0
        gamma[dead] = 1.0
    return log_d, Responsibilities(beta, gamma), int(dead.sum())


def e_step(
    points: PointSet,
    model: LpMixtureModel,
    state: TransformState,
    logger: Optional[logging.Logger] = None,
    clip_to_image: bool = True,
) -> Responsibilities:
    """beta_ic = pi_c N_c(X_i) prior_i(c) / D_i and gamma_i = lambda / D_i."""
    log_num, log_lambda = log_joint_terms(
        points, model, state, clip_to_image=clip_to_image
    )
    _, resp, dead = _posteriors(log_num, log_lambda)
    if dead:
        (logger or module_logger).warning(
            f"{dead} points have zero evidence and were assigned to the outlier class"
        )
    return resp


class ScaleFormCoefficients(NamedTuple):
    """Weighted sums a1..a8 of the p=2 stationarity system."""

    a1: float
    a2: float
    a3: float
    a4: float
    a5: float
    a6: float
    a7: float
    a8: float


def scale_form_coefficients(
    points: PointSet, model: LpMixtureModel, resp: Responsibilities
) -> ScaleFormCoefficients:
    beta = resp.beta
    x, y = points.xy[:, 0], points.xy[:, 1]
    inv_x = 1.0 / model.spreads[:, 0]
    inv_y = 1.0 / model.spreads[:, 1]
    mu_x, mu_y = model.centers[:, 0], model.centers[:, 1]

    bx = beta @ inv_x  # sum_c beta_ic / sxx_c
    by = beta @ inv_y
    bmx = beta @ (mu_x * inv_x)
    bmy = beta @ (mu_y * inv_y)
    return ScaleFormCoefficients(
        a1=-float(np.sum(x * x * bx + y * y * by)),
        a2=float(np.sum(x * bmx + y * bmy)),
        a3=2.0 * float(np.sum(x * bx)),
        a4=2.0 * float(np.sum(y * by)),
        a5=-float(np.sum(bmx)),
        a6=-float(np.sum(bmy)),
        a7=-float(np.sum(bx)),
        a8=-float(np.sum(by)),
    )


def m_step_closed_form_p2(
    points: PointSet,
    model: LpMixtureModel,
    resp: Responsibilities,
    previous: Similarity,
    with_normalizer: bool = True,
    logger: Optional[logging.Logger] = None,
) -> Similarity:
    """Closed-form maximizer of R~ for p = 2.

    With u = 1/s the scale equation is A u^2 - C u - B = 0, where B is the
    total responsibility mass carried by the 2 ln s normalizer term;
    with_normalizer=False drops B and gives the spread-only estimate s = A / C.
    tx and ty follow from the two linear equations.
    """
    log = logger or module_logger
    c = scale_form_coefficients(points, model, resp)
    if abs(c.a7) < DEGENERATE_EPS or abs(c.a8) < DEGENERATE_EPS:
        log.warning("Closed-form M-step has no responsibility mass, keeping transform")
        return previous

    s: Optional[float] = None
    if with_normalizer:
        a_coef = -c.a1 + c.a3**2 / (4.0 * c.a7) + c.a4**2 / (4.0 * c.a8)
        c_coef = c.a2 - c.a3 * c.a5 / (2.0 * c.a7) - c.a4 * c.a6 / (2.0 * c.a8)
        mass = float(resp.beta.sum())
        if a_coef > DEGENERATE_EPS * max(1.0, abs(c.a1)):
            u = (c_coef + math.sqrt(c_coef * c_coef + 4.0 * a_coef * mass)) / (2.0 * a_coef)
            if u > 0 and math.isfinite(u):
                s = 1.0 / u
    else:
        num = -4.0 * c.a1 * c.a7 * c.a8 + c.a3**2 * c.a8 + c.a4**2 * c.a7
        den = 2.0 * (2.0 * c.a2 * c.a7 * c.a8 - c.a3 * c.a5 * c.a8 - c.a4 * c.a6 * c.a7)
        if abs(den) > DEGENERATE_EPS * max(1.0, abs(num)):
            s = num / den

    if s is None or not math.isfinite(s) or s <= 0:
        log.debug("Closed-form scale rejected, solving translation at previous scale")
        s = previous.s
    tx = (-c.a3 - 2.0 * c.a5 * s) / (2.0 * c.a7)
    ty = (-c.a4 - 2.0 * c.a6 * s) / (2.0 * c.a8)
    return Similarity(tx, ty, s)


def r_tilde(
    points: PointSet,
    model: LpMixtureModel,
    resp: Responsibilities,
    sim: Similarity,
    dims: Optional[Sequence[int]] = None,
) -> float:
    """Transform-dependent part of the M-step objective: -sum beta (ln Z + ||.||^p).

    With image dims the in-image mass term -sum_c B_c ln m_c is included.
    """
    p = model.p
    centers = model.centers * sim.s + np.array([sim.tx, sim.ty])
    ux = (points.xy[:, 0:1] - centers[None, :, 0]) / sim.s
    uy = (points.xy[:, 1:2] - centers[None, :, 1]) / sim.s
    norm = even_power(ux, p) / model.spreads[:, 0] + even_power(uy, p) / model.spreads[:, 1]
    log_z = log_normalization_constant(model.spreads, sim.s, p)
    value = -float(np.sum(resp.beta * (norm + log_z[None, :])))
    if dims is not None:
        value -= float(resp.component_mass @ log_domain_mass(model, sim, dims))
    return value


def r_tilde_derivatives(
    points: PointSet,
    model: LpMixtureModel,
    resp: Responsibilities,
    sim: Similarity,
    dims: Optional[Sequence[int]] = None,
) -> Tuple[np.ndarray, np.ndarray]:
    """Exact gradient and Hessian of r_tilde in (tx, ty, s)."""
    p = model.p
    tx, ty, s = sim
    grad = np.zeros(3)
    hess = np.zeros((3, 3))
    for axis, t, index in ((0, tx, 0), (1, ty, 1)):
        e = points.xy[:, axis] - t  # (N,)
        u = e[:, None] / s - model.centers[None, :, axis]
        w = resp.beta / model.spreads[None, :, axis]
        u_pm2 = even_power(u, p - 2) if p > 2 else np.ones_like(u)
        u_pm1 = u_pm2 * u
        s1 = np.sum(w * u_pm1, axis=1)  # sum_c w u^(p-1)
        s2 = np.sum(w * u_pm2, axis=1)  # sum_c w u^(p-2)

        grad[index] += p / s * s1.sum()
        grad[2] += p / s**2 * float(s1 @ e)
        hess[index, index] += -p * (p - 1) / s**2 * s2.sum()
        cross = -(p * (p - 1) / s**3 * float(s2 @ e) + p / s**2 * s1.sum())
        hess[index, 2] += cross
        hess[2, index] += cross
        hess[2, 2] += -(p * (p - 1) / s**4 * float(s2 @ (e * e)) + 2.0 * p / s**3 * float(s1 @ e))

    mass = float(resp.beta.sum())
    grad[2] += -2.0 * mass / s
    hess[2, 2] += 2.0 * mass / s**2
    if dims is not None:
        _subtract_domain_terms(grad, hess, resp.component_mass, model, sim, dims)
    return grad, hess


def _subtract_domain_terms(
    grad: np.ndarray,
    hess: np.ndarray,
    mass: np.ndarray,
    model: LpMixtureModel,
    sim: Similarity,
    dims: Sequence[int],
) -> None:
    dm = domain_mass(model, sim, dims)
    grad -= mass @ dm.grad
    hess -= np.tensordot(mass, dm.hess, axes=1)


class StationaritySystem:
    """r_tilde and its derivatives from per-component coordinate moments.

    Every term of R~ is a polynomial in the point coordinates, so the points
    are visited once (one matrix product per axis) and each evaluation then
    costs O(M p^2). Coordinates are centred on their weighted mean to keep
    the expanded polynomials well conditioned.
    """

    def __init__(
        self,
        points: PointSet,
        model: LpMixtureModel,
        resp: Responsibilities,
        dims: Optional[Sequence[int]] = None,
    ):
        self.p = model.p
        self.model = model
        self.dims = dims
        self.centers = model.centers
        self.mass_per_component = resp.component_mass
        self.log_z_unit = log_normalization_constant(model.spreads, 1.0, model.p)
        self.origin: List[float] = []
        self.moments: List[np.ndarray] = []
        for axis in (0, 1):
            inv = 1.0 / model.spreads[:, axis]
            per_point = resp.beta @ inv
            x = points.xy[:, axis]
            total = float(per_point.sum())
            x0 = float(per_point @ x) / total if total > 0 else float(x.mean())
            powers = np.vander(x - x0, self.p + 1, increasing=True)
            self.origin.append(x0)
            self.moments.append((resp.beta.T @ powers) * inv[:, None])  # (M, p + 1)

    def _sum(self, axis: int, a: np.ndarray, t: float, k: int, j: int) -> float:
        """sum_i sum_c W_ic (x_i - a_c)^k (x_i - t)^j in centred coordinates."""
        m = np.arange(k + 1)
        coef = comb(k, m)[None, :] * (-a[:, None]) ** (k - m)[None, :]
        if j:
            n = np.arange(j + 1)
            q = comb(j, n) * (-t) ** (j - n)
            product = np.zeros((len(a), k + j + 1))
            for shift, qn in enumerate(q):
                product[:, shift : shift + k + 1] += coef * qn
            coef = product
        return float(np.sum(coef * self.moments[axis][:, : coef.shape[1]]))

    def _axis(self, axis: int, t: float, s: float) -> Tuple[np.ndarray, float]:
        t_c = t - self.origin[axis]
        return t_c + s * self.centers[:, axis], t_c

    def value(self, sim: Similarity) -> float:
        p, s = self.p, sim.s
        norm = 0.0
        for axis, t in ((0, sim.tx), (1, sim.ty)):
            a, t_c = self._axis(axis, t, s)
            norm += self._sum(axis, a, t_c, p, 0) / s**p
        log_z = float(self.mass_per_component @ (self.log_z_unit + 2.0 * math.log(s)))
        value = -(norm + log_z)
        if self.dims is not None:
            value -= float(
                self.mass_per_component @ log_domain_mass(self.model, sim, self.dims)
            )
        return value

    def derivatives(self, sim: Similarity) -> Tuple[np.ndarray, np.ndarray]:
        p, s = self.p, sim.s
        grad = np.zeros(3)
        hess = np.zeros((3, 3))
        for index, t in ((0, sim.tx), (1, sim.ty)):
            a, t_c = self._axis(index, t, s)
            s1 = self._sum(index, a, t_c, p - 1, 0) / s ** (p - 1)
            s2 = self._sum(index, a, t_c, p - 2, 0) / s ** (p - 2)
            s1e = self._sum(index, a, t_c, p - 1, 1) / s ** (p - 1)
            s2e = self._sum(index, a, t_c, p - 2, 1) / s ** (p - 2)
            s2ee = self._sum(index, a, t_c, p - 2, 2) / s ** (p - 2)

            grad[index] += p / s * s1
            grad[2] += p / s**2 * s1e
            hess[index, index] += -p * (p - 1) / s**2 * s2
            cross = -(p * (p - 1) / s**3 * s2e + p / s**2 * s1)
            hess[index, 2] += cross
            hess[2, index] += cross
            hess[2, 2] += -(p * (p - 1) / s**4 * s2ee + 2.0 * p / s**3 * s1e)

        mass = float(self.mass_per_component.sum())
        grad[2] += -2.0 * mass / s
        hess[2, 2] += 2.0 * mass / s**2
        if self.dims is not None:
            _subtract_domain_terms(
                grad, hess, self.mass_per_component, self.model, sim, self.dims
            )
        return grad, hess


@dataclass
class StationarityFit:
    """Gauss-Newton minimization of J = |grad R~|^2."""

    similarity: Similarity
    j_initial: float
    j_final: float
    iterations: int
    j_trace: List[float] = field(default_factory=list)


def refine_stationarity(
    points: PointSet,
    model: LpMixtureModel,
    resp: Responsibilities,
    init: Similarity,
    max_iters: int = 20,
    dims: Optional[Sequence[int]] = None,
) -> StationarityFit:
    system = StationaritySystem(points, model, resp, dims)
    theta = np.array(init, dtype=np.float64)
    grad, hess = system.derivatives(Similarity(*theta))
    j = float(grad @ grad)
    j_initial = j
    trace = [j]
    damping = GN_INITIAL_DAMPING
    iterations = 0
    while iterations < max_iters and j > 0:
        iterations += 1
        normal = hess.T @ hess
        rhs = -(hess.T @ grad)
        lhs = normal + damping * np.diag(np.diag(normal) + 1e-300)
        try:
            step = np.linalg.solve(lhs, rhs)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(lhs, rhs, rcond=None)[0]
        trial = theta + step
        accepted = False
        if np.all(np.isfinite(trial)) and trial[2] > 0:
            t_grad, t_hess = system.derivatives(Similarity(*trial))
            t_j = float(t_grad @ t_grad)
            if t_j < j:
                theta, grad, hess, j = trial, t_grad, t_hess, t_j
                trace.append(j)
                damping = max(damping / GN_DAMPING_FACTOR, GN_INITIAL_DAMPING)
                accepted = True
        if not accepted:
            damping *= GN_DAMPING_FACTOR
        if np.linalg.norm(step) <= 1e-12 * (1.0 + np.linalg.norm(theta)):
            break
    if j >= j_initial:
        return StationarityFit(init, j_initial, j_initial, iterations, trace[:1])
    return StationarityFit(Similarity(*theta), j_initial, j, iterations, trace)


def m_step_refine_p4(
    points: PointSet,
    model: LpMixtureModel,
    resp: Responsibilities,
    init: Similarity,
    max_iters: int = 20,
    dims: Optional[Sequence[int]] = None,
    logger: Optional[logging.Logger] = None,
) -> Similarity:
    """Refine (tx, ty, s) to a stationary point of R~ for the model's exponent.

    Returns init unchanged unless J = |grad R~|^2 strictly drops.
    """
    fit = refine_stationarity(points, model, resp, init, max_iters, dims)
    (logger or module_logger).debug(
        f"Stationarity refinement: J {fit.j_initial:.3e} -> {fit.j_final:.3e} "
        f"in {fit.iterations} iterations"
    )
    return fit.similarity


def update_weights(
    resp: Responsibilities,
    model: LpMixtureModel,
    previous_weights: Optional[np.ndarray] = None,
    previous_alpha: Optional[float] = None,
    alpha_bounds: Tuple[float, float] = (0.01, 0.9),
    logger: Optional[logging.Logger] = None,
) -> Tuple[np.ndarray, float]:
    """Dirichlet-MAP mixture weights and outlier rate."""
    log = logger or module_logger
    mass = resp.component_mass
    raw = mass + model.dirichlet - 1.0
    if previous_weights is None:
        previous_weights = model.weights
    if np.all(raw < WEIGHT_FLOOR):
        log.warning("All weight numerators clamped, keeping previous mixture weights")
        weights = np.array(previous_weights, dtype=np.float64)
    else:
        clamped = np.maximum(raw, WEIGHT_FLOOR)
        weights = clamped / clamped.sum()

    denominator = float(mass.sum() + np.sum(model.dirichlet - 1.0))
    if denominator > 0:
        alpha = float(resp.gamma.sum()) / denominator
    else:
        log.warning(
            f"Outlier-rate denominator {denominator:.3g} is not positive, "
            f"keeping previous rate"
        )
        alpha = previous_alpha if previous_alpha is not None else alpha_bounds[0]
    alpha = min(max(alpha, alpha_bounds[0]), alpha_bounds[1])
    return weights, alpha


@dataclass
class IterationRecord:
    """One row of the R trace."""

    level: str
    iteration: int
    objective: float
    tx: float
    ty: float
    s: float
    alpha: float
    seconds: float = 0.0


@dataclass
class LevelSummary:
    name: str
    n_points: int
    iterations: int
    termination: str  # converged, ascent_guard, max_iters


@dataclass
class EmReport:
    """Outcome of one registration run."""

    init: Similarity
    state: TransformState
    responsibilities: Responsibilities
    objective: float
    converged: bool
    levels: List[LevelSummary] = field(default_factory=list)
    trace: List[IterationRecord] = field(default_factory=list)
    init_index: int = 0

    @property
    def iterations(self) -> int:
        return sum(level.iterations for level in self.levels)

    @property
    def iterations_per_level(self) -> Dict[str, int]:
        return {level.name: level.iterations for level in self.levels}

    @property
    def r_trace(self) -> List[float]:
        return [record.objective for record in self.trace]

    def level_trace(self, name: str) -> List[IterationRecord]:
        return [record for record in self.trace if record.level == name]

    @property
    def similarity(self) -> Similarity:
        return self.state.similarity


class _Evaluation(NamedTuple):
    objective: float
    log_num: np.ndarray
    log_d: np.ndarray
    resp: Responsibilities


class EMRegistrar:
    """Runs MAP-EM registration of one reference model."""

    def __init__(
        self,
        model: LpMixtureModel,
        config: Optional[EmConfig] = None,
        logger: Optional[logging.Logger] = None,
    ):
        self.model = model
        self.config = config or EmConfig(p=model.p)
        self.logger = logger or module_logger
        self.last_reports: List[EmReport] = []
        self._prior_cache: Optional[Tuple[PointSet, np.ndarray]] = None

    def _log_prior(self, points: PointSet) -> np.ndarray:
        # constant across iterations of one point set
        if self._prior_cache is None or self._prior_cache[0] is not points:
            self._prior_cache = (points, log_prior_columns(points, self.model))
        return self._prior_cache[1]

    def _dims(self, points: PointSet) -> Optional[Tuple[int, int]]:
        return points.source_dims if self.config.clip_to_image else None

    def _evaluate(
        self,
        points: PointSet,
        state: TransformState,
        log_num: Optional[np.ndarray] = None,
    ) -> _Evaluation:
        """R, ln D and posteriors of a state.

        log_num may be reused from a state with the same similarity and weights.
        """
        if log_num is None:
            log_num, _ = log_joint_terms(
                points,
                self.model,
                state,
                self._log_prior(points),
                self.config.clip_to_image,
            )
        log_lambda = log_outlier_density(state.outlier_rate, points.image_area)
        log_d, resp, _ = _posteriors(log_num, log_lambda)
        objective = float(np.sum(log_d)) + dirichlet_log_prior(
            state.weights, self.model.dirichlet
        )
        return _Evaluation(objective, log_num, log_d, resp)

    def initial_state(self, box: Box, target_dims: Sequence[int]) -> TransformState:
        sim = init_from_box(box, self.model.ref_dims)
        alpha = init_outlier_rate(
            sim.s, self.model.ref_dims, target_dims, self.config.alpha_bounds
        )
        return TransformState.initial(sim, self.model, alpha)

    def e_step(self, points: PointSet, state: TransformState) -> Responsibilities:
        return e_step(points, self.model, state, self.logger, self.config.clip_to_image)

    def m_step_similarity(
        self, points: PointSet, resp: Responsibilities, previous: Similarity
    ) -> Similarity:
        """Closed form for p = 2, closed-form start plus stationarity refinement otherwise.

        A p = 2 solution that leaves part of a component outside the image is
        refined too, since the closed form ignores the in-image mass.
        """
        dims = self._dims(points)
        if self.model.p == 2:
            start = m_step_closed_form_p2(
                points, self.model, resp, previous, with_normalizer=True, logger=self.logger
            )
            if dims is None:
                return start
            if log_domain_mass(self.model, start, dims).min() > -CLIP_TOLERANCE:
                return start
        else:
            start = m_step_closed_form_p2(
                points, self.model, resp, previous, with_normalizer=False, logger=self.logger
            )
        return m_step_refine_p4(
            points, self.model, resp, start, self.config.gn_max_iters, dims, self.logger
        )

    def m_step(
        self, points: PointSet, resp: Responsibilities, state: TransformState
    ) -> List[TransformState]:
        """Candidate states: full M-step first, then the one keeping the outlier rate.

        Both candidates share the similarity and the mixture weights.
        """
        sim = self.m_step_similarity(points, resp, state.similarity)
        weights, alpha = update_weights(
            resp,
            self.model,
            state.weights,
            state.outlier_rate,
            self.config.alpha_bounds,
            self.logger,
        )
        full = TransformState(sim.tx, sim.ty, sim.s, weights, alpha)
        candidates = [full]
        if alpha != state.outlier_rate:
            held = TransformState(sim.tx, sim.ty, sim.s, weights, state.outlier_rate)
            candidates.append(held)
        return candidates

    def _step_size(self, old: TransformState, new: TransformState) -> float:
        extent = max(self.model.ref_dims)
        return max(
            abs(new.tx - old.tx), abs(new.ty - old.ty), abs(new.s - old.s) * extent
        )

    def run_level(
        self, points: PointSet, state: TransformState, name: str
    ) -> Tuple[TransformState, LevelSummary, List[IterationRecord]]:
        cfg = self.config
        current = self._evaluate(points, state)
        records = [
            IterationRecord(
                name, 0, current.objective, state.tx, state.ty, state.s, state.outlier_rate
            )
        ]
        termination = "max_iters"
        iterations = 0
        for iteration in range(1, cfg.max_iters + 1):
            started = time.perf_counter()
            accepted = None
            floor = current.objective - ASCENT_TOLERANCE * abs(current.objective)
            shared: Optional[np.ndarray] = None
            for candidate in self.m_step(points, current.resp, state):
                evaluation = self._evaluate(points, candidate, shared)
                if evaluation.objective >= floor:
                    accepted = (candidate, evaluation)
                    break
                shared = evaluation.log_num
            if accepted is None:
                termination = "ascent_guard"
                self.logger.debug(
                    f"{name} level: M-step candidate lowers R at iteration {iteration}, stopping"
                )
                break
            step = self._step_size(state, accepted[0])
            state, current = accepted
            iterations = iteration
            records.append(
                IterationRecord(
                    name,
                    iteration,
                    current.objective,
                    state.tx,
                    state.ty,
                    state.s,
                    state.outlier_rate,
                    time.perf_counter() - started,
                )
            )
            if step <= cfg.epsilon:
                termination = "converged"
                break

        summary = LevelSummary(name, len(points), iterations, termination)
        self.logger.info(
            f"{name} level: {len(points)} points, {iterations} iterations ({termination}), "
            f"R={current.objective:.4f}, tx={state.tx:.3f} ty={state.ty:.3f} s={state.s:.5f} "
            f"alpha={state.outlier_rate:.4f}"
        )
        return state, summary, records

    def run_em(
        self, points: PointSet, initial: TransformState, init_index: int = 0
    ) -> EmReport:
        """Coarse level on the downsampled set, then the full set from the last iterate."""
        if len(points) == 0:
            raise ValidationError("registration needs at least one point")
        cfg = self.config
        width, height = points.source_dims
        self.logger.debug(
            f"N={len(points)} points, 0.25*H*W={0.25 * width * height:.0f}, "
            f"M={len(self.model)} components"
        )

        state = initial
        levels: List[LevelSummary] = []
        trace: List[IterationRecord] = []
        if cfg.use_coarse_level and cfg.stride > 1:
            coarse = downsample(points, cfg.stride, self.logger)
            if len(coarse) < len(points):
                state, summary, records = self.run_level(coarse, state, "coarse")
                levels.append(summary)
                trace.extend(records)
        state, summary, records = self.run_level(points, state, "fine")
        levels.append(summary)
        trace.extend(records)

        evaluation = self._evaluate(points, state)
        converged = all(level.termination != "max_iters" for level in levels)
        if not converged:
            self.logger.warning(
                f"EM reached {cfg.max_iters} iterations without converging, "
                f"returning the best iterate"
            )
        return EmReport(
            init=initial.similarity,
            state=state,
            responsibilities=evaluation.resp,
            objective=evaluation.objective,
            converged=converged,
            levels=levels,
            trace=trace,
            init_index=init_index,
        )

    def run_multi_init(self, points: PointSet, boxes: Sequence[Box]) -> EmReport:
        """Run EM from every box and keep the report with the highest R."""
        if not boxes:
            raise ValidationError("at least one initialization box is required")
        self.last_reports = []
        best: Optional[EmReport] = None
        last_error: Optional[FacadeEMError] = None
        for index, box in enumerate(boxes):
            self.logger.info(
                f"Initialization {index + 1}/{len(boxes)}: box "
                f"({box.x:g}, {box.y:g}, {box.width:g}, {box.height:g})"
            )
            try:
                initial = self.initial_state(box, points.source_dims)
                report = self.run_em(points, initial, init_index=index)
            except FacadeEMError as e:
                self.logger.error(f"Initialization {index + 1} failed: {e}")
                last_error = e
                continue
            self.last_reports.append(report)
            if best is None or report.objective > best.objective:
                best = report
        if best is None:
            assert last_error is not None
            raise last_error
        self.logger.info(
            f"[OK] Selected initialization {best.init_index + 1} with R={best.objective:.4f}"
        )
        return best

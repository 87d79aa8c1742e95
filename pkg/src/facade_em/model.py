"""Domain types and the Lp Gaussian mixture model of a facade.

Coordinates are pixels with x along columns and y along rows. A component's
spread (sxx, syy) is the denominator of the Lp norm,

    ||d||^p = dx^p / (s^p sxx) + dy^p / (s^p syy),

and its density is exp(-||d||^p) / Z with the exact normalizer

    Z = (4 / p^2) Gamma(1/p)^2 s^2 (sxx syy)^(1/p).

Points only exist inside the image, so the likelihood divides each density by
the share m_c of its mass over the pixel domain [-0.5, W - 0.5] x [-0.5, H - 0.5].
The density is separable, which makes m_c a product of two incomplete gamma
differences.
"""

import math
from dataclasses import dataclass, field, replace
from typing import Iterator, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import gammaincc, gammaln, logsumexp

from .errors import ValidationError

# Floor applied to mixture weights inside logarithms and weight updates.
WEIGHT_FLOOR = 1e-8

# Tolerance on the sum of label probabilities of a pixel.
PROB_SUM_TOLERANCE = 1e-6

# Tolerance on the sum of mixture weights.
WEIGHT_SUM_TOLERANCE = 1e-9

# Smallest in-image share of a component that still renormalizes its density.
DOMAIN_MASS_FLOOR = 1e-2


def even_power(u: np.ndarray, p: int) -> np.ndarray:
    """u**p for even p by repeated squaring (faster than np.power for arrays)."""
    u2 = u * u
    result = u2
    for _ in range(p // 2 - 1):
        result = result * u2
    return result  # type: ignore[no-any-return]


def check_exponent(p: int) -> int:
    """Validate the Lp exponent (even integer >= 2) and return it as int."""
    if isinstance(p, bool) or int(p) != p:
        raise ValidationError(f"exponent p must be an integer, got {p!r}")
    p = int(p)
    if p < 2 or p % 2:
        raise ValidationError(f"exponent p must be even and >= 2, got {p}")
    return p


@dataclass(frozen=True)
class LabelSet:
    """Ordered facade label names, e.g. ("window", "door", "balcony")."""

    labels: Tuple[str, ...]

    def __post_init__(self) -> None:
        labels = tuple(self.labels)
        if not labels:
            raise ValidationError("label set needs at least one label")
        if any(not isinstance(name, str) or not name.strip() for name in labels):
            raise ValidationError(f"label names must be non-empty: {labels}")
        if any(any(ch.isspace() for ch in name) for name in labels):
            raise ValidationError(f"label names cannot contain whitespace: {labels}")
        if len(set(labels)) != len(labels):
            raise ValidationError(f"label names must be unique: {labels}")
        object.__setattr__(self, "labels", labels)

    @classmethod
    def from_names(cls, names: Sequence[str]) -> "LabelSet":
        return cls(tuple(names))

    def __len__(self) -> int:
        return len(self.labels)

    def __iter__(self) -> Iterator[str]:
        return iter(self.labels)

    def __getitem__(self, index: int) -> str:
        return self.labels[index]

    def index(self, name: str) -> int:
        return self.labels.index(name)


@dataclass(frozen=True, eq=False)
class LabelProbMap:
    """Per-pixel prior label probabilities, shape (H, W, K), float32."""

    labels: LabelSet
    probs: np.ndarray

    def __post_init__(self) -> None:
        probs = np.array(self.probs, dtype=np.float32, copy=True)
        if probs.ndim != 3:
            raise ValidationError(
                f"label probability map must be H x W x K, got shape {probs.shape}"
            )
        if probs.shape[2] != len(self.labels):
            raise ValidationError(
                f"map has {probs.shape[2]} planes but {len(self.labels)} labels"
            )
        if not np.all(np.isfinite(probs)):
            raise ValidationError("label probabilities must be finite")
        if probs.size and (probs.min() < 0.0 or probs.max() > 1.0):
            raise ValidationError("label probabilities must lie in [0, 1]")
        sums = probs.astype(np.float64).sum(axis=2)
        if sums.size and sums.max() > 1.0 + PROB_SUM_TOLERANCE:
            raise ValidationError(
                f"label probabilities of a pixel sum to {sums.max():.6f} > 1"
            )
        probs.setflags(write=False)
        object.__setattr__(self, "probs", probs)

    @property
    def height(self) -> int:
        return int(self.probs.shape[0])

    @property
    def width(self) -> int:
        return int(self.probs.shape[1])

    @property
    def dims(self) -> Tuple[int, int]:
        """(W, H)."""
        return self.width, self.height

    def same_as(self, other: "LabelProbMap") -> bool:
        return self.labels == other.labels and np.array_equal(self.probs, other.probs)


class Point(NamedTuple):
    x: float
    y: float
    prior: np.ndarray


@dataclass(frozen=True, eq=False)
class PointSet:
    """Observed points X: coordinates (N, 2) and label priors (N, K)."""

    xy: np.ndarray
    priors: np.ndarray
    source_dims: Tuple[int, int]
    labels: LabelSet

    def __post_init__(self) -> None:
        xy = np.array(self.xy, dtype=np.float64, copy=True).reshape(-1, 2)
        priors = np.array(self.priors, dtype=np.float64, copy=True)
        priors = priors.reshape(len(xy), len(self.labels))
        width, height = (int(v) for v in self.source_dims)
        if width <= 0 or height <= 0:
            raise ValidationError(f"invalid source dimensions {self.source_dims}")
        if len(xy) and (
            xy[:, 0].min() < 0
            or xy[:, 1].min() < 0
            or xy[:, 0].max() >= width
            or xy[:, 1].max() >= height
        ):
            raise ValidationError("point coordinates fall outside the source image")
        xy.setflags(write=False)
        priors.setflags(write=False)
        object.__setattr__(self, "xy", xy)
        object.__setattr__(self, "priors", priors)
        object.__setattr__(self, "source_dims", (width, height))

    def __len__(self) -> int:
        return int(self.xy.shape[0])

    def __getitem__(self, index: int) -> Point:
        return Point(float(self.xy[index, 0]), float(self.xy[index, 1]), self.priors[index])

    @property
    def image_area(self) -> int:
        return self.source_dims[0] * self.source_dims[1]

    def subset(self, mask: np.ndarray) -> "PointSet":
        return PointSet(self.xy[mask], self.priors[mask], self.source_dims, self.labels)


@dataclass(frozen=True)
class LpComponent:
    """One Lp Gaussian of the reference model."""

    label_index: int
    center: Tuple[float, float]
    spread: Tuple[float, float]
    weight: float = 0.0

    def __post_init__(self) -> None:
        center = (float(self.center[0]), float(self.center[1]))
        spread = (float(self.spread[0]), float(self.spread[1]))
        if not all(math.isfinite(v) for v in center + spread):
            raise ValidationError(f"component parameters must be finite: {self}")
        if spread[0] <= 0 or spread[1] <= 0:
            raise ValidationError(f"component spread must be positive: {spread}")
        if not 0.0 <= self.weight <= 1.0:
            raise ValidationError(f"component weight must lie in [0, 1]: {self.weight}")
        if self.label_index < 0:
            raise ValidationError(f"negative label index {self.label_index}")
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "spread", spread)
        object.__setattr__(self, "weight", float(self.weight))


@dataclass(frozen=True, eq=False)
class LpMixtureModel:
    """Reference facade model: Lp Gaussians grouped by label."""

    labels: LabelSet
    components: Tuple[LpComponent, ...]
    p: int = 4
    ref_dims: Tuple[int, int] = (0, 0)
    dirichlet: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self) -> None:
        p = check_exponent(self.p)
        components = tuple(self.components)
        if not components:
            raise ValidationError("mixture model needs at least one component")
        for comp in components:
            if comp.label_index >= len(self.labels):
                raise ValidationError(
                    f"component label index {comp.label_index} outside label set"
                )
        weights = np.array([c.weight for c in components], dtype=np.float64)
        if abs(weights.sum() - 1.0) > WEIGHT_SUM_TOLERANCE:
            raise ValidationError(f"mixture weights sum to {weights.sum():.12f}, not 1")
        dirichlet = np.array(self.dirichlet, dtype=np.float64).reshape(-1)
        if dirichlet.size == 0:
            dirichlet = weights.copy()
        if dirichlet.shape != weights.shape:
            raise ValidationError("one Dirichlet parameter per component is required")
        if np.any(dirichlet <= 0) or not np.all(np.isfinite(dirichlet)):
            raise ValidationError("Dirichlet parameters must be positive")
        dirichlet.setflags(write=False)
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "components", components)
        object.__setattr__(self, "dirichlet", dirichlet)
        object.__setattr__(
            self, "ref_dims", (int(self.ref_dims[0]), int(self.ref_dims[1]))
        )

        # Column views used by the vectorized density code.
        centers = np.array([c.center for c in components], dtype=np.float64)
        spreads = np.array([c.spread for c in components], dtype=np.float64)
        label_index = np.array([c.label_index for c in components], dtype=np.intp)
        for arr in (centers, spreads, label_index, weights):
            arr.setflags(write=False)
        object.__setattr__(self, "_centers", centers)
        object.__setattr__(self, "_spreads", spreads)
        object.__setattr__(self, "_label_index", label_index)
        object.__setattr__(self, "_weights", weights)

    def __len__(self) -> int:
        return len(self.components)

    @property
    def centers(self) -> np.ndarray:
        return self._centers  # type: ignore[attr-defined, no-any-return]

    @property
    def spreads(self) -> np.ndarray:
        return self._spreads  # type: ignore[attr-defined, no-any-return]

    @property
    def label_index(self) -> np.ndarray:
        return self._label_index  # type: ignore[attr-defined, no-any-return]

    @property
    def weights(self) -> np.ndarray:
        return self._weights  # type: ignore[attr-defined, no-any-return]

    def components_per_label(self) -> List[int]:
        """m_j for every label j (zero allowed)."""
        counts = np.bincount(self.label_index, minlength=len(self.labels))
        return [int(c) for c in counts]


class Similarity(NamedTuple):
    """Translation + isotropic scale: T(mu) = s * mu + t."""

    tx: float
    ty: float
    s: float


@dataclass(frozen=True, eq=False)
class TransformState:
    """EM parameters: similarity, mixture weights and outlier rate."""

    tx: float
    ty: float
    s: float
    weights: np.ndarray
    outlier_rate: float

    def __post_init__(self) -> None:
        if not (math.isfinite(self.tx) and math.isfinite(self.ty)):
            raise ValidationError(f"translation must be finite: ({self.tx}, {self.ty})")
        if not (math.isfinite(self.s) and self.s > 0):
            raise ValidationError(f"scale must be positive, got {self.s}")
        weights = np.array(self.weights, dtype=np.float64, copy=True).reshape(-1)
        if np.any(weights < 0) or abs(weights.sum() - 1.0) > WEIGHT_SUM_TOLERANCE:
            raise ValidationError(f"weights must be a distribution, sum={weights.sum()}")
        if not 0.0 <= self.outlier_rate < 1.0:
            raise ValidationError(f"outlier rate must lie in [0, 1): {self.outlier_rate}")
        weights.setflags(write=False)
        object.__setattr__(self, "weights", weights)
        for name in ("tx", "ty", "s", "outlier_rate"):
            object.__setattr__(self, name, float(getattr(self, name)))

    @property
    def similarity(self) -> Similarity:
        return Similarity(self.tx, self.ty, self.s)

    def with_similarity(self, sim: Sequence[float]) -> "TransformState":
        tx, ty, s = sim
        return replace(self, tx=float(tx), ty=float(ty), s=float(s))

    @classmethod
    def initial(
        cls, sim: Sequence[float], model: LpMixtureModel, outlier_rate: float
    ) -> "TransformState":
        tx, ty, s = sim
        return cls(float(tx), float(ty), float(s), model.weights.copy(), outlier_rate)


@dataclass(frozen=True, eq=False)
class Responsibilities:
    """E-step posteriors: beta (N, M) per component, gamma (N,) for outliers."""

    beta: np.ndarray
    gamma: np.ndarray

    def __post_init__(self) -> None:
        beta = np.asarray(self.beta, dtype=np.float64)
        gamma = np.asarray(self.gamma, dtype=np.float64).reshape(-1)
        if beta.ndim != 2 or beta.shape[0] != gamma.shape[0]:
            raise ValidationError(
                f"responsibility shapes disagree: beta {beta.shape}, gamma {gamma.shape}"
            )
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "gamma", gamma)

    @property
    def component_mass(self) -> np.ndarray:
        """Sum over points of beta, per component."""
        return self.beta.sum(axis=0)  # type: ignore[no-any-return]


SimilarityLike = Union[Similarity, TransformState, Sequence[float]]


def _as_similarity(theta: SimilarityLike) -> Similarity:
    if isinstance(theta, Similarity):
        return theta
    if isinstance(theta, TransformState):
        return theta.similarity
    tx, ty, s = theta
    return Similarity(float(tx), float(ty), float(s))


def apply_transform(mu: np.ndarray, theta: SimilarityLike) -> np.ndarray:
    """Map reference coordinates into the target frame: s * mu + t."""
    sim = _as_similarity(theta)
    if sim.s <= 0:
        raise ValidationError(f"scale must be positive, got {sim.s}")
    mu = np.asarray(mu, dtype=np.float64)
    return mu * sim.s + np.array([sim.tx, sim.ty])  # type: ignore[no-any-return]


def inverse_transform(point: np.ndarray, theta: SimilarityLike) -> np.ndarray:
    """Map target coordinates back into the reference frame."""
    sim = _as_similarity(theta)
    if sim.s <= 0:
        raise ValidationError(f"scale must be positive, got {sim.s}")
    point = np.asarray(point, dtype=np.float64)
    return (point - np.array([sim.tx, sim.ty])) / sim.s  # type: ignore[no-any-return]


def compose_transforms(outer: SimilarityLike, inner: SimilarityLike) -> Similarity:
    """Similarity equal to applying `inner` first, then `outer`."""
    a = _as_similarity(outer)
    b = _as_similarity(inner)
    return Similarity(a.s * b.tx + a.tx, a.s * b.ty + a.ty, a.s * b.s)


def lp_norm_term(
    d: np.ndarray, spread: Sequence[float], s: float, p: int
) -> Union[float, np.ndarray]:
    """dx^p / (s^p sxx) + dy^p / (s^p syy) for displacement(s) d = (dx, dy)."""
    d = np.asarray(d, dtype=np.float64)
    sxx, syy = (float(v) for v in spread)
    values = np.concatenate([d.reshape(-1), [sxx, syy, float(s)]])
    if not np.all(np.isfinite(values)):
        raise ValidationError("lp_norm_term needs finite inputs")
    if sxx <= 0 or syy <= 0 or s <= 0:
        raise ValidationError("spread and scale must be positive")
    p = check_exponent(p)
    u = d / s
    result = u[..., 0] ** p / sxx + u[..., 1] ** p / syy
    if np.ndim(result) == 0:
        return float(result)
    return result  # type: ignore[no-any-return]


def log_normalization_constant(
    spread: np.ndarray, s: float, p: int
) -> Union[float, np.ndarray]:
    """ln Z, vectorized over a (..., 2) array of spreads."""
    spread = np.asarray(spread, dtype=np.float64)
    return (  # type: ignore[no-any-return]
        math.log(4.0 / p**2)
        + 2.0 * gammaln(1.0 / p)
        + 2.0 * math.log(s)
        + (np.log(spread[..., 0]) + np.log(spread[..., 1])) / p
    )


def normalization_constant(spread: Sequence[float], s: float, p: int) -> float:
    """Exact integral of exp(-lp_norm_term) over the plane."""
    p = check_exponent(p)
    if s <= 0 or min(spread) <= 0:
        raise ValidationError("spread and scale must be positive")
    return float(math.exp(log_normalization_constant(np.asarray(spread), s, p)))


def component_density(
    x: np.ndarray, component: LpComponent, theta: SimilarityLike, p: int
) -> Union[float, np.ndarray]:
    """N_p(X | T mu, s^p Sigma) for one component."""
    sim = _as_similarity(theta)
    center = apply_transform(np.array(component.center), sim)
    d = np.asarray(x, dtype=np.float64) - center
    norm = lp_norm_term(d, component.spread, sim.s, p)
    log_z = log_normalization_constant(np.array(component.spread), sim.s, p)
    return np.exp(-norm - log_z)  # type: ignore[no-any-return]


def lp_norm_matrix(
    xy: np.ndarray, model: LpMixtureModel, theta: SimilarityLike
) -> np.ndarray:
    """||X_i - T mu_c||^p for every point and component, (N, M)."""
    sim = _as_similarity(theta)
    p = model.p
    inv_s = 1.0 / sim.s
    ux = xy[:, 0:1] * inv_s - (model.centers[:, 0] + sim.tx * inv_s)
    uy = xy[:, 1:2] * inv_s - (model.centers[:, 1] + sim.ty * inv_s)
    norm = even_power(ux, p)
    norm *= 1.0 / model.spreads[:, 0]
    norm += even_power(uy, p) * (1.0 / model.spreads[:, 1])
    return norm


def log_component_densities(
    xy: np.ndarray, model: LpMixtureModel, theta: SimilarityLike
) -> np.ndarray:
    """ln N_p(X_i | T mu_c, s^p Sigma_c) as an (N, M) matrix."""
    sim = _as_similarity(theta)
    log_z = log_normalization_constant(model.spreads, sim.s, model.p)
    return -lp_norm_matrix(xy, model, sim) - log_z  # type: ignore[no-any-return]


def log_prior_columns(points: PointSet, model: LpMixtureModel) -> np.ndarray:
    """ln P(l_j | i) for the label of every component, (N, M); -inf where zero."""
    with np.errstate(divide="ignore"):
        return np.log(points.priors[:, model.label_index])  # type: ignore[no-any-return]


def log_outlier_density(outlier_rate: float, image_area: int) -> float:
    """ln(alpha / (H W)); -inf when alpha is zero."""
    if outlier_rate <= 0:
        return -math.inf
    return math.log(outlier_rate / image_area)


class AxisMass(NamedTuple):
    """ln F of one axis of a component and its derivatives in (t, s)."""

    log: np.ndarray
    d_t: np.ndarray
    d_s: np.ndarray
    d_tt: np.ndarray
    d_ts: np.ndarray
    d_ss: np.ndarray


class DomainMass(NamedTuple):
    """ln m_c per component, with gradient (M, 3) and Hessian (M, 3, 3) in (tx, ty, s)."""

    log: np.ndarray
    grad: np.ndarray
    hess: np.ndarray


def _tail(z: np.ndarray, p: int) -> np.ndarray:
    """P(Z > |z|) under the unit density p / (2 Gamma(1/p)) exp(-|z|^p)."""
    return 0.5 * gammaincc(1.0 / p, even_power(z, p))  # type: ignore[no-any-return]


def axis_mass(
    mu: np.ndarray,
    spread: np.ndarray,
    t: Union[float, np.ndarray],
    s: float,
    length: int,
    p: int,
) -> AxisMass:
    """Mass one axis of the transformed components puts on [-0.5, length - 0.5].

    Arrays broadcast, so t may carry a leading axis of candidate translations.
    Entries below DOMAIN_MASS_FLOOR are clamped and get zero derivatives.
    """
    unit = np.power(spread, 1.0 / p)
    sigma = s * unit
    center = s * mu + t
    z_lo = (-0.5 - center) / sigma
    z_hi = (length - 0.5 - center) / sigma
    tail_lo, tail_hi = _tail(z_lo, p), _tail(z_hi, p)
    mass = np.where(
        z_lo >= 0,
        tail_lo - tail_hi,
        np.where(z_hi <= 0, tail_hi - tail_lo, 1.0 - tail_lo - tail_hi),
    )
    kept = mass > DOMAIN_MASS_FLOOR
    safe = np.where(kept, mass, 1.0)

    norm = p / (2.0 * math.gamma(1.0 / p))
    g_lo = norm * np.exp(-even_power(z_lo, p))
    g_hi = norm * np.exp(-even_power(z_hi, p))
    # g'(z) = -p z^(p-1) g(z)
    dg_lo = -p * even_power(z_lo, p - 2) * z_lo * g_lo if p > 2 else -2.0 * z_lo * g_lo
    dg_hi = -p * even_power(z_hi, p - 2) * z_hi * g_hi if p > 2 else -2.0 * z_hi * g_hi
    zs_lo = -(z_lo + mu / unit) / s
    zs_hi = -(z_hi + mu / unit) / s

    f_t = (g_lo - g_hi) / sigma
    f_s = g_hi * zs_hi - g_lo * zs_lo
    f_tt = (dg_hi - dg_lo) / sigma**2
    f_ts = (dg_lo * zs_lo - dg_hi * zs_hi) / sigma - (g_lo - g_hi) / (sigma * s)
    f_ss = (
        dg_hi * zs_hi**2
        - 2.0 * g_hi * zs_hi / s
        - dg_lo * zs_lo**2
        + 2.0 * g_lo * zs_lo / s
    )

    l_t = f_t / safe
    l_s = f_s / safe
    zero = np.zeros_like(safe)
    return AxisMass(
        log=np.where(kept, np.log(safe), math.log(DOMAIN_MASS_FLOOR)),
        d_t=np.where(kept, l_t, zero),
        d_s=np.where(kept, l_s, zero),
        d_tt=np.where(kept, f_tt / safe - l_t * l_t, zero),
        d_ts=np.where(kept, f_ts / safe - l_t * l_s, zero),
        d_ss=np.where(kept, f_ss / safe - l_s * l_s, zero),
    )


def domain_mass(
    model: LpMixtureModel, theta: SimilarityLike, dims: Sequence[int]
) -> DomainMass:
    """Share m_c of every transformed component that falls inside a W x H image."""
    sim = _as_similarity(theta)
    width, height = dims
    x = axis_mass(model.centers[:, 0], model.spreads[:, 0], sim.tx, sim.s, width, model.p)
    y = axis_mass(model.centers[:, 1], model.spreads[:, 1], sim.ty, sim.s, height, model.p)
    m = len(model)
    grad = np.stack([x.d_t, y.d_t, x.d_s + y.d_s], axis=1)
    hess = np.zeros((m, 3, 3))
    hess[:, 0, 0] = x.d_tt
    hess[:, 1, 1] = y.d_tt
    hess[:, 0, 2] = hess[:, 2, 0] = x.d_ts
    hess[:, 1, 2] = hess[:, 2, 1] = y.d_ts
    hess[:, 2, 2] = x.d_ss + y.d_ss
    return DomainMass(x.log + y.log, grad, hess)


def log_domain_mass(
    model: LpMixtureModel, theta: SimilarityLike, dims: Sequence[int]
) -> np.ndarray:
    """ln m_c, (M,); zero for components well inside the image."""
    return domain_mass(model, theta, dims).log


def log_joint_terms(
    points: PointSet,
    model: LpMixtureModel,
    state: TransformState,
    log_prior: Optional[np.ndarray] = None,
    clip_to_image: bool = True,
) -> Tuple[np.ndarray, float]:
    """Log numerators ln(pi_c N_c prior_c) (N, M) and ln lambda.

    log_prior may carry a precomputed log_prior_columns(points, model). With
    clip_to_image every component density is renormalized to the share m_c of
    its mass that falls inside the source image, so a facade cut by the image
    border is not pulled inwards.
    """
    if log_prior is None:
        log_prior = log_prior_columns(points, model)
    with np.errstate(divide="ignore"):
        column = np.log(state.weights)
    column = column - log_normalization_constant(model.spreads, state.s, model.p)
    if clip_to_image:
        column = column - log_domain_mass(model, state, points.source_dims)
    log_num = log_prior - lp_norm_matrix(points.xy, model, state)
    log_num += column
    return log_num, log_outlier_density(state.outlier_rate, points.image_area)


def log_evidence(log_num: np.ndarray, log_lambda: float) -> np.ndarray:
    """ln D_i = ln(sum_c exp(log_num_ic) + lambda), stabilized."""
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.logaddexp(logsumexp(log_num, axis=1), log_lambda)  # type: ignore[no-any-return]


def dirichlet_log_prior(weights: np.ndarray, dirichlet: np.ndarray) -> float:
    """sum_c (alpha_c - 1) ln pi_c with pi floored at WEIGHT_FLOOR."""
    safe = np.maximum(weights, WEIGHT_FLOOR)
    return float(np.sum((dirichlet - 1.0) * np.log(safe)))


def map_objective(
    points: PointSet,
    model: LpMixtureModel,
    state: TransformState,
    clip_to_image: bool = True,
) -> float:
    """MAP objective R: log-likelihood with outlier class plus Dirichlet log-prior."""
    if len(points) == 0:
        raise ValidationError("map objective needs at least one point")
    log_num, log_lambda = log_joint_terms(
        points, model, state, clip_to_image=clip_to_image
    )
    log_d = log_evidence(log_num, log_lambda)
    return float(np.sum(log_d)) + dirichlet_log_prior(state.weights, model.dirichlet)

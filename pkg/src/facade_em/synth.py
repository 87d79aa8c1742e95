"""Procedural facades with known ground truth for testing and benchmarks.

A reference facade is a set of axis-aligned rectangle grids, one or more per
label. The target prior map is that facade moved by a true similarity, with
optional label confusion, prior noise, occlusion and clutter.
"""

from dataclasses import dataclass, field, replace
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from .em import Box
from .errors import ConfigError, ValidationError
from .model import LabelProbMap, LabelSet, Similarity
from .reference import ReferenceSegmentation

Rect = Tuple[int, int, int, int]  # x, y, w, h

SWAP_WRONG_PROB = 0.6
SWAP_TRUE_PROB = 0.35
CLUTTER_PROB_RANGE = (0.3, 0.9)
MIN_VISIBLE_FRACTION = 0.25


@dataclass(frozen=True)
class GridSpec:
    """rows x cols rectangles of one label, laid out from origin with a pitch."""

    label: str
    rows: int
    cols: int
    width: int
    height: int
    origin: Tuple[int, int]
    pitch: Tuple[int, int]

    def rectangles(self) -> List[Rect]:
        x0, y0 = self.origin
        px, py = self.pitch
        return [
            (x0 + c * px, y0 + r * py, self.width, self.height)
            for r in range(self.rows)
            for c in range(self.cols)
        ]


def default_grids() -> Tuple[GridSpec, ...]:
    return (
        GridSpec("window", 3, 4, 20, 18, (6, 6), (28, 26)),
        GridSpec("door", 1, 2, 16, 14, (20, 80), (64, 0)),
    )


@dataclass(frozen=True)
class SynthSpec:
    """Generator settings; a fixed seed makes generation fully reproducible."""

    ref_dims: Tuple[int, int] = (120, 96)
    labels: Tuple[str, ...] = ("window", "door")
    grids: Tuple[GridSpec, ...] = field(default_factory=default_grids)
    true_transform: Similarity = Similarity(20.0, 16.0, 1.0)
    target_dims: Tuple[int, int] = (160, 128)

    # Prior values inside the facade
    p_true: float = 0.8
    p_other: float = 0.1
    prior_noise: float = 0.0
    background_noise: float = 0.0

    # Corruptions, indices refer to reference_rectangles() order
    occlusions: Tuple[Rect, ...] = ()
    occluded_components: Tuple[int, ...] = ()
    swapped_components: Tuple[int, ...] = ()
    clutter_points: int = 0
    clutter_fraction: float = 0.0  # of the facade pixel count

    # Initialization box perturbation, fraction of the facade size
    box_jitter: float = 0.0

    seed: int = 0
    count: int = 1

    # Batch mode: draw the true transform per instance when set
    scale_range: Optional[Tuple[float, float]] = None
    shift_fraction: float = 0.15

    def __post_init__(self) -> None:
        if len(set(self.labels)) != len(self.labels) or not self.labels:
            raise ValidationError(f"invalid label list {self.labels}")
        for grid in self.grids:
            if grid.label not in self.labels:
                raise ValidationError(f"grid label {grid.label!r} not in {self.labels}")
            if min(grid.rows, grid.cols, grid.width, grid.height) < 1:
                raise ValidationError(f"empty grid {grid}")
        if not self.true_transform.s > 0:
            raise ValidationError(f"true scale must be positive: {self.true_transform}")
        if not 0.0 < self.p_true <= 1.0 or self.p_other < 0:
            raise ValidationError("prior values must lie in [0, 1]")
        if self.p_true + self.p_other * (len(self.labels) - 1) > 1.0 + 1e-9:
            raise ValidationError("p_true plus the other label priors exceed 1")
        if self.prior_noise < 0 or self.background_noise < 0 or self.box_jitter < 0:
            raise ValidationError("noise levels must be non-negative")
        if self.clutter_points < 0 or self.clutter_fraction < 0:
            raise ValidationError("clutter amounts must be non-negative")
        if self.count < 1:
            raise ValidationError("count must be >= 1")

    def reference_rectangles(self) -> List[Tuple[int, Rect]]:
        """(label index, rectangle) in generation order."""
        return [
            (self.labels.index(grid.label), rect)
            for grid in self.grids
            for rect in grid.rectangles()
        ]


class SynthTruth(NamedTuple):
    """Ground truth of one instance."""

    transform: Similarity
    true_box: Box
    init_box: Box
    label_image: np.ndarray  # target frame, 0 = background, j + 1 = label j
    component_masks: List[np.ndarray]
    occluded: Tuple[int, ...]


class SynthInstance(NamedTuple):
    reference: ReferenceSegmentation
    target: LabelProbMap
    truth: SynthTruth


def _overlaps(a: Rect, b: Rect) -> bool:
    ax, ay, aw, ah = a
    bx, by, bw, bh = b
    return ax < bx + bw and bx < ax + aw and ay < by + bh and by < ay + ah


def _check_layout(spec: SynthSpec, rects: Sequence[Tuple[int, Rect]]) -> None:
    width, height = spec.ref_dims
    for i, (label_i, a) in enumerate(rects):
        if a[0] < 0 or a[1] < 0 or a[0] + a[2] > width or a[1] + a[3] > height:
            raise ValidationError(f"component {i} {a} lies outside the reference frame")
        for j in range(i):
            label_j, b = rects[j]
            if label_i == label_j and _overlaps(a, b):
                raise ValidationError(
                    f"overlapping components within label {spec.labels[label_i]!r}: "
                    f"{b} and {a}"
                )


def _check_visible(spec: SynthSpec, box: Box) -> None:
    width, height = spec.target_dims
    ix = max(0.0, min(box.x + box.width, width) - max(box.x, 0.0))
    iy = max(0.0, min(box.y + box.height, height) - max(box.y, 0.0))
    if ix * iy < MIN_VISIBLE_FRACTION * box.width * box.height:
        raise ValidationError(
            f"true transform {tuple(spec.true_transform)} leaves less than 25% "
            f"of the facade inside the target frame"
        )


def _transformed_mask(
    rect: Rect, sim: Similarity, target_dims: Tuple[int, int]
) -> np.ndarray:
    """Target pixels whose back-projection falls inside the rectangle's pixels."""
    width, height = target_dims
    x0, y0, w, h = rect
    u = (np.arange(width) - sim.tx) / sim.s
    v = (np.arange(height) - sim.ty) / sim.s
    cols = (u >= x0 - 0.5) & (u < x0 + w - 0.5)
    rows = (v >= y0 - 0.5) & (v < y0 + h - 0.5)
    return rows[:, None] & cols[None, :]  # type: ignore[no-any-return]


def reference_segmentation(spec: SynthSpec) -> ReferenceSegmentation:
    rects = spec.reference_rectangles()
    _check_layout(spec, rects)
    width, height = spec.ref_dims
    mask = np.zeros((height, width), dtype=np.int32)
    for label, (x, y, w, h) in rects:
        mask[y : y + h, x : x + w] = label + 1
    return ReferenceSegmentation(LabelSet.from_names(spec.labels), mask)


def _perturbed_box(box: Box, jitter: float, rng: np.random.Generator) -> Box:
    if jitter <= 0:
        return box
    dx, dy, fw, fh = rng.uniform(-jitter, jitter, size=4)
    width = box.width * (1.0 + fw)
    height = box.height * (1.0 + fh)
    cx, cy = box.center
    return Box(
        cx + dx * box.width - width / 2.0,
        cy + dy * box.height - height / 2.0,
        width,
        height,
    )


def generate_instance(spec: SynthSpec) -> SynthInstance:
    """Reference mask, corrupted target prior map and ground truth for one seed."""
    rng = np.random.default_rng(spec.seed)
    reference = reference_segmentation(spec)
    sim = spec.true_transform
    ref_w, ref_h = spec.ref_dims
    true_box = Box(sim.tx, sim.ty, sim.s * ref_w, sim.s * ref_h)
    _check_visible(spec, true_box)

    width, height = spec.target_dims
    k = len(spec.labels)
    probs = np.zeros((height, width, k), dtype=np.float64)
    label_image = np.zeros((height, width), dtype=np.int32)
    component_masks = []
    rects = spec.reference_rectangles()
    for index, (label, rect) in enumerate(rects):
        inside = _transformed_mask(rect, sim, spec.target_dims)
        component_masks.append(inside)
        label_image[inside] = label + 1
        values = np.full(k, spec.p_other)
        values[label] = spec.p_true
        if index in spec.swapped_components and k > 1:
            values[:] = 0.0
            values[label] = SWAP_TRUE_PROB
            values[(label + 1) % k] = SWAP_WRONG_PROB
        probs[inside] = values

    facade = label_image > 0
    if spec.prior_noise > 0:
        noise = rng.normal(0.0, spec.prior_noise, size=(int(facade.sum()), k))
        probs[facade] = np.clip(probs[facade] + noise, 0.0, 1.0)
    if spec.background_noise > 0:
        background = ~facade
        probs[background] = rng.uniform(
            0.0, spec.background_noise, size=(int(background.sum()), k)
        )

    occluded = np.zeros((height, width), dtype=bool)
    for x, y, w, h in spec.occlusions:
        occluded[max(y, 0) : max(y + h, 0), max(x, 0) : max(x + w, 0)] = True
    for index in spec.occluded_components:
        if not 0 <= index < len(rects):
            raise ValidationError(f"occluded component {index} does not exist")
        occluded |= component_masks[index]
    probs[occluded] = 0.0

    n_clutter = spec.clutter_points + int(round(spec.clutter_fraction * facade.sum()))
    if n_clutter:
        free = np.flatnonzero(~facade & ~occluded)
        chosen = rng.choice(free, size=min(n_clutter, free.size), replace=False)
        rows, cols = np.unravel_index(chosen, (height, width))
        probs[rows, cols, :] = 0.0
        probs[rows, cols, rng.integers(0, k, size=chosen.size)] = rng.uniform(
            *CLUTTER_PROB_RANGE, size=chosen.size
        )

    totals = probs.sum(axis=2)
    over = totals > 1.0
    probs[over] /= totals[over, None]
    target = LabelProbMap(reference.labels, probs.astype(np.float32))

    truth = SynthTruth(
        transform=sim,
        true_box=true_box,
        init_box=_perturbed_box(true_box, spec.box_jitter, rng),
        label_image=label_image,
        component_masks=component_masks,
        occluded=tuple(
            i for i, m in enumerate(component_masks) if m.any() and occluded[m].all()
        ),
    )
    return SynthInstance(reference, target, truth)


def draw_transform(spec: SynthSpec, rng: np.random.Generator) -> Similarity:
    """Random true transform: scale from scale_range, shift around the centred placement."""
    assert spec.scale_range is not None
    s = float(rng.uniform(*spec.scale_range))
    width, height = spec.target_dims
    ref_w, ref_h = spec.ref_dims
    dx, dy = rng.uniform(-spec.shift_fraction, spec.shift_fraction, size=2)
    return Similarity(
        (width - s * ref_w) / 2.0 + dx * width,
        (height - s * ref_h) / 2.0 + dy * height,
        s,
    )


def batch_specs(spec: SynthSpec) -> List[SynthSpec]:
    """One spec per instance, seeds spec.seed, spec.seed + 1, ..."""
    specs = []
    for i in range(spec.count):
        seed = spec.seed + i
        item = replace(spec, seed=seed, count=1)
        if spec.scale_range is not None:
            # separate stream so the transform draw does not shift the noise draws
            rng = np.random.default_rng([seed, 1])
            item = replace(item, true_transform=draw_transform(spec, rng))
        specs.append(item)
    return specs


def _ints(value: str) -> Tuple[int, ...]:
    return tuple(int(v) for v in value.split(",") if v.strip())


def _floats(value: str) -> Tuple[float, ...]:
    return tuple(float(v) for v in value.split(",") if v.strip())


def _grid(label: str, value: str) -> GridSpec:
    numbers = _ints(value)
    if len(numbers) != 8:
        raise ConfigError(
            f"grid.{label} needs rows,cols,width,height,x0,y0,pitch_x,pitch_y, got {value!r}"
        )
    rows, cols, w, h, x0, y0, px, py = numbers
    return GridSpec(label, rows, cols, w, h, (x0, y0), (px, py))


def spec_from_config(values: Dict[str, str]) -> SynthSpec:
    """SynthSpec from `key = value` pairs; missing keys keep their defaults.

    Grids are `grid.<label> = rows,cols,width,height,x0,y0,pitch_x,pitch_y`;
    occlusions are `x,y,w,h` groups separated by `;`.
    """
    base = SynthSpec()
    kwargs: Dict[str, object] = {}
    grids = []
    tx, ty, s = base.true_transform
    try:
        for key, value in values.items():
            if key.startswith("grid."):
                grids.append(_grid(key[len("grid.") :], value))
            elif key in ("ref_width", "ref_height", "target_width", "target_height"):
                kwargs[key] = int(value)
            elif key == "labels":
                kwargs["labels"] = tuple(v.strip() for v in value.split(",") if v.strip())
            elif key == "tx":
                tx = float(value)
            elif key == "ty":
                ty = float(value)
            elif key == "s":
                s = float(value)
            elif key in ("p_true", "p_other", "prior_noise", "background_noise",
                         "clutter_fraction", "box_jitter", "shift_fraction"):
                kwargs[key] = float(value)
            elif key in ("clutter_points", "seed", "count"):
                kwargs[key] = int(value)
            elif key in ("occluded_components", "swapped_components"):
                kwargs[key] = _ints(value)
            elif key == "occlusions":
                rects = tuple(_ints(part) for part in value.split(";") if part.strip())
                if any(len(r) != 4 for r in rects):
                    raise ConfigError(f"occlusions need x,y,w,h groups, got {value!r}")
                kwargs["occlusions"] = rects
            elif key == "scale_range":
                bounds = _floats(value)
                if len(bounds) != 2:
                    raise ConfigError(f"scale_range needs min,max, got {value!r}")
                kwargs["scale_range"] = bounds
            else:
                raise ConfigError(f"unknown synth key {key!r}")
    except ValueError as e:
        raise ConfigError(f"invalid synth value: {e}") from e

    ref_dims = (
        int(kwargs.pop("ref_width", base.ref_dims[0])),  # type: ignore[call-overload]
        int(kwargs.pop("ref_height", base.ref_dims[1])),  # type: ignore[call-overload]
    )
    target_dims = (
        int(kwargs.pop("target_width", base.target_dims[0])),  # type: ignore[call-overload]
        int(kwargs.pop("target_height", base.target_dims[1])),  # type: ignore[call-overload]
    )
    if grids:
        kwargs["grids"] = tuple(grids)
        if "labels" not in kwargs:
            kwargs["labels"] = tuple(dict.fromkeys(g.label for g in grids))
    return SynthSpec(
        ref_dims=ref_dims,
        target_dims=target_dims,
        true_transform=Similarity(tx, ty, s),
        **kwargs,  # type: ignore[arg-type]
    )

"""File formats: label probability maps, mixture models, PGM masks, reports.

Every writer goes through atomic_write, so readers never see a partial file.
"""

import os
import re
import tempfile
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Tuple, Union

import numpy as np

from .em import Box, EmReport
from .errors import FormatError, ValidationError
from .model import (
    WEIGHT_SUM_TOLERANCE,
    LabelProbMap,
    LabelSet,
    LpComponent,
    LpMixtureModel,
    Similarity,
    apply_transform,
)
from .utils import format_box, format_float, join_floats, parse_box

PathLike = Union[str, Path]

LPM_MAGIC = b"LPM1\n"
LPMIX_MAGIC = "LPMIX1"
MODEL_WEIGHT_TOLERANCE = 1e-6
TRACE_HEADER = "t\tR\ttx\tty\ts\talpha\tlevel"


def atomic_write(path: PathLike, data: Union[bytes, str]) -> Path:
    """Write to a temporary file in the target directory, then rename over path."""
    path = Path(path)
    if isinstance(data, str):
        data = data.encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp_name, path)
    except BaseException:
        if os.path.exists(tmp_name):
            os.unlink(tmp_name)
        raise
    return path


def _read_bytes(path: PathLike) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as e:
        raise FormatError(f"cannot read file: {e.strerror or e}", path) from e


def _check_label_names(labels: LabelSet) -> None:
    for name in labels:
        if not name or re.search(r"\s", name):
            raise ValidationError(f"label name {name!r} must be non-empty without whitespace")


# .lpm: ASCII header, then K row-major planes of little-endian float32


def write_lpm(path: PathLike, prob_map: LabelProbMap) -> Path:
    _check_label_names(prob_map.labels)
    header = (
        LPM_MAGIC
        + f"{prob_map.width} {prob_map.height} {len(prob_map.labels)}\n".encode("ascii")
        + (" ".join(prob_map.labels) + "\n").encode("utf-8")
    )
    planes = np.ascontiguousarray(np.moveaxis(prob_map.probs, 2, 0), dtype="<f4")
    return atomic_write(path, header + planes.tobytes())


def _header_line(data: bytes, offset: int, what: str, path: PathLike) -> Tuple[str, int]:
    end = data.find(b"\n", offset)
    if end < 0:
        raise FormatError(f"unterminated {what} line", path, offset)
    try:
        return data[offset:end].decode("utf-8"), end + 1
    except UnicodeDecodeError as e:
        raise FormatError(f"{what} line is not UTF-8", path, offset) from e


def read_lpm(path: PathLike) -> LabelProbMap:
    data = _read_bytes(path)
    if not data.startswith(LPM_MAGIC):
        raise FormatError("bad magic", path, 0)
    offset = len(LPM_MAGIC)
    line, next_offset = _header_line(data, offset, "dimension", path)
    try:
        width, height, k = (int(v) for v in line.split())
    except ValueError as e:
        raise FormatError(f"expected '<W> <H> <K>', got {line!r}", path, offset) from e
    if width < 1 or height < 1 or k < 1:
        raise FormatError(f"dimensions must be positive, got {line!r}", path, offset)
    offset = next_offset
    line, next_offset = _header_line(data, offset, "label", path)
    names = line.split()
    if len(names) != k:
        raise FormatError(
            f"header declares K={k} but lists {len(names)} label names", path, offset
        )
    offset = next_offset
    expected = k * width * height * 4
    available = len(data) - offset
    if available < expected:
        raise FormatError(
            f"truncated payload: expected {expected} bytes, found {available}",
            path,
            len(data),
        )
    if available > expected:
        raise FormatError(
            f"{available - expected} trailing bytes after payload", path, offset + expected
        )
    planes = np.frombuffer(data, dtype="<f4", count=k * width * height, offset=offset)
    probs = np.moveaxis(planes.reshape(k, height, width), 0, 2).astype(np.float32)
    try:
        return LabelProbMap(LabelSet.from_names(names), probs)
    except ValidationError as e:
        raise FormatError(str(e), path, offset) from e


# .lpmix: text header `LPMIX1 p w h K`, label names, one component per line


def format_lpmix(model: LpMixtureModel) -> str:
    _check_label_names(model.labels)
    width, height = model.ref_dims
    lines = [
        f"{LPMIX_MAGIC} {model.p} {width} {height} {len(model.labels)}",
        " ".join(model.labels),
    ]
    for comp, alpha in zip(model.components, model.dirichlet):
        values = (*comp.center, *comp.spread, comp.weight, float(alpha))
        lines.append(f"{comp.label_index} {join_floats(values)}")
    return "\n".join(lines) + "\n"


def write_lpmix(path: PathLike, model: LpMixtureModel) -> Path:
    return atomic_write(path, format_lpmix(model))


def parse_lpmix(text: str, path: Optional[PathLike] = None) -> LpMixtureModel:
    lines = text.splitlines(keepends=True)
    offsets = np.cumsum([0] + [len(line.encode("utf-8")) for line in lines]).tolist()

    def fail(message: str, lineno: int) -> FormatError:
        offset = offsets[lineno] if lineno < len(offsets) else offsets[-1]
        return FormatError(f"line {lineno + 1}: {message}", path, offset)

    if not lines or not lines[0].startswith(LPMIX_MAGIC):
        raise FormatError("bad magic", path, 0)
    header = lines[0].split()
    if len(header) != 5:
        raise fail(f"expected '{LPMIX_MAGIC} p w h K', got {lines[0].strip()!r}", 0)
    try:
        p, width, height, k = (int(v) for v in header[1:])
    except ValueError as e:
        raise fail(f"non-integer header field in {lines[0].strip()!r}", 0) from e
    if p < 2 or p % 2:
        raise fail(f"exponent p must be even and >= 2, got {p}", 0)
    if len(lines) < 2:
        raise fail("missing label names", 1)
    names = lines[1].split()
    if len(names) != k:
        raise fail(f"header declares K={k} but lists {len(names)} label names", 1)

    components = []
    dirichlet = []
    for lineno in range(2, len(lines)):
        fields = lines[lineno].split()
        if not fields:
            continue
        if len(fields) != 7:
            raise fail(f"expected 7 fields per component, got {len(fields)}", lineno)
        try:
            label = int(fields[0])
            mx, my, sxx, syy, weight, alpha = (float(v) for v in fields[1:])
        except ValueError as e:
            raise fail(f"invalid number in {lines[lineno].strip()!r}", lineno) from e
        if not 0 <= label < k:
            raise fail(f"label index {label} outside 0..{k - 1}", lineno)
        if not (sxx > 0 and syy > 0):
            raise fail(f"sigma must be positive, got ({sxx}, {syy})", lineno)
        if not 0.0 <= weight <= 1.0 or not alpha > 0:
            raise fail("weight must lie in [0, 1] and alpha_dir be positive", lineno)
        components.append((label, (mx, my), (sxx, syy), weight))
        dirichlet.append(alpha)
    if not components:
        raise fail("model has no components", len(lines))

    weights = np.array([c[3] for c in components])
    total = float(weights.sum())
    if abs(total - 1.0) > MODEL_WEIGHT_TOLERANCE:
        raise FormatError(f"mixture weights sum to {total:.9f}, not 1", path)
    if abs(total - 1.0) > WEIGHT_SUM_TOLERANCE:
        weights = weights / total
    try:
        return LpMixtureModel(
            labels=LabelSet.from_names(names),
            components=tuple(
                LpComponent(label, center, spread, float(w))
                for (label, center, spread, _), w in zip(components, weights)
            ),
            p=p,
            ref_dims=(width, height),
            dirichlet=np.array(dirichlet),
        )
    except ValidationError as e:
        raise FormatError(str(e), path) from e


def read_lpmix(path: PathLike) -> LpMixtureModel:
    data = _read_bytes(path)
    try:
        text = data.decode("utf-8")
    except UnicodeDecodeError as e:
        raise FormatError("model file is not UTF-8 text", path, e.start) from e
    return parse_lpmix(text, path)


# PGM P5 indexed masks


def write_pgm(path: PathLike, image: np.ndarray) -> Path:
    image = np.asarray(image)
    if image.ndim != 2:
        raise ValidationError(f"PGM image must be 2D, got shape {image.shape}")
    if image.size and (image.min() < 0 or image.max() > 65535):
        raise ValidationError("PGM values must lie in 0..65535")
    maxval = 255 if (image.size == 0 or image.max() <= 255) else 65535
    dtype = "u1" if maxval == 255 else ">u2"
    height, width = image.shape
    header = f"P5\n{width} {height}\n{maxval}\n".encode("ascii")
    return atomic_write(path, header + np.ascontiguousarray(image, dtype=dtype).tobytes())


_PGM_TOKEN = re.compile(rb"(?:\s|#[^\n]*\n)*(\d+)")


def read_pgm(path: PathLike) -> np.ndarray:
    """Binary PGM (P5) as a 2D integer array."""
    data = _read_bytes(path)
    if not data.startswith(b"P5"):
        raise FormatError("bad magic: expected binary PGM 'P5'", path, 0)
    offset = 2
    values = []
    for what in ("width", "height", "maxval"):
        match = _PGM_TOKEN.match(data, offset)
        if match is None:
            raise FormatError(f"missing PGM {what}", path, offset)
        values.append(int(match.group(1)))
        offset = match.end()
    width, height, maxval = values
    if width < 1 or height < 1 or not 0 < maxval <= 65535:
        raise FormatError(f"invalid PGM header {width}x{height} maxval {maxval}", path, 2)
    if offset >= len(data) or not data[offset : offset + 1].isspace():
        raise FormatError("missing whitespace after PGM header", path, offset)
    offset += 1
    itemsize = 1 if maxval < 256 else 2
    expected = width * height * itemsize
    if len(data) - offset < expected:
        raise FormatError(
            f"truncated payload: expected {expected} bytes, found {len(data) - offset}",
            path,
            len(data),
        )
    dtype = "u1" if itemsize == 1 else ">u2"
    pixels = np.frombuffer(data, dtype=dtype, count=width * height, offset=offset)
    image = pixels.reshape(height, width).astype(np.int32)
    if image.size and image.max() > maxval:
        raise FormatError(f"pixel value above maxval {maxval}", path, offset)
    return image  # type: ignore[no-any-return]


# key=value reports


def format_key_values(values: Dict[str, str]) -> str:
    return "".join(f"{key}={value}\n" for key, value in values.items())


def parse_key_values(text: str, path: Optional[PathLike] = None) -> Dict[str, str]:
    values: Dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise FormatError(f"line {lineno}: expected key=value, got {raw!r}", path)
        key, value = line.split("=", 1)
        values[key.strip()] = value.strip()
    return values


def read_key_values(path: PathLike) -> Dict[str, str]:
    data = _read_bytes(path)
    try:
        return parse_key_values(data.decode("utf-8"), path)
    except UnicodeDecodeError as e:
        raise FormatError("file is not UTF-8 text", path, e.start) from e


def registered_box(model: LpMixtureModel, sim: Similarity) -> np.ndarray:
    """Reference frame corners mapped into the target: (4, 2) TL, TR, BL, BR."""
    width, height = model.ref_dims
    corners = np.array(
        [[0.0, 0.0], [width, 0.0], [0.0, height], [width, height]], dtype=np.float64
    )
    return apply_transform(corners, sim)


def result_values(
    report: EmReport, model: LpMixtureModel, generated_at: Optional[str] = None
) -> Dict[str, str]:
    state = report.state
    values = {
        "tx": format_float(state.tx),
        "ty": format_float(state.ty),
        "s": format_float(state.s),
        "alpha": format_float(state.outlier_rate),
        "R": format_float(report.objective),
        "iterations": str(report.iterations),
        "converged": "true" if report.converged else "false",
        "init_index": str(report.init_index),
    }
    for level in report.levels:
        values[f"iterations_{level.name}"] = str(level.iterations)
        values[f"termination_{level.name}"] = level.termination
    values["weights"] = ",".join(format_float(w) for w in state.weights)
    corners = registered_box(model, state.similarity)
    values["registered_box"] = ",".join(format_float(v) for v in corners.reshape(-1))
    if generated_at:
        values["generated_at"] = generated_at
    return values


def write_result(
    path: PathLike,
    report: EmReport,
    model: LpMixtureModel,
    generated_at: Optional[str] = None,
) -> Path:
    return atomic_write(path, format_key_values(result_values(report, model, generated_at)))


def _similarity_from(values: Dict[str, str], path: PathLike) -> Similarity:
    try:
        return Similarity(float(values["tx"]), float(values["ty"]), float(values["s"]))
    except KeyError as e:
        raise FormatError(f"missing key {e.args[0]!r}", path) from e
    except ValueError as e:
        raise FormatError(f"invalid transform value: {e}", path) from e


def read_result(path: PathLike) -> Tuple[Similarity, Dict[str, str]]:
    values = read_key_values(path)
    return _similarity_from(values, path), values


def format_trace(report: EmReport) -> str:
    """One `t R tx ty s alpha level` row per iterate; t counts across levels."""
    lines = [TRACE_HEADER]
    for t, r in enumerate(report.trace):
        numbers = [format_float(v) for v in (r.objective, r.tx, r.ty, r.s, r.alpha)]
        lines.append("\t".join([str(t)] + numbers + [r.level]))
    return "\n".join(lines) + "\n"


def write_trace(path: PathLike, report: EmReport) -> Path:
    return atomic_write(path, format_trace(report))


def write_truth(
    path: PathLike,
    transform: Similarity,
    true_box: Box,
    init_box: Box,
    occluded: Iterable[int] = (),
) -> Path:
    values = {
        "tx": format_float(transform.tx),
        "ty": format_float(transform.ty),
        "s": format_float(transform.s),
        "true_box": format_box(true_box),
        "init_box": format_box(init_box),
        "occluded": ",".join(str(i) for i in occluded),
    }
    return atomic_write(path, format_key_values(values))


def read_truth(path: PathLike) -> Tuple[Similarity, Dict[str, str]]:
    values = read_key_values(path)
    return _similarity_from(values, path), values


def write_boxes(path: PathLike, boxes: Iterable[Box]) -> Path:
    return atomic_write(path, "".join(format_box(b) + "\n" for b in boxes))


def read_boxes(path: PathLike) -> List[Box]:
    """One X,Y,W,H box per line; blank lines and # comments ignored."""
    data = _read_bytes(path)
    boxes = []
    for lineno, raw in enumerate(data.decode("utf-8", errors="replace").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        try:
            boxes.append(parse_box(line))
        except ValidationError as e:
            raise FormatError(f"line {lineno}: {e}", path) from e
    return boxes

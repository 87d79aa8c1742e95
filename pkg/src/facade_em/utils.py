"""Utility functions for facade-em: argument parsing helpers and timestamps."""

from datetime import datetime
from typing import List, Optional, Sequence, Tuple

import pytz

from .em import Box
from .errors import ConfigError, ValidationError
from .evaluation import GridRange


def split_csv(value: str) -> List[str]:
    """Split a comma-separated list, dropping blanks."""
    return [part.strip() for part in value.split(",") if part.strip()]


def parse_float_list(value: str) -> List[float]:
    try:
        return [float(part) for part in split_csv(value)]
    except ValueError as e:
        raise ConfigError(f"invalid number list {value!r}") from e


def parse_box(value: str) -> Box:
    """X,Y,W,H -> Box; width and height must be positive."""
    numbers = parse_float_list(value)
    if len(numbers) != 4:
        raise ConfigError(f"box needs X,Y,W,H, got {value!r}")
    box = Box(*numbers)
    if box.width <= 0 or box.height <= 0:
        raise ValidationError(f"degenerate detection: box {value!r} has no area")
    return box


def format_box(box: Box) -> str:
    return f"{box.x!r},{box.y!r},{box.width!r},{box.height!r}"


def parse_grid(value: str) -> Tuple[GridRange, GridRange, GridRange]:
    """TX0:TX1:STEP,TY0:TY1:STEP,S0:S1:STEP."""
    parts = split_csv(value)
    if len(parts) != 3:
        raise ConfigError(f"grid needs three ranges for tx, ty and s, got {value!r}")
    ranges = []
    for part in parts:
        try:
            start, stop, step = (float(v) for v in part.split(":"))
        except ValueError as e:
            raise ConfigError(f"invalid grid range {part!r}") from e
        grid = GridRange(start, stop, step)
        grid.values()  # validates
        ranges.append(grid)
    return ranges[0], ranges[1], ranges[2]


def parse_bounds(value: str) -> Tuple[float, float]:
    numbers = parse_float_list(value)
    if len(numbers) != 2:
        raise ConfigError(f"expected MIN,MAX, got {value!r}")
    return numbers[0], numbers[1]


def get_timezone(name: str) -> pytz.BaseTzInfo:
    try:
        return pytz.timezone(name)
    except pytz.UnknownTimeZoneError as e:
        raise ConfigError(f"unknown timezone {name!r}") from e


def timestamp(timezone: str = "UTC", now: Optional[datetime] = None) -> str:
    """ISO-8601 timestamp in the given timezone, seconds precision."""
    tz = get_timezone(timezone)
    if now is None:
        current = datetime.now(tz)
    elif now.tzinfo is None:
        current = tz.localize(now)
    else:
        current = now.astimezone(tz)
    return current.isoformat(timespec="seconds")


def format_float(value: float) -> str:
    """Shortest repr that round-trips, locale-independent."""
    return repr(float(value))


def join_floats(values: Sequence[float]) -> str:
    return " ".join(format_float(v) for v in values)

"""Configuration management for facade-em."""

import argparse
import logging
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Optional, Sequence, Tuple

from .errors import ConfigError

PACKAGE_LOGGER = "facade_em"


@dataclass
class Config:
    """Application settings shared by all subcommands."""

    # Logging
    log_level: str = "INFO"
    log_file: Optional[Path] = None

    # Reports
    report_timezone: str = "UTC"

    # Output
    output_path: Optional[Path] = None


@dataclass
class EmConfig:
    """Registration settings."""

    p: int = 4
    epsilon: float = 0.1  # px
    max_iters: int = 100  # per resolution level
    stride: int = 2
    alpha_bounds: Tuple[float, float] = (0.01, 0.9)
    threshold: float = 0.01
    gn_max_iters: int = 20

    # Reference fitting
    min_component_px: int = 4
    calibrate_spread: bool = True

    # Run the downsampled level before the full set
    use_coarse_level: bool = True

    # Renormalize component densities to their in-image mass
    clip_to_image: bool = True

    def __post_init__(self) -> None:
        if self.p < 2 or self.p % 2:
            raise ConfigError(f"p must be an even integer >= 2, got {self.p}")
        if not self.epsilon > 0:
            raise ConfigError(f"epsilon must be positive, got {self.epsilon}")
        if self.max_iters < 1 or self.gn_max_iters < 1:
            raise ConfigError("iteration limits must be positive")
        if self.stride < 1:
            raise ConfigError(f"stride must be >= 1, got {self.stride}")
        low, high = self.alpha_bounds
        if not 0.0 < low < high < 1.0:
            raise ConfigError(f"alpha bounds must satisfy 0 < min < max < 1: {self.alpha_bounds}")
        if not 0.0 < self.threshold < 1.0:
            raise ConfigError(f"threshold must lie in (0, 1), got {self.threshold}")
        if self.min_component_px < 1:
            raise ConfigError("min_component_px must be >= 1")


def load_key_value_config(path: Path) -> Dict[str, str]:
    """Read `key = value` lines; `#` starts a comment."""
    values: Dict[str, str] = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"Could not read config file {path}: {e}") from e

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"{path}:{lineno}: empty key")
        if key in values:
            raise ConfigError(f"{path}:{lineno}: duplicate key {key!r}")
        values[key] = value
    return values


def _common_options() -> argparse.ArgumentParser:
    parent = argparse.ArgumentParser(add_help=False)
    parent.add_argument(
        "--log-level",
        choices=["DEBUG", "INFO", "WARNING", "ERROR"],
        default="INFO",
        help="Logging level",
    )
    parent.add_argument("--log-file", type=Path, default=None, help="Log file path")
    parent.add_argument(
        "--timezone",
        default="UTC",
        help="Timezone of generated_at stamps in reports (pytz name)",
    )
    return parent


def _em_options() -> argparse.ArgumentParser:
    defaults = EmConfig()
    parent = argparse.ArgumentParser(add_help=False)
    parent.add_argument("model", type=Path, help="Reference model (.lpmix)")
    parent.add_argument("target", type=Path, help="Target label probability map (.lpm)")
    parent.add_argument(
        "--box",
        action="append",
        default=[],
        metavar="X,Y,W,H",
        help="Detection box in the target frame; repeat for several initializations",
    )
    parent.add_argument(
        "--boxes-file",
        type=Path,
        default=None,
        help="File with one X,Y,W,H box per line (e.g. detector proposals)",
    )
    parent.add_argument("--epsilon", type=float, default=defaults.epsilon)
    parent.add_argument("--max-iters", type=int, default=defaults.max_iters)
    parent.add_argument("--stride", type=int, default=defaults.stride)
    parent.add_argument("--threshold", type=float, default=defaults.threshold)
    parent.add_argument("--gn-max-iters", type=int, default=defaults.gn_max_iters)
    parent.add_argument(
        "--alpha-bounds",
        default=f"{defaults.alpha_bounds[0]},{defaults.alpha_bounds[1]}",
        metavar="MIN,MAX",
        help="Clamp range of the outlier rate",
    )
    parent.add_argument(
        "--single-level",
        action="store_true",
        help="Skip the downsampled level",
    )
    parent.add_argument(
        "--plane-density",
        action="store_true",
        help="Normalize components over the plane instead of the image",
    )
    return parent


def build_parser() -> argparse.ArgumentParser:
    """Command-line parser with one subcommand per pipeline stage."""
    parser = argparse.ArgumentParser(
        prog="facade-em",
        description="Facade registration and segmentation with Lp Gaussian mixtures",
    )
    common = _common_options()
    em = _em_options()
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    fit = sub.add_parser(
        "fit-reference", parents=[common], help="Build a model from a reference mask"
    )
    fit.add_argument("segmentation", type=Path, help="Indexed reference mask (PGM P5)")
    fit.add_argument(
        "--labels", required=True, help="Comma-separated label names, e.g. window,door"
    )
    fit.add_argument("--p", type=int, default=4, help="Even Lp exponent")
    fit.add_argument("--min-component-px", type=int, default=4)
    fit.add_argument(
        "--no-calibrate",
        action="store_true",
        help="Keep the Gauss-Newton spreads without scale calibration",
    )
    fit.add_argument("-o", "--output", type=Path, required=True)

    reg = sub.add_parser(
        "register", parents=[common, em], help="Register a model onto a target map"
    )
    reg.add_argument("-o", "--output", type=Path, required=True, help="Result file")
    reg.add_argument("--posterior", type=Path, default=None, help="Posterior map (.lpm)")
    reg.add_argument("--trace", type=Path, default=None, help="Iteration trace (.tsv)")
    reg.add_argument(
        "--labels-pgm", type=Path, default=None, help="Argmax posterior labels (PGM)"
    )

    seg = sub.add_parser(
        "segment", parents=[common, em], help="Write the posterior segmentation only"
    )
    seg.add_argument("-o", "--output", type=Path, required=True, help="Posterior map (.lpm)")
    seg.add_argument("--labels-pgm", type=Path, default=None)

    synth = sub.add_parser("synth", parents=[common], help="Generate synthetic instances")
    synth.add_argument("--spec", type=Path, required=True, help="key = value spec file")
    synth.add_argument("-o", "--output", type=Path, required=True, help="Output directory")
    synth.add_argument(
        "--register",
        action="store_true",
        help="Also fit every reference and register it from its boxes.txt",
    )
    synth.add_argument("--p", type=int, default=4, help="Exponent used with --register")

    ev = sub.add_parser(
        "evaluate", parents=[common], help="Cumulative error histograms over runs"
    )
    ev.add_argument("--runs", type=Path, required=True, help="Directory of instances")
    ev.add_argument("-o", "--output", type=Path, required=True)
    ev.add_argument("--translation-thresholds", default="0.25,0.5,1,2,5,10")
    ev.add_argument("--scale-thresholds", default="0.0025,0.005,0.01,0.02,0.05")

    oracle = sub.add_parser(
        "oracle", parents=[common], help="Exhaustive grid maximization of R"
    )
    oracle.add_argument("model", type=Path)
    oracle.add_argument("target", type=Path)
    oracle.add_argument(
        "--grid",
        default="-40:40:0.5,-40:40:0.5,0.6:1.6:0.01",
        metavar="TX0:TX1:STEP,TY0:TY1:STEP,S0:S1:STEP",
    )
    oracle.add_argument("--alpha", type=float, default=0.1, help="Outlier rate")
    oracle.add_argument("--threshold", type=float, default=EmConfig().threshold)
    oracle.add_argument(
        "--plane-density",
        action="store_true",
        help="Normalize components over the plane instead of the image",
    )
    oracle.add_argument("-o", "--output", type=Path, default=None)
    return parser


def parse_arguments(
    argv: Optional[Sequence[str]] = None,
) -> Tuple[Config, argparse.Namespace]:
    """Parse command line arguments into the application config and raw args."""
    args = build_parser().parse_args(argv)
    config = Config(
        log_level=args.log_level,
        log_file=args.log_file,
        report_timezone=args.timezone,
        output_path=getattr(args, "output", None),
    )
    return config, args


def em_config_from_args(args: argparse.Namespace) -> EmConfig:
    """EmConfig from register/segment arguments."""
    try:
        low, high = (float(v) for v in args.alpha_bounds.split(","))
    except ValueError as e:
        raise ConfigError(f"invalid --alpha-bounds {args.alpha_bounds!r}") from e
    return EmConfig(
        epsilon=args.epsilon,
        max_iters=args.max_iters,
        stride=args.stride,
        alpha_bounds=(low, high),
        threshold=args.threshold,
        gn_max_iters=args.gn_max_iters,
        use_coarse_level=not args.single_level,
        clip_to_image=not args.plane_density,
    )


def setup_logging(config: Config) -> logging.Logger:
    """Setup logging with file/line details only in DEBUG mode."""
    logger = logging.getLogger(PACKAGE_LOGGER)
    logger.setLevel(getattr(logging, config.log_level))
    logger.handlers.clear()
    logger.propagate = False

    debug_formatter = logging.Formatter(
        "%(asctime)s - %(filename)s:%(lineno)d - %(funcName)s() - %(levelname)s - %(message)s"
    )
    simple_formatter = logging.Formatter("%(asctime)s - %(levelname)s - %(message)s")
    formatter = (
        debug_formatter if config.log_level.upper() == "DEBUG" else simple_formatter
    )

    if config.log_file:
        file_handler = logging.FileHandler(config.log_file, encoding="utf-8")
        file_handler.setFormatter(formatter)
        logger.addHandler(file_handler)

    console_handler = logging.StreamHandler(sys.stderr)
    console_handler.setFormatter(formatter)
    logger.addHandler(console_handler)

    return logger


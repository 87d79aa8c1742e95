"""Main entry point for facade-em."""

import argparse
import logging
import sys
from typing import Callable, Dict, Optional, Sequence

from .config import EmConfig, em_config_from_args, parse_arguments, setup_logging
from .errors import ConvergenceError, FacadeEMError, ValidationError
from .formats import atomic_write, format_key_values
from .pipeline import FacadeRegistrationPipeline
from .utils import format_float, parse_float_list, parse_grid, split_csv

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_VALIDATION = 2
EXIT_CONVERGENCE = 3
EXIT_INTERRUPTED = 130


def _fit_reference(pipeline: FacadeRegistrationPipeline, args: argparse.Namespace) -> None:
    pipeline.fit_reference(
        args.segmentation,
        split_csv(args.labels),
        args.output,
        p=args.p,
        min_component_px=args.min_component_px,
        calibrate=not args.no_calibrate,
    )


def _register(pipeline: FacadeRegistrationPipeline, args: argparse.Namespace) -> None:
    boxes = pipeline.collect_boxes(args.box, args.boxes_file)
    pipeline.register(
        args.model,
        args.target,
        boxes,
        output=args.output,
        posterior_path=args.posterior,
        trace_path=args.trace,
        labels_pgm=args.labels_pgm,
    )


def _segment(pipeline: FacadeRegistrationPipeline, args: argparse.Namespace) -> None:
    boxes = pipeline.collect_boxes(args.box, args.boxes_file)
    pipeline.register(
        args.model,
        args.target,
        boxes,
        posterior_path=args.output,
        labels_pgm=args.labels_pgm,
    )


def _synth(pipeline: FacadeRegistrationPipeline, args: argparse.Namespace) -> None:
    pipeline.synthesize(args.spec, args.output, register=args.register, p=args.p)


def _evaluate(pipeline: FacadeRegistrationPipeline, args: argparse.Namespace) -> None:
    pipeline.evaluate_runs(
        args.runs,
        args.output,
        parse_float_list(args.translation_thresholds),
        parse_float_list(args.scale_thresholds),
    )


def _oracle(pipeline: FacadeRegistrationPipeline, args: argparse.Namespace) -> None:
    result = pipeline.run_oracle(
        args.model, args.target, parse_grid(args.grid), args.alpha, args.threshold
    )
    sim, grid = result.similarity, result.grid_similarity
    text = format_key_values(
        {
            "tx": format_float(sim.tx),
            "ty": format_float(sim.ty),
            "s": format_float(sim.s),
            "R": format_float(result.objective),
            "grid_tx": format_float(grid.tx),
            "grid_ty": format_float(grid.ty),
            "grid_s": format_float(grid.s),
            "grid_R": format_float(result.grid_objective),
        }
    )
    if args.output is not None:
        atomic_write(args.output, text)
    else:
        sys.stdout.write(text)


COMMANDS: Dict[str, Callable[[FacadeRegistrationPipeline, argparse.Namespace], None]] = {
    "fit-reference": _fit_reference,
    "register": _register,
    "segment": _segment,
    "synth": _synth,
    "evaluate": _evaluate,
    "oracle": _oracle,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Run one subcommand and return its exit code."""
    try:
        config, args = parse_arguments(argv)
    except SystemExit as e:
        # argparse usage errors exit with 2, --help with 0
        return int(e.code) if isinstance(e.code, int) else EXIT_VALIDATION

    logger = setup_logging(config)
    try:
        em_config: Optional[EmConfig] = None
        if hasattr(args, "alpha_bounds"):
            em_config = em_config_from_args(args)
        elif getattr(args, "plane_density", False):
            em_config = EmConfig(clip_to_image=False)
        pipeline = FacadeRegistrationPipeline(config, logger, em_config)
        COMMANDS[args.command](pipeline, args)
    except KeyboardInterrupt:
        logger.info("Interrupted by user")
        return EXIT_INTERRUPTED
    except ValidationError as e:
        logger.error(f"Invalid input: {e}")
        return EXIT_VALIDATION
    except ConvergenceError as e:
        logger.error(f"Registration failed: {e}")
        return EXIT_CONVERGENCE
    except FacadeEMError as e:
        logger.error(f"Error: {e}")
        return EXIT_FAILURE
    except Exception as e:
        logger.error(f"Unexpected error: {e}")
        if logger.isEnabledFor(logging.DEBUG):
            logger.exception("Traceback")
        return EXIT_FAILURE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

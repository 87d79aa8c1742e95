"""Orchestrator tying reference fitting, registration and evaluation together."""

import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

from .config import Config, EmConfig, load_key_value_config
from .em import Box, EMRegistrar, EmReport
from .errors import ConvergenceError, ValidationError
from .evaluation import (
    GridRange,
    HistogramTable,
    OracleResult,
    RegError,
    evaluate,
    grid_oracle,
    registration_error,
)
from .formats import (
    atomic_write,
    read_boxes,
    read_lpm,
    read_lpmix,
    read_pgm,
    read_result,
    read_truth,
    registered_box,
    write_boxes,
    write_lpm,
    write_lpmix,
    write_pgm,
    write_result,
    write_trace,
    write_truth,
)
from .model import LabelProbMap, LabelSet, LpMixtureModel, PointSet
from .points import extract_points
from .posterior import argmax_label_image, posterior_labels, render_posterior_map
from .reference import ReferenceModelBuilder, ReferenceSegmentation
from .synth import batch_specs, generate_instance, spec_from_config
from .utils import parse_box, timestamp


@dataclass
class RegistrationOutcome:
    """Everything a register run produces."""

    report: EmReport
    points: PointSet
    posterior_map: LabelProbMap


class FacadeRegistrationPipeline:
    """Runs the CLI stages with stage banners and [OK] markers in the log."""

    def __init__(
        self,
        config: Config,
        logger: logging.Logger,
        em_config: Optional[EmConfig] = None,
    ):
        self.config = config
        self.logger = logger
        self.em_config = em_config or EmConfig()

    def _stage(self, number: int, title: str) -> None:
        self.logger.info("=" * 60)
        self.logger.info(f"=== STAGE {number}: {title} ===")
        self.logger.info("=" * 60)

    def _generated_at(self) -> str:
        return timestamp(self.config.report_timezone)

    # fit-reference

    def fit_reference(
        self,
        segmentation_path: Path,
        labels: Sequence[str],
        output: Path,
        p: int = 4,
        min_component_px: int = 4,
        calibrate: bool = True,
    ) -> LpMixtureModel:
        self._stage(1, "Read reference segmentation")
        seg = ReferenceSegmentation(LabelSet.from_names(labels), read_pgm(segmentation_path))
        self.logger.info(f"Reference {seg.width}x{seg.height} with labels {list(labels)}")

        self._stage(2, "Fit Lp Gaussian mixture")
        builder = ReferenceModelBuilder(p, min_component_px, calibrate, self.logger)
        model = builder.build_model(seg)

        write_lpmix(output, model)
        self.logger.info(f"[OK] Model with {len(model)} components written to {output}")
        return model

    # register / segment

    def collect_boxes(
        self, box_args: Sequence[str], boxes_file: Optional[Path] = None
    ) -> List[Box]:
        boxes = [parse_box(value) for value in box_args]
        if boxes_file is not None:
            boxes.extend(read_boxes(boxes_file))
        if not boxes:
            raise ValidationError("at least one --box or a --boxes-file is required")
        return boxes

    def load_inputs(
        self, model_path: Path, target_path: Path
    ) -> Tuple[LpMixtureModel, LabelProbMap]:
        model = read_lpmix(model_path)
        prob_map = read_lpm(target_path)
        if tuple(prob_map.labels) != tuple(model.labels):
            raise ValidationError(
                f"target labels {list(prob_map.labels)} differ from model labels "
                f"{list(model.labels)}"
            )
        return model, prob_map

    def register_map(
        self, model: LpMixtureModel, prob_map: LabelProbMap, boxes: Sequence[Box]
    ) -> RegistrationOutcome:
        """Point extraction, multi-initialization EM and posterior transfer."""
        cfg = self.em_config
        if cfg.p != model.p:
            cfg = replace(cfg, p=model.p)
        self._stage(1, "Extract observed points")
        points = extract_points(prob_map, cfg.threshold)
        self.logger.info(
            f"{len(points)} points above threshold {cfg.threshold} in "
            f"{prob_map.width}x{prob_map.height} target"
        )

        self._stage(2, f"MAP-EM registration from {len(boxes)} initialization(s)")
        registrar = EMRegistrar(model, cfg, self.logger)
        report = registrar.run_multi_init(points, boxes)
        corners = registered_box(model, report.similarity)
        self.logger.info(
            f"[OK] tx={report.state.tx:.3f} ty={report.state.ty:.3f} s={report.state.s:.5f} "
            f"alpha={report.state.outlier_rate:.4f} R={report.objective:.4f}"
        )
        self.logger.info(
            f"Registered box: ({corners[0, 0]:.1f}, {corners[0, 1]:.1f}) - "
            f"({corners[3, 0]:.1f}, {corners[3, 1]:.1f})"
        )

        self._stage(3, "Posterior segmentation")
        posteriors = posterior_labels(points, report.responsibilities, model)
        posterior_map = render_posterior_map(points, posteriors, prob_map)
        return RegistrationOutcome(report, points, posterior_map)

    def register(
        self,
        model_path: Path,
        target_path: Path,
        boxes: Sequence[Box],
        output: Optional[Path] = None,
        posterior_path: Optional[Path] = None,
        trace_path: Optional[Path] = None,
        labels_pgm: Optional[Path] = None,
    ) -> RegistrationOutcome:
        model, prob_map = self.load_inputs(model_path, target_path)
        outcome = self.register_map(model, prob_map, boxes)

        self._stage(4, "Write outputs")
        if output is not None:
            write_result(output, outcome.report, model, self._generated_at())
            self.logger.info(f"[OK] Result written to {output}")
        if posterior_path is not None:
            write_lpm(posterior_path, outcome.posterior_map)
            self.logger.info(f"[OK] Posterior map written to {posterior_path}")
        if trace_path is not None:
            write_trace(trace_path, outcome.report)
            self.logger.info(f"[OK] Trace with {len(outcome.report.trace)} rows written")
        if labels_pgm is not None:
            write_pgm(labels_pgm, argmax_label_image(outcome.posterior_map))
            self.logger.info(f"[OK] Argmax labels written to {labels_pgm}")

        if not outcome.report.converged:
            raise ConvergenceError(
                f"EM did not converge within {self.em_config.max_iters} iterations per level"
            )
        return outcome

    # synth

    def synthesize(
        self, spec_path: Path, output_dir: Path, register: bool = False, p: int = 4
    ) -> List[Path]:
        """Write seeded instances; optionally fit and register each one."""
        self._stage(1, "Generate synthetic instances")
        spec = spec_from_config(load_key_value_config(spec_path))
        directories = []
        for index, item in enumerate(batch_specs(spec)):
            instance = generate_instance(item)
            directory = Path(output_dir) / f"instance_{index:03d}"
            truth = instance.truth
            write_pgm(directory / "reference.pgm", instance.reference.mask)
            write_lpm(directory / "target.lpm", instance.target)
            write_pgm(directory / "truth_labels.pgm", truth.label_image)
            write_truth(
                directory / "truth.txt",
                truth.transform,
                truth.true_box,
                truth.init_box,
                truth.occluded,
            )
            write_boxes(directory / "boxes.txt", [truth.init_box])
            directories.append(directory)
            self.logger.debug(
                f"Instance {index}: seed {item.seed}, transform {tuple(truth.transform)}"
            )
        self.logger.info(f"[OK] {len(directories)} instance(s) written to {output_dir}")

        if register:
            self._stage(2, "Fit and register every instance")
            for directory in directories:
                self.register_instance(directory, list(spec.labels), p)
        return directories

    def register_instance(self, directory: Path, labels: Sequence[str], p: int = 4) -> Path:
        """fit-reference + register on one synth instance directory."""
        model = self.fit_reference(
            directory / "reference.pgm",
            labels,
            directory / "model.lpmix",
            p=p,
            min_component_px=self.em_config.min_component_px,
            calibrate=self.em_config.calibrate_spread,
        )
        prob_map = read_lpm(directory / "target.lpm")
        outcome = self.register_map(model, prob_map, read_boxes(directory / "boxes.txt"))
        result = directory / "result.txt"
        write_result(result, outcome.report, model, self._generated_at())
        write_lpm(directory / "posterior.lpm", outcome.posterior_map)
        return result

    # evaluate

    def collect_errors(self, runs_dir: Path) -> List[RegError]:
        runs_dir = Path(runs_dir)
        if not runs_dir.is_dir():
            raise ValidationError(f"runs directory {runs_dir} does not exist")
        candidates = [runs_dir] if (runs_dir / "truth.txt").exists() else sorted(
            d for d in runs_dir.iterdir() if d.is_dir()
        )
        errors = []
        for directory in candidates:
            truth_path, result_path = directory / "truth.txt", directory / "result.txt"
            if not truth_path.exists():
                continue
            if not result_path.exists():
                self.logger.warning(f"No result.txt in {directory}, skipping")
                continue
            truth, _ = read_truth(truth_path)
            estimate, _ = read_result(result_path)
            errors.append(registration_error(estimate, truth))
        if not errors:
            raise ValidationError(f"no run with truth.txt and result.txt under {runs_dir}")
        return errors

    def evaluate_runs(
        self,
        runs_dir: Path,
        output: Optional[Path],
        translation_thresholds: Sequence[float],
        scale_thresholds: Sequence[float],
    ) -> HistogramTable:
        self._stage(1, "Collect registration errors")
        errors = self.collect_errors(runs_dir)
        self.logger.info(f"{len(errors)} runs collected from {runs_dir}")

        self._stage(2, "Cumulative histograms")
        table = evaluate(errors, translation_thresholds, scale_thresholds)
        if output is not None:
            atomic_write(output, table.to_tsv(self._generated_at()))
            self.logger.info(f"[OK] Histogram written to {output}")
        return table

    # oracle

    def run_oracle(
        self,
        model_path: Path,
        target_path: Path,
        ranges: Sequence[GridRange],
        outlier_rate: float,
        threshold: float,
    ) -> OracleResult:
        model, prob_map = self.load_inputs(model_path, target_path)
        points = extract_points(prob_map, threshold)
        cells = 1
        for r in ranges:
            cells *= len(r.values())
        self._stage(1, f"Grid search over {cells} cells, {len(points)} points")
        result = grid_oracle(
            points,
            model,
            model.weights,
            outlier_rate,
            ranges,
            clip_to_image=self.em_config.clip_to_image,
        )
        self.logger.info(
            f"[OK] Oracle tx={result.similarity.tx:.4f} ty={result.similarity.ty:.4f} "
            f"s={result.similarity.s:.6f} R={result.objective:.6f}"
        )
        return result

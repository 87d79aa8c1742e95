"""Tests for error metrics, histograms and the grid oracle."""

import numpy as np
import pytest

from conftest import facade_model, make_points, sample_points
from facade_em.errors import ValidationError
from facade_em.evaluation import (
    GridRange,
    RegError,
    cumulative_histogram,
    evaluate,
    grid_argmax,
    grid_oracle,
    registration_error,
)
from facade_em.model import Similarity, TransformState, map_objective

TRUTH = Similarity(50.0, 40.0, 1.3)
SMALL_GRID = (
    GridRange(46.0, 54.0, 1.0),
    GridRange(36.0, 44.0, 1.0),
    GridRange(1.2, 1.4, 0.05),
)


class TestRegistrationError:
    def test_translation_and_relative_scale(self):
        err = registration_error((3.0, 4.0, 1.1), (0.0, 0.0, 1.0))
        assert err.dt == pytest.approx(5.0)
        assert err.ds == pytest.approx(0.1)

    def test_true_scale_must_be_positive(self):
        with pytest.raises(ValidationError):
            registration_error((0.0, 0.0, 1.0), (0.0, 0.0, 0.0))


class TestHistograms:
    def test_cumulative_fractions(self):
        fractions = cumulative_histogram([1.0, 2.0, 3.0], [1.5, 2.5, 3.5])
        assert fractions == pytest.approx([1 / 3, 2 / 3, 1.0])

    def test_threshold_is_inclusive(self):
        assert cumulative_histogram([1.0, 2.0], [1.0]) == [0.5]

    def test_empty_values_rejected(self):
        with pytest.raises(ValidationError):
            cumulative_histogram([], [1.0])

    def test_evaluate_sorts_thresholds_and_writes_tsv(self):
        results = [RegError(0.3, 0.001), RegError(1.5, 0.03), RegError(12.0, 0.2)]
        table = evaluate(results, [2.0, 0.5], [0.05, 0.01])
        assert table.translation_thresholds == (0.5, 2.0)
        assert table.translation == pytest.approx([1 / 3, 2 / 3])
        assert table.scale == pytest.approx([1 / 3, 2 / 3])
        lines = table.to_tsv("2026-01-01T00:00:00+00:00").splitlines()
        assert lines[0] == "# generated_at=2026-01-01T00:00:00+00:00"
        assert lines[1] == "# runs=3"
        assert lines[2] == "metric\tthreshold\tfraction"
        assert lines[3] == "translation_px\t0.5\t0.333333"
        assert lines[-1] == "scale_rel\t0.05\t0.666667"

    def test_evaluate_needs_results(self):
        with pytest.raises(ValidationError):
            evaluate([])


class TestGridRange:
    def test_inclusive_values(self):
        np.testing.assert_allclose(GridRange(0.0, 1.0, 0.25).values(), [0, 0.25, 0.5, 0.75, 1.0])

    @pytest.mark.parametrize("bad", [(0.0, 1.0, 0.0), (1.0, 0.0, 0.1), (0.0, float("nan"), 1.0)])
    def test_invalid(self, bad):
        with pytest.raises(ValidationError):
            GridRange(*bad).values()


class TestGridArgmax:
    @staticmethod
    def bowl(sim):
        return -((sim.tx - 1.3) ** 2) - (sim.ty + 2.2) ** 2 - 10.0 * (sim.s - 1.05) ** 2

    def test_grid_cell_and_polish(self):
        ranges = (GridRange(-5, 5, 1), GridRange(-5, 5, 1), GridRange(0.5, 1.5, 0.1))
        result = grid_argmax(self.bowl, ranges)
        assert result.grid_similarity == pytest.approx((1.0, -2.0, 1.0))
        assert result.similarity == pytest.approx((1.3, -2.2, 1.05), abs=1e-4)
        assert result.objective >= result.grid_objective

    def test_without_refinement(self):
        ranges = (GridRange(-5, 5, 1), GridRange(-5, 5, 1), GridRange(0.5, 1.5, 0.1))
        result = grid_argmax(self.bowl, ranges, refine=False)
        assert result.similarity == result.grid_similarity

    def test_non_positive_scales_skipped(self):
        ranges = (GridRange(0, 0, 1), GridRange(0, 0, 1), GridRange(-1.0, 0.0, 0.5))
        with pytest.raises(ValidationError):
            grid_argmax(self.bowl, ranges)


class TestGridOracle:
    @pytest.fixture
    def instance(self, rng):
        model = facade_model(2)
        return model, sample_points(model, TRUTH, rng)

    def test_matches_direct_objective(self, instance):
        model, points = instance

        def objective(sim):
            state = TransformState(sim.tx, sim.ty, sim.s, model.weights, 0.1)
            return map_objective(points, model, state)

        fast = grid_oracle(points, model, ranges=SMALL_GRID, refine=False)
        slow = grid_argmax(objective, SMALL_GRID, refine=False)
        assert fast.grid_similarity == pytest.approx(tuple(slow.grid_similarity))
        assert fast.grid_objective == pytest.approx(slow.grid_objective, rel=1e-9)

    def test_polished_optimum_near_truth(self, instance):
        model, points = instance
        result = grid_oracle(points, model, ranges=SMALL_GRID)
        assert result.objective >= result.grid_objective
        assert result.similarity.tx == pytest.approx(TRUTH.tx, abs=1.0)
        assert result.similarity.ty == pytest.approx(TRUTH.ty, abs=1.0)
        assert result.similarity.s == pytest.approx(TRUTH.s, abs=0.03)

    def test_independent_of_point_order(self, instance, rng):
        model, points = instance
        order = rng.permutation(len(points))
        shuffled = make_points(points.xy[order], points.source_dims, points.priors[order])
        first = grid_oracle(points, model, ranges=SMALL_GRID, refine=False)
        second = grid_oracle(shuffled, model, ranges=SMALL_GRID, refine=False)
        assert first.grid_similarity == second.grid_similarity
        assert first.grid_objective == pytest.approx(second.grid_objective, rel=1e-12)

    @pytest.mark.parametrize("clip_to_image", [True, False])
    def test_matches_direct_objective_at_image_border(self, clip_to_image, rng):
        model = facade_model(4)
        points = sample_points(model, Similarity(-8.0, 40.0, 1.3), rng)
        grid = (GridRange(-12.0, -4.0, 1.0), GridRange(36.0, 44.0, 1.0), GridRange(1.2, 1.4, 0.05))

        def objective(sim):
            state = TransformState(sim.tx, sim.ty, sim.s, model.weights, 0.1)
            return map_objective(points, model, state, clip_to_image)

        fast = grid_oracle(points, model, ranges=grid, refine=False, clip_to_image=clip_to_image)
        slow = grid_argmax(objective, grid, refine=False)
        assert fast.grid_similarity == pytest.approx(tuple(slow.grid_similarity))
        assert fast.grid_objective == pytest.approx(slow.grid_objective, rel=1e-9)

"""Tests for the MAP-EM registration loop and its M-step solvers."""

from unittest.mock import MagicMock, patch

import numpy as np
import pytest

from conftest import facade_model, make_model, make_points, random_instance, sample_points
from facade_em.config import EmConfig
from facade_em.em import (
    ASCENT_TOLERANCE,
    Box,
    EMRegistrar,
    StationaritySystem,
    e_step,
    init_from_box,
    init_outlier_rate,
    m_step_closed_form_p2,
    m_step_refine_p4,
    r_tilde,
    r_tilde_derivatives,
    refine_stationarity,
    update_weights,
)
from facade_em.errors import DegenerateDetectionError, ValidationError
from facade_em.evaluation import registration_error
from facade_em.model import (
    Responsibilities,
    Similarity,
    TransformState,
    apply_transform,
    log_domain_mass,
)

TRUTH = Similarity(50.0, 40.0, 1.3)
# left window centred on the left image border
CUT_TRUTH = Similarity(-13.0, 40.0, 1.3)


def five_point(f, x, h):
    return (-f(x + 2 * h) + 8 * f(x + h) - 8 * f(x - h) + f(x - 2 * h)) / (12 * h)


def border_cut_points(model, truth, rng, per_component=1500, dims=(200, 160)):
    """Pixel-rounded component draws, dropping those that fall left of the image."""
    margin = 100
    wide = sample_points(
        model,
        Similarity(truth.tx + margin, truth.ty, truth.s),
        rng,
        per_component=per_component,
        outliers=0,
        dims=(dims[0] + margin, dims[1]),
    )
    xy = np.rint(wide.xy) - [margin, 0.0]
    keep = xy[:, 0] >= 0
    return make_points(xy[keep], dims, wide.priors[keep])


class TestInitialization:
    def test_box_maps_reference_corners(self):
        sim = init_from_box(Box(10, 20, 200, 160), (100, 80))
        assert sim == pytest.approx((10.0, 20.0, 2.0))

    def test_box_with_other_aspect_uses_least_squares_scale(self):
        sim = init_from_box(Box(0, 0, 100, 100), (100, 50))
        assert sim.s == pytest.approx((100 * 100 + 50 * 100) / (100**2 + 50**2))
        # centres coincide
        assert sim.tx + sim.s * 50 == pytest.approx(50.0)
        assert sim.ty + sim.s * 25 == pytest.approx(50.0)

    @pytest.mark.parametrize("box", [Box(0, 0, 0, 10), Box(0, 0, 10, -1)])
    def test_degenerate_box(self, box):
        with pytest.raises(DegenerateDetectionError, match="degenerate detection"):
            init_from_box(box, (100, 80))

    @pytest.mark.parametrize(
        "s, expected",
        [(1.0, 0.1875), (0.0001, 0.25), (2.0, 0.01)],
    )
    def test_outlier_rate(self, s, expected):
        assert init_outlier_rate(s, (100, 80), (200, 160)) == pytest.approx(expected, abs=1e-6)


class TestClosedFormP2:
    def test_spread_only_form_recovers_exact_alignment(self, two_label_model):
        xy = apply_transform(two_label_model.centers, TRUTH)
        points = make_points(xy)
        resp = Responsibilities(np.eye(4), np.zeros(4))
        sim = m_step_closed_form_p2(
            points, two_label_model, resp, Similarity(0.0, 0.0, 1.0), with_normalizer=False
        )
        assert sim == pytest.approx(tuple(TRUTH), abs=1e-8)

    def test_normalized_form_is_stationary_and_maximal(self, rng):
        model = facade_model(2)
        points = sample_points(model, TRUTH, rng)
        state = TransformState(*TRUTH, model.weights, 0.1)
        resp = e_step(points, model, state)
        sim = m_step_closed_form_p2(points, model, resp, TRUTH)

        grad, _ = r_tilde_derivatives(points, model, resp, sim)
        reference, _ = r_tilde_derivatives(
            points, model, resp, Similarity(sim.tx + 1.0, sim.ty, sim.s)
        )
        assert np.linalg.norm(grad) < 1e-6 * np.linalg.norm(reference)

        best = r_tilde(points, model, resp, sim)
        for delta in [(0.5, 0, 0), (0, -0.5, 0), (0, 0, 0.01), (0, 0, -0.01)]:
            moved = Similarity(*(np.array(sim) + np.array(delta)))
            assert r_tilde(points, model, resp, moved) < best

    def test_normalizer_pulls_scale_below_exact_fit(self, two_label_model):
        xy = apply_transform(two_label_model.centers, TRUTH)
        points = make_points(xy)
        resp = Responsibilities(np.eye(4), np.zeros(4))
        sim = m_step_closed_form_p2(points, two_label_model, resp, TRUTH)
        assert 0.0 < sim.s < TRUTH.s

    def test_no_mass_keeps_previous(self, two_label_model):
        points = make_points([[10.0, 10.0], [20.0, 20.0]])
        resp = Responsibilities(np.zeros((2, 4)), np.ones(2))
        logger = MagicMock()
        sim = m_step_closed_form_p2(points, two_label_model, resp, TRUTH, logger=logger)
        assert sim == TRUTH
        logger.warning.assert_called_once()


class TestStationarity:
    @pytest.mark.parametrize("p", [2, 4])
    def test_derivatives_match_finite_differences(self, p, rng):
        points, model, resp = random_instance(rng, n_points=80, p=p)
        sim = np.array([90.0, 80.0, 1.1])
        grad, hess = r_tilde_derivatives(points, model, resp, Similarity(*sim))
        h = 1e-3
        for k in range(3):
            e = np.zeros(3)
            e[k] = 1.0

            def along_value(x):
                return r_tilde(points, model, resp, Similarity(*(sim + x * e)))

            def along_grad(x):
                return r_tilde_derivatives(points, model, resp, Similarity(*(sim + x * e)))[0]

            fd_grad = five_point(along_value, 0.0, h)
            assert grad[k] == pytest.approx(fd_grad, rel=1e-5, abs=1e-6 * np.abs(grad).max())
            fd_hess = five_point(along_grad, 0.0, h)
            np.testing.assert_allclose(
                hess[:, k], fd_hess, rtol=1e-5, atol=1e-6 * np.abs(hess).max()
            )

    @pytest.mark.parametrize("p", [2, 4])
    def test_moment_system_matches_direct_evaluation(self, p, rng):
        points, model, resp = random_instance(rng, n_points=150, p=p)
        system = StationaritySystem(points, model, resp)
        for sim in [Similarity(90.0, 80.0, 1.1), Similarity(70.0, 60.0, 0.6)]:
            direct_value = r_tilde(points, model, resp, sim)
            assert system.value(sim) == pytest.approx(direct_value, rel=1e-9)
            grad, hess = system.derivatives(sim)
            direct_grad, direct_hess = r_tilde_derivatives(points, model, resp, sim)
            np.testing.assert_allclose(
                grad, direct_grad, rtol=1e-6, atol=1e-8 * np.abs(direct_grad).max()
            )
            np.testing.assert_allclose(
                hess, direct_hess, rtol=1e-6, atol=1e-8 * np.abs(direct_hess).max()
            )

    def test_gauss_newton_decreases_gradient_norm(self, rng):
        model = facade_model(4)
        points = sample_points(model, TRUTH, rng)
        resp = e_step(points, model, TransformState(*TRUTH, model.weights, 0.1))
        start = Similarity(TRUTH.tx + 2.0, TRUTH.ty - 1.5, TRUTH.s * 1.03)
        fit = refine_stationarity(points, model, resp, start, max_iters=30)
        assert fit.j_final < fit.j_initial
        assert all(b < a for a, b in zip(fit.j_trace, fit.j_trace[1:]))
        assert fit.j_trace[0] == fit.j_initial
        assert fit.j_trace[-1] == fit.j_final

    def test_refinement_returns_to_closed_form_solution(self, rng):
        model = facade_model(2)
        points = sample_points(model, TRUTH, rng)
        resp = e_step(points, model, TransformState(*TRUTH, model.weights, 0.1))
        exact = m_step_closed_form_p2(points, model, resp, TRUTH)
        start = Similarity(exact.tx + 1.0, exact.ty - 1.0, exact.s * 1.01)
        fit = refine_stationarity(points, model, resp, start, max_iters=50)
        assert fit.similarity.tx == pytest.approx(exact.tx, abs=1e-3)
        assert fit.similarity.ty == pytest.approx(exact.ty, abs=1e-3)
        assert fit.similarity.s == pytest.approx(exact.s, rel=1e-5)

    def test_no_improvement_keeps_start(self, rng):
        points, model, resp = random_instance(rng, n_points=40, p=4)
        start = Similarity(90.0, 80.0, 1.0)
        fit = refine_stationarity(points, model, resp, start, max_iters=0)
        assert fit.similarity == start
        assert fit.j_final == fit.j_initial


    @pytest.mark.parametrize("p", [2, 4])
    def test_clipped_derivatives_match_finite_differences(self, p, rng):
        dims = (141, 111)
        points, model, resp = random_instance(rng, n_points=80, p=p, dims=dims)
        # some components hang over the right and bottom borders
        sim = np.array([125.0, 95.0, 1.1])
        assert log_domain_mass(model, Similarity(*sim), dims).min() < -1e-3
        grad, hess = r_tilde_derivatives(points, model, resp, Similarity(*sim), dims)
        h = 1e-3
        for k in range(3):
            step = np.eye(3)[k]
            fd_grad = five_point(
                lambda x: r_tilde(points, model, resp, Similarity(*(sim + x * step)), dims), 0.0, h
            )
            assert grad[k] == pytest.approx(fd_grad, rel=1e-5, abs=1e-6 * np.abs(grad).max())
            fd_hess = five_point(
                lambda x: r_tilde_derivatives(
                    points, model, resp, Similarity(*(sim + x * step)), dims
                )[0],
                0.0,
                h,
            )
            np.testing.assert_allclose(
                hess[:, k], fd_hess, rtol=1e-5, atol=1e-6 * np.abs(hess).max()
            )

    @pytest.mark.parametrize("p", [2, 4])
    def test_clipped_moment_system_matches_direct_evaluation(self, p, rng):
        dims = (141, 111)
        points, model, resp = random_instance(rng, n_points=150, p=p, dims=dims)
        system = StationaritySystem(points, model, resp, dims)
        for sim in [Similarity(125.0, 95.0, 1.1), Similarity(70.0, 60.0, 0.6)]:
            assert system.value(sim) == pytest.approx(
                r_tilde(points, model, resp, sim, dims), rel=1e-9
            )
            grad, hess = system.derivatives(sim)
            direct_grad, direct_hess = r_tilde_derivatives(points, model, resp, sim, dims)
            np.testing.assert_allclose(
                grad, direct_grad, rtol=1e-6, atol=1e-8 * np.abs(direct_grad).max()
            )
            np.testing.assert_allclose(
                hess, direct_hess, rtol=1e-6, atol=1e-8 * np.abs(direct_hess).max()
            )


class TestRefineP4:
    """Stationarity refinement on a four-point cross around (50, 40)."""

    @staticmethod
    def cross(spread):
        model = make_model([(0.0, 0.0)], [spread], p=4)
        points = make_points([[52.0, 40.0], [48.0, 40.0], [50.0, 42.0], [50.0, 38.0]])
        resp = Responsibilities(np.ones((4, 1)), np.zeros(4))
        return points, model, resp

    def test_stationary_start_is_kept(self):
        # -8 ln s - 2 / s^4 peaks at s = 1
        points, model, resp = self.cross((32.0, 32.0))
        start = Similarity(50.0, 40.0, 1.0)
        fit = refine_stationarity(points, model, resp, start)
        assert fit.j_initial <= 1e-12
        sim = m_step_refine_p4(points, model, resp, start)
        assert sim == pytest.approx(tuple(start), abs=1e-9)

    def test_scale_moves_to_stationary_point(self):
        # -8 ln s - 4 / s^4 peaks at s^4 = 2
        points, model, resp = self.cross((16.0, 16.0))
        sim = m_step_refine_p4(points, model, resp, Similarity(50.0, 40.0, 1.0))
        assert sim.tx == pytest.approx(50.0, abs=1e-9)
        assert sim.ty == pytest.approx(40.0, abs=1e-9)
        assert sim.s == pytest.approx(2.0**0.25, rel=1e-6)

class TestUpdateWeights:
    @pytest.fixture
    def pair_model(self):
        return make_model([(0.0, 0.0), (10.0, 0.0)], [(1.0, 1.0)] * 2, [0, 1])

    @staticmethod
    def responsibilities(n_first, n_second, n_outlier):
        rows = [[1.0, 0.0, 0.0]] * n_first + [[0.0, 1.0, 0.0]] * n_second
        rows += [[0.0, 0.0, 1.0]] * n_outlier
        table = np.array(rows)
        return Responsibilities(table[:, :2], table[:, 2])

    def test_dirichlet_map_update(self, pair_model):
        weights, alpha = update_weights(self.responsibilities(10, 5, 5), pair_model)
        # numerators mass + 0.5 - 1, denominator 15 - 1
        np.testing.assert_allclose(weights, [9.5 / 14.0, 4.5 / 14.0])
        assert alpha == pytest.approx(5.0 / 14.0)

    def test_alpha_clamped_to_bounds(self, pair_model):
        _, alpha = update_weights(self.responsibilities(10, 5, 100), pair_model)
        assert alpha == 0.9

    def test_one_weight_floored(self, pair_model):
        weights, _ = update_weights(self.responsibilities(10, 0, 1), pair_model)
        assert weights[1] == pytest.approx(1e-8 / (9.5 + 1e-8))
        assert weights.sum() == pytest.approx(1.0)

    def test_degenerate_update_keeps_previous(self, pair_model):
        resp = Responsibilities(np.array([[0.1, 0.1]]), np.array([0.8]))
        logger = MagicMock()
        previous = np.array([0.3, 0.7])
        weights, alpha = update_weights(
            resp, pair_model, previous, previous_alpha=0.3, logger=logger
        )
        np.testing.assert_array_equal(weights, previous)
        assert alpha == 0.3
        assert logger.warning.call_count == 2


class TestEMRegistrar:
    @pytest.mark.parametrize("p", [2, 4])
    def test_recovers_transform_with_monotone_objective(self, p, rng):
        model = facade_model(p)
        points = sample_points(model, TRUTH, rng)
        registrar = EMRegistrar(model, EmConfig(p=p), MagicMock())
        start = TransformState(TRUTH.tx + 3.0, TRUTH.ty - 2.0, TRUTH.s * 1.04, model.weights, 0.1)
        report = registrar.run_em(points, start)

        assert report.converged
        assert [level.name for level in report.levels] == ["coarse", "fine"]
        assert report.similarity.tx == pytest.approx(TRUTH.tx, abs=1.0)
        assert report.similarity.ty == pytest.approx(TRUTH.ty, abs=1.0)
        assert report.similarity.s == pytest.approx(TRUTH.s, abs=0.03)
        for level in ("coarse", "fine"):
            trace = [record.objective for record in report.level_trace(level)]
            for before, after in zip(trace, trace[1:]):
                assert after >= before - ASCENT_TOLERANCE * abs(before)
        assert report.iterations == sum(report.iterations_per_level.values())
        np.testing.assert_allclose(
            report.responsibilities.beta.sum(axis=1) + report.responsibilities.gamma,
            1.0,
            atol=1e-9,
        )

    def test_iteration_limit_reports_not_converged(self, rng):
        model = facade_model(2)
        points = sample_points(model, TRUTH, rng)
        logger = MagicMock()
        config = EmConfig(p=2, max_iters=1, use_coarse_level=False)
        start = TransformState(TRUTH.tx + 3.0, TRUTH.ty - 2.0, TRUTH.s, model.weights, 0.1)
        report = EMRegistrar(model, config, logger).run_em(points, start)
        assert not report.converged
        assert report.levels[0].termination == "max_iters"
        assert "without converging" in logger.warning.call_args[0][0]

    def test_m_step_candidates_full_update_first(self, rng):
        model = facade_model(2)
        points = sample_points(model, TRUTH, rng)
        state = TransformState(*TRUTH, model.weights, 0.3)
        registrar = EMRegistrar(model, EmConfig(p=2), MagicMock())
        candidates = registrar.m_step(points, registrar.e_step(points, state), state)
        assert len(candidates) == 2
        assert candidates[0].outlier_rate != 0.3
        assert candidates[1].outlier_rate == 0.3
        assert candidates[0].similarity == candidates[1].similarity

    def test_multi_init_skips_degenerate_boxes(self, rng):
        model = facade_model(2)
        points = sample_points(model, TRUTH, rng)
        logger = MagicMock()
        registrar = EMRegistrar(model, EmConfig(p=2), logger)
        good = Box(TRUTH.tx, TRUTH.ty, TRUTH.s * 60, TRUTH.s * 50)
        report = registrar.run_multi_init(points, [Box(0, 0, 0, 5), good])
        assert report.init_index == 1
        assert len(registrar.last_reports) == 1
        logger.error.assert_called_once()

    def test_multi_init_tie_prefers_first_box(self, rng):
        model = facade_model(2)
        points = sample_points(model, TRUTH, rng)
        box = Box(TRUTH.tx, TRUTH.ty, TRUTH.s * 60, TRUTH.s * 50)
        report = EMRegistrar(model, EmConfig(p=2), MagicMock()).run_multi_init(
            points, [box, box]
        )
        assert report.init_index == 0

    def test_multi_init_picks_highest_objective(self, rng):
        model = facade_model(2)
        points = sample_points(model, TRUTH, rng)
        near = Box(TRUTH.tx, TRUTH.ty, TRUTH.s * 60, TRUTH.s * 50)
        registrar = EMRegistrar(model, EmConfig(p=2), MagicMock())
        report = registrar.run_multi_init(points, [near.translated(60.0, 60.0), near])
        objectives = [r.objective for r in registrar.last_reports]
        assert report.objective == max(objectives)

    def test_all_boxes_degenerate_raises(self, rng):
        model = facade_model(2)
        points = sample_points(model, TRUTH, rng)
        registrar = EMRegistrar(model, EmConfig(p=2), MagicMock())
        with pytest.raises(DegenerateDetectionError):
            registrar.run_multi_init(points, [Box(0, 0, 0, 5)])
        with pytest.raises(ValidationError):
            registrar.run_multi_init(points, [])

    @pytest.mark.parametrize(
        "p, truth, refined",
        [(4, TRUTH, True), (2, TRUTH, False), (2, CUT_TRUTH, True)],
    )
    def test_similarity_update_routing(self, p, truth, refined):
        rng = np.random.default_rng(7)
        model = facade_model(p)
        points = border_cut_points(model, truth, rng, per_component=200)
        registrar = EMRegistrar(model, EmConfig(p=p), MagicMock())
        resp = registrar.e_step(points, TransformState(*truth, model.weights, 0.1))
        with patch("facade_em.em.m_step_refine_p4", wraps=m_step_refine_p4) as refine:
            registrar.m_step_similarity(points, resp, truth)
        assert refine.called == refined

    @pytest.mark.parametrize("p", [2, 4])
    def test_facade_cut_by_border_is_not_pulled_inwards(self, p):
        model = facade_model(p)
        points = border_cut_points(model, CUT_TRUTH, np.random.default_rng(31))
        start = TransformState(
            CUT_TRUTH.tx + 1.5, CUT_TRUTH.ty - 1.0, CUT_TRUTH.s * 1.02, model.weights, 0.05
        )
        errors = {}
        for clip in (True, False):
            config = EmConfig(p=p, clip_to_image=clip)
            report = EMRegistrar(model, config, MagicMock()).run_em(points, start)
            errors[clip] = registration_error(report.similarity, CUT_TRUTH)
        assert errors[True].dt <= 0.5
        assert errors[True].ds <= 0.01
        assert errors[True].dt < errors[False].dt

    @pytest.mark.parametrize("p", [2, 4])
    def test_translation_equivariance(self, p):
        model = facade_model(p)
        points = sample_points(model, TRUTH, np.random.default_rng(11), outliers=0)
        shift = np.array([6.0, 4.0])
        moved = make_points(points.xy + shift, points.source_dims, points.priors)
        registrar = EMRegistrar(model, EmConfig(p=p), MagicMock())
        start = TransformState(TRUTH.tx + 2.0, TRUTH.ty - 1.0, TRUTH.s * 1.02, model.weights, 0.1)
        moved_start = TransformState(
            start.tx + shift[0], start.ty + shift[1], start.s, model.weights, 0.1
        )
        base = registrar.run_em(points, start)
        other = registrar.run_em(moved, moved_start)

        assert other.similarity.tx == pytest.approx(base.similarity.tx + shift[0], abs=1e-7)
        assert other.similarity.ty == pytest.approx(base.similarity.ty + shift[1], abs=1e-7)
        assert other.similarity.s == pytest.approx(base.similarity.s, rel=1e-9)
        np.testing.assert_allclose(other.state.weights, base.state.weights, rtol=1e-7)
        np.testing.assert_allclose(other.r_trace, base.r_trace, rtol=1e-9)

    @pytest.mark.parametrize("seed", [3, 4, 5])
    def test_outliers_raise_rate_not_error(self, seed):
        model = facade_model(4)
        start = TransformState(TRUTH.tx + 2.0, TRUTH.ty - 1.0, TRUTH.s * 1.02, model.weights, 0.1)
        reports = {}
        for outliers in (0, 60):
            points = sample_points(
                model, TRUTH, np.random.default_rng(seed), outliers=outliers
            )
            registrar = EMRegistrar(model, EmConfig(p=4), MagicMock())
            reports[outliers] = registrar.run_em(points, start)
        clean, noisy = reports[0], reports[60]
        assert noisy.state.outlier_rate > clean.state.outlier_rate
        error = registration_error(noisy.similarity, clean.similarity)
        assert error.dt <= 1.0
        assert error.ds <= 0.01

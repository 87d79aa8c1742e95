"""Tests for reference model fitting from a segmentation mask."""

import math
from unittest.mock import MagicMock

import numpy as np
import pytest

from conftest import LABELS
from facade_em.errors import EmptyModelError, ValidationError
from facade_em.model import LpComponent
from facade_em.reference import (
    ConnectedComponent,
    ReferenceModelBuilder,
    ReferenceSegmentation,
    build_model,
    calibrate_spread,
    extract_components,
    moment_init,
    refine_component,
    shape_cost,
    spread_constant,
)


def rectangle_component(x0, y0, width, height, label_index=0):
    ys, xs = np.mgrid[y0 : y0 + height, x0 : x0 + width]
    return ConnectedComponent(label_index, np.column_stack([xs.ravel(), ys.ravel()]))


@pytest.fixture
def facade_mask():
    """Two windows and one door on an 80x60 reference."""
    mask = np.zeros((60, 80), dtype=np.uint8)
    mask[5:15, 5:17] = 1
    mask[5:15, 40:52] = 1
    mask[30:58, 25:37] = 2
    return mask


class TestExtractComponents:
    def test_components_per_label(self, facade_mask):
        comps = extract_components(ReferenceSegmentation(LABELS, facade_mask))
        assert sorted(cc.label_index for cc in comps) == [0, 0, 1]
        sizes = sorted(len(cc) for cc in comps)
        assert sizes == [120, 120, 336]

    def test_four_connectivity_splits_diagonal_pixels(self):
        mask = np.zeros((10, 10), dtype=np.uint8)
        mask[2:4, 2:4] = 1
        mask[4:6, 4:6] = 1  # touches the first block only at a corner
        comps = extract_components(ReferenceSegmentation(LABELS, mask), min_component_px=1)
        assert len(comps) == 2

    def test_small_blobs_dropped(self):
        mask = np.zeros((10, 10), dtype=np.uint8)
        mask[1, 1] = 1
        mask[5:8, 5:8] = 2
        comps = extract_components(ReferenceSegmentation(LABELS, mask), min_component_px=4)
        assert [cc.label_index for cc in comps] == [1]

    def test_all_background_raises(self):
        seg = ReferenceSegmentation(LABELS, np.zeros((8, 8), dtype=np.uint8))
        with pytest.raises(EmptyModelError, match="empty reference model"):
            extract_components(seg)

    def test_mask_values_beyond_labels_rejected(self):
        with pytest.raises(ValidationError):
            ReferenceSegmentation(LABELS, np.full((4, 4), 3, dtype=np.uint8))


class TestMomentInit:
    @pytest.mark.parametrize(
        "p, expected",
        [
            (2, 2.0),  # Gamma(1/2) / Gamma(3/2)
            (4, math.gamma(0.25) / math.gamma(0.75)),
            (6, math.gamma(1 / 6) / math.gamma(0.5)),
        ],
    )
    def test_spread_constant(self, p, expected):
        assert spread_constant(p) == pytest.approx(expected)

    def test_p2_spread_is_twice_variance(self):
        cc = rectangle_component(10, 20, 12, 8)
        comp = moment_init(cc, 2)
        assert comp.center == pytest.approx((15.5, 23.5))
        var_x = (12**2 - 1) / 12.0
        var_y = (8**2 - 1) / 12.0
        assert comp.spread == pytest.approx((2.0 * var_x, 2.0 * var_y))

    def test_single_row_uses_variance_floor(self):
        cc = rectangle_component(0, 0, 10, 1)
        comp = moment_init(cc, 2)
        assert comp.spread[1] == pytest.approx(2.0 * 0.25)


class TestRefineComponent:
    def test_does_not_increase_cost(self):
        cc = rectangle_component(10, 10, 14, 10)
        init = moment_init(cc, 4)
        result = refine_component(cc, init, 4)
        assert result.final_cost <= result.initial_cost
        assert result.final_cost == pytest.approx(shape_cost(cc, result.component, 4))

    @pytest.mark.parametrize("p", [2, 4])
    def test_centre_stays_on_rectangle_centre(self, p):
        cc = rectangle_component(20, 30, 16, 12)
        result = refine_component(cc, moment_init(cc, p), p)
        assert result.component.center[0] == pytest.approx(27.5, abs=0.5)
        assert result.component.center[1] == pytest.approx(35.5, abs=0.5)

    def test_spread_scales_with_rectangle_size(self):
        # doubling the side lengths multiplies Sigma by roughly 2^p
        p, k = 4, 2
        small = rectangle_component(10, 10, 10, 8)
        large = rectangle_component(10, 10, 10 * k, 8 * k)
        s_small = refine_component(small, moment_init(small, p), p).component.spread
        s_large = refine_component(large, moment_init(large, p), p).component.spread
        for a, b in zip(s_small, s_large):
            assert b / a == pytest.approx(k**p, rel=0.15)

    def test_zero_iterations_keeps_init(self):
        cc = rectangle_component(0, 0, 6, 6)
        init = moment_init(cc, 2)
        result = refine_component(cc, init, 2, max_iters=0)
        assert result.component is init
        assert result.status == "no_improvement"


class TestCalibrateSpread:
    @pytest.mark.parametrize("p", [2, 4])
    def test_own_pixels_have_unit_optimal_scale(self, p):
        cc = rectangle_component(0, 0, 14, 9)
        comp = calibrate_spread(cc, moment_init(cc, p), p)
        d = cc.pixels - np.array(comp.center)
        moments = np.mean(d.astype(float) ** p, axis=0)
        kappa = 0.5 * p * (moments[0] / comp.spread[0] + moments[1] / comp.spread[1])
        assert kappa == pytest.approx(1.0)

    def test_keeps_aspect_ratio(self):
        cc = rectangle_component(0, 0, 20, 6)
        init = LpComponent(0, (9.5, 2.5), (30.0, 5.0), 1.0)
        comp = calibrate_spread(cc, init, 2)
        assert comp.spread[0] / comp.spread[1] == pytest.approx(6.0)
        assert comp.center == init.center


class TestReferenceModelBuilder:
    def test_build_model(self, facade_mask):
        model = build_model(ReferenceSegmentation(LABELS, facade_mask), p=4)
        assert model.p == 4
        assert model.ref_dims == (80, 60)
        assert model.components_per_label() == [2, 1]
        assert model.weights.sum() == pytest.approx(1.0, abs=1e-12)
        np.testing.assert_allclose(model.weights, [120 / 576, 120 / 576, 336 / 576])
        # sorted by label, then y, then x
        assert model.components[0].center[0] < model.components[1].center[0]
        np.testing.assert_allclose(model.dirichlet, model.weights)

    def test_logs_summary_with_injected_logger(self, facade_mask):
        logger = MagicMock()
        builder = ReferenceModelBuilder(p=2, logger=logger)
        builder.build_model(ReferenceSegmentation(LABELS, facade_mask))
        messages = [call.args[0] for call in logger.info.call_args_list]
        assert any("[OK] Reference model with p=2" in m for m in messages)
        assert len(builder.last_fits) == 3

    def test_odd_exponent_rejected(self):
        with pytest.raises(ValidationError):
            ReferenceModelBuilder(p=3)

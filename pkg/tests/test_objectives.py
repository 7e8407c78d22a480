"""Tests for box losses and metrics, covering both computation routes."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from groundsel import autodiff as ad
from groundsel import objectives as obj


def _random_center_box(rng):
    w = rng.uniform(0.05, 0.6)
    h = rng.uniform(0.05, 0.6)
    cx = rng.uniform(w / 2, 1 - w / 2)
    cy = rng.uniform(h / 2, 1 - h / 2)
    return obj.BBox(cx, cy, w, h)


class TestHandCases:
    def test_iou_one_third(self):
        # Corner boxes (0,0,.2,.2) and (.1,0,.3,.2): overlap is half a box.
        a = obj.BBox.from_corners(0.0, 0.0, 0.2, 0.2)
        b = obj.BBox.from_corners(0.1, 0.0, 0.3, 0.2)
        assert np.isclose(obj.iou_box(a, b), 1.0 / 3.0, atol=1e-12)

    def test_giou_minus_half_at_corner_contact(self):
        # Unit squares touching at one corner: IoU 0, enclosure twice the
        # union, so the generalised score is exactly -1/2.
        a = obj.BBox.from_corners(0.0, 0.0, 0.5, 0.5)
        b = obj.BBox.from_corners(0.5, 0.5, 1.0, 1.0)
        assert np.isclose(obj.giou_box(a, b), -0.5, atol=1e-12)

    def test_contained_box_giou_equals_iou(self):
        outer = obj.BBox(0.5, 0.5, 0.8, 0.8)
        inner = obj.BBox(0.45, 0.55, 0.2, 0.1)
        assert abs(obj.giou_box(outer, inner) - obj.iou_box(outer, inner)) < 1e-9

    def test_identical_boxes(self):
        a = obj.BBox(0.3, 0.4, 0.2, 0.25)
        assert np.isclose(obj.iou_box(a, a), 1.0)
        assert np.isclose(obj.giou_box(a, a), 1.0)

    def test_degenerate_boxes_give_zero(self):
        a = obj.BBox(0.5, 0.5, 0.0, 0.0)
        b = obj.BBox(0.5, 0.5, 0.0, 0.0)
        assert obj.iou_box(a, b) == 0.0

    def test_l1_hand_value(self):
        pred = obj.BBox(0.5, 0.5, 0.2, 0.2)
        gt = obj.BBox(0.4, 0.45, 0.25, 0.3)
        assert np.isclose(obj.l1_box(pred, gt), 0.075, atol=1e-12)

    def test_total_loss_combines_terms(self):
        pred = obj.BBox(0.5, 0.5, 0.2, 0.2)
        gt = obj.BBox(0.4, 0.45, 0.25, 0.3)
        w = obj.LossWeights(l1=5.0, giou=2.0)
        expected = 5.0 * obj.l1_box(pred, gt) + 2.0 * (1.0 - obj.giou_box(pred, gt))
        assert np.isclose(obj.total_loss_value(pred, gt, w), expected, atol=1e-12)


class TestProperties:
    @settings(max_examples=200, deadline=None)
    @given(st.integers(min_value=0, max_value=2**32 - 1))
    def test_giou_never_exceeds_iou(self, seed):
        rng = np.random.default_rng(seed)
        a = _random_center_box(rng)
        b = _random_center_box(rng)
        assert obj.giou_box(a, b) <= obj.iou_box(a, b) + 1e-12
        assert -1.0 <= obj.giou_box(a, b) <= 1.0
        assert 0.0 <= obj.iou_box(a, b) <= 1.0

    @settings(max_examples=100, deadline=None)
    @given(st.integers(min_value=0, max_value=2**32 - 1))
    def test_giou_translation_invariance(self, seed):
        rng = np.random.default_rng(seed)
        a = _random_center_box(rng)
        b = _random_center_box(rng)
        dx, dy = rng.uniform(-5, 5, size=2)
        a2 = obj.BBox(a.cx + dx, a.cy + dy, a.w, a.h)
        b2 = obj.BBox(b.cx + dx, b.cy + dy, b.w, b.h)
        assert np.isclose(obj.giou_box(a, b), obj.giou_box(a2, b2), atol=1e-9)

    def test_symmetry(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            a = _random_center_box(rng)
            b = _random_center_box(rng)
            assert np.isclose(obj.iou_box(a, b), obj.iou_box(b, a), atol=1e-14)
            assert np.isclose(obj.giou_box(a, b), obj.giou_box(b, a), atol=1e-14)


class TestTensorRouteAgreesWithMetricRoute:
    @settings(max_examples=100, deadline=None)
    @given(st.integers(min_value=0, max_value=2**32 - 1))
    def test_iou_and_giou_match(self, seed):
        rng = np.random.default_rng(seed)
        a = _random_center_box(rng)
        b = _random_center_box(rng)
        ta = obj.box_tensor(a, dtype=np.float64)
        tb = obj.box_tensor(b, dtype=np.float64)
        assert np.isclose(obj.iou_loss_terms(ta, tb).item(), obj.iou_box(a, b), atol=1e-12)
        assert np.isclose(obj.giou_loss_terms(ta, tb).item(), obj.giou_box(a, b), atol=1e-12)
        assert np.isclose(obj.l1_loss_terms(ta, tb).item(), obj.l1_box(a, b), atol=1e-12)
        w = obj.LossWeights(5.0, 2.0)
        assert np.isclose(
            obj.grounding_loss(ta, tb, w).item(),
            obj.total_loss_value(a, b, w),
            atol=1e-12,
        )

    @settings(max_examples=30, deadline=None)
    @given(st.integers(min_value=0, max_value=2**32 - 1))
    def test_loss_gradient_against_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        pred = _random_center_box(rng)
        gt = _random_center_box(rng)
        params = {"pred": obj.box_tensor(pred, dtype=np.float64)}
        gt_t = obj.box_tensor(gt, dtype=np.float64)
        w = obj.LossWeights(5.0, 2.0)

        def f(p):
            return obj.grounding_loss(p["pred"], gt_t, w)

        worst, _ = ad.finite_diff_check(f, params, h=1e-6)
        # The loss has relu/abs kinks; random boxes land on smooth regions,
        # where only near-zero coordinates limit precision.
        assert worst < 1e-4


class TestAccuracy:
    def test_strictly_greater_than_half(self):
        # This pair has IoU exactly 0.5, so it must not count as a hit.
        a = obj.BBox.from_corners(0.0, 0.0, 0.75, 0.25)
        b = obj.BBox.from_corners(0.25, 0.0, 1.0, 0.25)
        assert obj.iou_box(a, b) == 0.5
        assert obj.acc_at_05([a], [b]) == 0.0

    def test_counts_hits(self):
        gt = obj.BBox(0.5, 0.5, 0.4, 0.4)
        near = obj.BBox(0.51, 0.5, 0.4, 0.4)
        far = obj.BBox(0.1, 0.1, 0.1, 0.1)
        assert obj.acc_at_05([near, far], [gt, gt]) == 0.5

    def test_prediction_clipped_to_unit_square(self):
        gt = obj.BBox(0.5, 0.5, 1.0, 1.0)
        # Oversized prediction: unclipped IoU with gt would be diluted, but
        # after clipping it coincides with the frame.
        pred = obj.BBox(0.5, 0.5, 3.0, 3.0)
        assert obj.acc_at_05([pred], [gt]) == 1.0

    def test_rejects_mismatched_lists(self):
        with pytest.raises(ad.ContractViolation):
            obj.acc_at_05([], [])
        with pytest.raises(ad.ContractViolation):
            obj.acc_at_05([obj.BBox(0.5, 0.5, 0.1, 0.1)], [])


class TestBBox:
    def test_corner_round_trip(self):
        b = obj.BBox(0.4, 0.6, 0.2, 0.3)
        back = obj.BBox.from_corners(*b.corners())
        assert np.allclose(back.as_array(), b.as_array(), atol=1e-15)

    def test_rejects_negative_extent(self):
        with pytest.raises(ad.ContractViolation):
            obj.BBox(0.5, 0.5, -0.1, 0.2)

    def test_tensor_round_trip(self):
        b = obj.BBox(0.25, 0.5, 0.125, 0.375)
        assert obj.box_from_tensor(obj.box_tensor(b, dtype=np.float64)) == b

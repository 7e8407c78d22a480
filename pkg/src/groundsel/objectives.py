"""Box regression objectives and metrics.

Boxes are center format (cx, cy, w, h) in normalised [0, 1] image
coordinates.  Two routes exist on purpose and are cross-checked in tests:

* a differentiable route on (1, 4) tensors used by training, built from
  autodiff primitives (overlap clamped through relu so gradients are defined
  everywhere), and
* a vectorised numpy route on corner-format arrays used for metrics and
  large-scale property checks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ContractViolation, Tensor


@dataclass(frozen=True)
class BBox:
    """Center-format box; width and height must be non-negative."""

    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        if self.w < 0 or self.h < 0:
            raise ContractViolation(f"negative box extent: w={self.w}, h={self.h}")

    def corners(self) -> tuple[float, float, float, float]:
        return (
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        )

    def as_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.w, self.h], dtype=np.float64)

    @classmethod
    def from_corners(cls, x0: float, y0: float, x1: float, y1: float) -> "BBox":
        return cls((x0 + x1) / 2.0, (y0 + y1) / 2.0, x1 - x0, y1 - y0)


@dataclass(frozen=True)
class LossWeights:
    l1: float = 5.0
    giou: float = 2.0

    def __post_init__(self):
        if self.l1 < 0 or self.giou < 0:
            raise ContractViolation("loss weights must be non-negative")


# ------------------------------------------------------- numpy metric route


def center_to_corners(boxes: np.ndarray) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64)
    half = boxes[..., 2:4] / 2.0
    return np.concatenate(
        [boxes[..., 0:2] - half, boxes[..., 0:2] + half], axis=-1
    )


def clip_corners_unit(xyxy: np.ndarray) -> np.ndarray:
    return np.clip(np.asarray(xyxy, dtype=np.float64), 0.0, 1.0)


def iou_xyxy(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Intersection over union on corner-format boxes; 0 when union is empty."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    iw = np.maximum(
        0.0, np.minimum(a[..., 2], b[..., 2]) - np.maximum(a[..., 0], b[..., 0])
    )
    ih = np.maximum(
        0.0, np.minimum(a[..., 3], b[..., 3]) - np.maximum(a[..., 1], b[..., 1])
    )
    inter = iw * ih
    area_a = (a[..., 2] - a[..., 0]) * (a[..., 3] - a[..., 1])
    area_b = (b[..., 2] - b[..., 0]) * (b[..., 3] - b[..., 1])
    union = area_a + area_b - inter
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(union > 0.0, inter / np.where(union > 0.0, union, 1.0), 0.0)
    return out


def giou_xyxy(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Generalised IoU: IoU minus the enclosing-box slack, in [-1, 1]."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    iou = iou_xyxy(a, b)
    cw = np.maximum(a[..., 2], b[..., 2]) - np.minimum(a[..., 0], b[..., 0])
    ch = np.maximum(a[..., 3], b[..., 3]) - np.minimum(a[..., 1], b[..., 1])
    c_area = cw * ch
    iw = np.maximum(
        0.0, np.minimum(a[..., 2], b[..., 2]) - np.maximum(a[..., 0], b[..., 0])
    )
    ih = np.maximum(
        0.0, np.minimum(a[..., 3], b[..., 3]) - np.maximum(a[..., 1], b[..., 1])
    )
    inter = iw * ih
    area_a = (a[..., 2] - a[..., 0]) * (a[..., 3] - a[..., 1])
    area_b = (b[..., 2] - b[..., 0]) * (b[..., 3] - b[..., 1])
    union = area_a + area_b - inter
    slack = np.where(c_area > 0.0, (c_area - union) / np.where(c_area > 0.0, c_area, 1.0), 0.0)
    return iou - slack


def iou_box(a: BBox, b: BBox) -> float:
    return float(iou_xyxy(np.array(a.corners()), np.array(b.corners())))


def giou_box(a: BBox, b: BBox) -> float:
    return float(giou_xyxy(np.array(a.corners()), np.array(b.corners())))


def l1_box(a: BBox, b: BBox) -> float:
    """Mean absolute difference over the four center-format coordinates."""
    return float(np.abs(a.as_array() - b.as_array()).mean())


def total_loss_value(pred: BBox, gt: BBox, weights: LossWeights = LossWeights()) -> float:
    return weights.l1 * l1_box(pred, gt) + weights.giou * (1.0 - giou_box(pred, gt))


def acc_at_05(pred: list[BBox], gt: list[BBox]) -> float:
    """Share of pairs with IoU strictly above 0.5, after clipping predictions
    to the unit square."""
    if len(pred) == 0 or len(pred) != len(gt):
        raise ContractViolation(
            f"acc_at_05 needs matching non-empty lists, got {len(pred)} and {len(gt)}"
        )
    p = clip_corners_unit(np.array([b.corners() for b in pred]))
    g = np.array([b.corners() for b in gt], dtype=np.float64)
    return float((iou_xyxy(p, g) > 0.5).mean())


# ------------------------------------------------- differentiable route


def _corner_parts(box: Tensor):
    if box.data.shape != (1, 4):
        raise ContractViolation(f"box tensor must be (1, 4), got {box.data.shape}")
    cx = ad.slice_cols(box, 0, 1)
    cy = ad.slice_cols(box, 1, 2)
    w = ad.slice_cols(box, 2, 3)
    h = ad.slice_cols(box, 3, 4)
    half_w = ad.scale(w, 0.5)
    half_h = ad.scale(h, 0.5)
    return (
        ad.sub(cx, half_w),
        ad.sub(cy, half_h),
        ad.add(cx, half_w),
        ad.add(cy, half_h),
        w,
        h,
    )


def _overlap_terms(pred: Tensor, gt: Tensor):
    px0, py0, px1, py1, pw, ph = _corner_parts(pred)
    gx0, gy0, gx1, gy1, gw, gh = _corner_parts(gt)
    iw = ad.relu(ad.sub(ad.minimum(px1, gx1), ad.maximum(px0, gx0)))
    ih = ad.relu(ad.sub(ad.minimum(py1, gy1), ad.maximum(py0, gy0)))
    inter = ad.mul(iw, ih)
    union = ad.sub(ad.add(ad.mul(pw, ph), ad.mul(gw, gh)), inter)
    corners = (px0, py0, px1, py1, gx0, gy0, gx1, gy1)
    return inter, union, corners


def iou_loss_terms(pred: Tensor, gt: Tensor) -> Tensor:
    """IoU as a (1, 1) tensor.  Degenerate zero-union pairs return a constant
    0 with no gradient, matching the metric route's convention."""
    inter, union, _ = _overlap_terms(pred, gt)
    if union.data[0, 0] <= 0.0:
        return ad.constant([[0.0]], dtype=pred.data.dtype)
    return ad.div(inter, union)


def giou_loss_terms(pred: Tensor, gt: Tensor) -> Tensor:
    """Generalised IoU as a (1, 1) tensor: IoU minus enclosing-box slack."""
    inter, union, corners = _overlap_terms(pred, gt)
    px0, py0, px1, py1, gx0, gy0, gx1, gy1 = corners
    if union.data[0, 0] <= 0.0:
        return ad.constant([[0.0]], dtype=pred.data.dtype)
    iou = ad.div(inter, union)
    cw = ad.sub(ad.maximum(px1, gx1), ad.minimum(px0, gx0))
    ch = ad.sub(ad.maximum(py1, gy1), ad.minimum(py0, gy0))
    c_area = ad.mul(cw, ch)
    slack = ad.div(ad.sub(c_area, union), c_area)
    return ad.sub(iou, slack)


def l1_loss_terms(pred: Tensor, gt: Tensor) -> Tensor:
    """Mean absolute coordinate difference as a (1, 1) tensor."""
    if pred.data.shape != (1, 4) or gt.data.shape != (1, 4):
        raise ContractViolation("l1_loss_terms expects (1, 4) boxes")
    return ad.mean_all(ad.absolute(ad.sub(pred, gt)))


def grounding_loss(pred: Tensor, gt: Tensor,
                   weights: LossWeights = LossWeights()) -> Tensor:
    """weights.l1 * L1 + weights.giou * (1 - GIoU), as a (1, 1) tensor."""
    l1 = l1_loss_terms(pred, gt)
    giou = giou_loss_terms(pred, gt)
    return ad.add(
        ad.scale(l1, weights.l1),
        ad.scale(ad.shift(ad.neg(giou), 1.0), weights.giou),
    )


def box_tensor(box: BBox, dtype=ad.SINGLE) -> Tensor:
    return ad.constant([[box.cx, box.cy, box.w, box.h]], dtype=dtype)


def box_from_tensor(t: Tensor) -> BBox:
    if t.data.shape != (1, 4):
        raise ContractViolation(f"box tensor must be (1, 4), got {t.data.shape}")
    cx, cy, w, h = (float(v) for v in t.data[0])
    return BBox(cx, cy, w, h)

"""Rendering of pruning stages and predicted/reference boxes onto images.

Discarded patches are blacked out; the reference box is drawn in red and the
predicted box in green, as one-pixel outlines clipped to the image.
"""

from __future__ import annotations

import numpy as np

from .autodiff import ContractViolation
from .objectives import BBox
from .selection import SelectionTrace

RED = (1.0, 0.0, 0.0)
GREEN = (0.0, 1.0, 0.0)


def kept_mask(kept_patches: np.ndarray, n_patches: int) -> np.ndarray:
    """Boolean per-patch keep mask from original patch indices."""
    kept_patches = np.asarray(kept_patches, dtype=np.int64)
    if kept_patches.size == 0:
        raise ContractViolation("no kept patches")
    if kept_patches.min() < 0 or kept_patches.max() >= n_patches:
        raise ContractViolation(f"patch index out of range for {n_patches}")
    mask = np.zeros(n_patches, dtype=bool)
    mask[kept_patches] = True
    return mask


def blackout_discarded(image: np.ndarray, kept_patches: np.ndarray,
                       patch_size: int) -> np.ndarray:
    """Copy of image with every patch not listed in kept_patches set to black."""
    image = np.asarray(image)
    side = image.shape[0]
    if image.ndim != 3 or image.shape[1] != side or side % patch_size != 0:
        raise ContractViolation(f"bad image {image.shape} for patch {patch_size}")
    grid = side // patch_size
    mask = kept_mask(kept_patches, grid * grid)
    out = image.copy()
    for p in range(grid * grid):
        if not mask[p]:
            gy, gx = divmod(p, grid)
            out[
                gy * patch_size : (gy + 1) * patch_size,
                gx * patch_size : (gx + 1) * patch_size,
            ] = 0.0
    return out


def draw_box(image: np.ndarray, box: BBox, color: tuple[float, float, float]) -> np.ndarray:
    """Copy of image with a one-pixel box outline, clipped to the frame."""
    image = np.asarray(image)
    h, w, _ = image.shape
    x0, y0, x1, y1 = box.corners()
    px0 = int(np.clip(round(x0 * w), 0, w - 1))
    px1 = int(np.clip(round(x1 * w) - 1, 0, w - 1))
    py0 = int(np.clip(round(y0 * h), 0, h - 1))
    py1 = int(np.clip(round(y1 * h) - 1, 0, h - 1))
    if px1 < px0 or py1 < py0:
        return image.copy()
    out = image.copy()
    c = np.array(color, dtype=out.dtype)
    out[py0, px0 : px1 + 1] = c
    out[py1, px0 : px1 + 1] = c
    out[py0 : py1 + 1, px0] = c
    out[py0 : py1 + 1, px1] = c
    return out


def render_stages(image: np.ndarray, trace: SelectionTrace,
                  patch_size: int) -> list[tuple[int, np.ndarray]]:
    """One image per pruning stage with cumulative discards blacked out.

    Returns (layer_index, image) pairs in stage order; kept_patches in the
    trace are already composed across stages, so each image shows everything
    dropped up to and including that stage.
    """
    return [
        (stage.layer_index, blackout_discarded(image, stage.kept_patches, patch_size))
        for stage in trace.stages
    ]


def render_prediction(image: np.ndarray, predicted: BBox,
                      reference: BBox) -> np.ndarray:
    """Reference box in red, predicted box in green (drawn second)."""
    return draw_box(draw_box(image, reference, RED), predicted, GREEN)

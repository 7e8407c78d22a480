"""Tests for stage rendering and box drawing."""

import numpy as np
import pytest

from groundsel.autodiff import ContractViolation
from groundsel.model import tiny_config, init_params, model_forward, extract_patches
from groundsel.objectives import BBox
from groundsel import viz


def _flat_image(side, value=0.5):
    return np.full((side, side, 3), value, dtype=np.float32)


class TestKeptMask:
    def test_mask_positions(self):
        mask = viz.kept_mask(np.array([0, 3]), 4)
        assert mask.tolist() == [True, False, False, True]

    def test_out_of_range_rejected(self):
        with pytest.raises(ContractViolation):
            viz.kept_mask(np.array([4]), 4)
        with pytest.raises(ContractViolation):
            viz.kept_mask(np.array([], dtype=np.int64), 4)


class TestBlackout:
    def test_black_pixel_count_matches_dropped_patches(self):
        img = _flat_image(12)
        out = viz.blackout_discarded(img, np.array([0, 5, 8]), 4)
        black = (out == 0).all(axis=2).sum()
        assert black == (9 - 3) * 16
        assert (img == 0.5).all()  # input untouched

    def test_kept_patches_preserved_exactly(self):
        rng = np.random.default_rng(3)
        img = rng.random((12, 12, 3)).astype(np.float32)
        out = viz.blackout_discarded(img, np.array([4]), 4)
        assert np.array_equal(out[4:8, 4:8], img[4:8, 4:8])
        assert (out[0:4, 0:4] == 0).all()

    def test_full_keep_is_identity(self):
        img = _flat_image(8)
        out = viz.blackout_discarded(img, np.arange(4), 4)
        assert np.array_equal(out, img)

    def test_bad_geometry_rejected(self):
        with pytest.raises(ContractViolation):
            viz.blackout_discarded(_flat_image(10), np.array([0]), 4)


class TestDrawBox:
    def test_outline_only(self):
        img = np.zeros((8, 8, 3), dtype=np.float32)
        out = viz.draw_box(img, BBox(0.5, 0.5, 0.5, 0.5), (1.0, 0.0, 0.0))
        red = (out[:, :, 0] == 1.0)
        # box corners (0.25..0.75) -> pixels 2..5 inclusive
        assert red[2, 2] and red[2, 5] and red[5, 2] and red[5, 5]
        assert red[2, 3] and red[3, 2]
        assert not red[3, 3]  # interior untouched
        assert red.sum() == 4 * 4 - 4

    def test_clipped_to_frame(self):
        img = np.zeros((8, 8, 3), dtype=np.float32)
        out = viz.draw_box(img, BBox(0.0, 0.0, 1.0, 1.0), (0.0, 1.0, 0.0))
        assert out[0, 0, 1] == 1.0
        assert out.shape == img.shape

    def test_prediction_overlay_orders_colors(self):
        img = np.zeros((16, 16, 3), dtype=np.float32)
        box = BBox(0.5, 0.5, 0.5, 0.5)
        out = viz.render_prediction(img, box, box)
        # same box: green drawn second wins everywhere on the outline
        assert (out[4, 4:12] == np.array([0.0, 1.0, 0.0], dtype=np.float32)).all()


class TestRenderStages:
    def test_one_image_per_stage_cumulative(self):
        cfg = tiny_config()
        params = init_params(cfg)
        rng = np.random.default_rng(0)
        img = rng.random((cfg.image_size, cfg.image_size, 3)).astype(np.float64)
        rows = extract_patches(img, cfg.patch_size).astype(cfg.dtype)
        _, trace = model_forward(rows, [1, 2], params, cfg)
        stages = viz.render_stages(img, trace, cfg.patch_size)
        assert len(stages) == len(cfg.fs_layers)
        for (layer, out), stage in zip(stages, trace.stages):
            assert layer == stage.layer_index
            black_patches = 0
            g = cfg.grid
            for p in range(cfg.n_patches):
                gy, gx = divmod(p, g)
                blk = out[gy * cfg.patch_size : (gy + 1) * cfg.patch_size,
                          gx * cfg.patch_size : (gx + 1) * cfg.patch_size]
                if (blk == 0).all():
                    black_patches += 1
            assert black_patches == cfg.n_patches - stage.kept_patches.size

import numpy as np
import pytest

from rnflnet import explain, resnet
from rnflnet.explain import Heatmap, gradcam, overlay, weighted_activation_map


def micro_model(seed=0):
    return resnet.build_model(resnet.PRESETS["micro"], seed=seed)


class TestWeightedActivationMap:
    def test_zero_gradients_give_zero_map(self):
        acts = np.random.default_rng(0).random((3, 4, 4))
        grads = np.zeros((3, 4, 4))
        cam = weighted_activation_map(acts, grads)
        np.testing.assert_array_equal(cam, np.zeros((4, 4)))

    def test_uniform_positive_channel_is_all_ones(self):
        acts = np.full((1, 5, 5), 2.0)
        grads = np.full((1, 5, 5), 0.3)
        cam = weighted_activation_map(acts, grads)
        np.testing.assert_array_equal(cam, np.ones((5, 5)))

    def test_two_channel_hand_computation(self):
        a1 = np.zeros((4, 4))
        a1[:2, :2] = 3.0                      # top-left quadrant only
        a2 = np.full((4, 4), 1.5)             # uniform
        g1 = np.full((4, 4), 0.5)             # alpha_1 = 0.5 > 0
        g2 = np.full((4, 4), -0.25)           # alpha_2 = -0.25 < 0
        cam = weighted_activation_map(np.stack([a1, a2]), np.stack([g1, g2]))
        raw = np.maximum(0.5 * a1 + (-0.25) * a2, 0.0)
        expected = raw / raw.max()
        np.testing.assert_array_equal(cam, expected)

    def test_max_is_exactly_one_unless_zero(self):
        rng = np.random.default_rng(1)
        for seed in range(10):
            acts = rng.standard_normal((4, 6, 6))
            grads = rng.standard_normal((4, 6, 6))
            cam = weighted_activation_map(acts, grads)
            assert cam.min() >= 0.0
            if cam.any():
                assert cam.max() == 1.0


class TestGradcam:
    def test_shapes_and_range(self):
        m = micro_model(3)
        img = np.random.default_rng(2).random((1, 64, 64))
        heat = gradcam(m, img, target="regression")
        assert heat.grid.shape == (8, 8)          # 64 -> stem /2 -> pool /2 -> stage2 /2
        assert heat.upsampled.shape == (64, 64)
        assert 0.0 <= heat.grid.min() and heat.grid.max() <= 1.0

    def test_zeroed_head_gives_zero_map(self):
        m = micro_model()
        m.head_regression.weight.data[...] = 0.0
        img = np.random.default_rng(3).random((1, 64, 64))
        heat = gradcam(m, img, target="regression")
        np.testing.assert_array_equal(heat.grid, np.zeros_like(heat.grid))

    def test_invariant_to_positive_target_rescaling(self):
        img = np.random.default_rng(4).random((1, 64, 64))
        m = micro_model(5)
        base = gradcam(m, img, target="regression")
        scaled = micro_model(5)
        scaled.head_regression.weight.data[...] *= 7.5
        scaled.head_regression.bias.data[...] *= 7.5
        rescaled = gradcam(scaled, img, target="regression")
        np.testing.assert_allclose(rescaled.grid, base.grid, atol=1e-9)

    def test_abnormality_target_needs_head(self):
        cfg = resnet.ModelConfig(head="regression")
        m = resnet.build_model(cfg, seed=0)
        img = np.zeros((1, 64, 64))
        with pytest.raises(ValueError, match="classification head"):
            gradcam(m, img, target="abnormality")

    def test_deterministic(self):
        m = micro_model(6)
        img = np.random.default_rng(5).random((1, 64, 64))
        a = gradcam(m, img)
        b = gradcam(m, img)
        np.testing.assert_array_equal(a.grid, b.grid)
        np.testing.assert_array_equal(a.upsampled, b.upsampled)


class TestOverlay:
    def _heat(self, h, w, value=0.0):
        grid = np.full((h, w), value)
        return Heatmap(grid=grid, upsampled=grid)

    def test_alpha_zero_returns_image(self):
        img = np.random.default_rng(6).random((1, 8, 8))
        out = overlay(img, self._heat(8, 8, 0.7), alpha=0.0)
        np.testing.assert_allclose(out, np.repeat(img[0][:, :, None], 3, axis=2), atol=1e-15)

    def test_alpha_one_zero_heat_is_solid_blue(self):
        img = np.random.default_rng(7).random((1, 8, 8))
        out = overlay(img, self._heat(8, 8, 0.0), alpha=1.0)
        np.testing.assert_array_equal(out, np.broadcast_to([0.0, 0.0, 1.0], (8, 8, 3)))

    def test_blend_is_pixelwise_affine(self):
        rng = np.random.default_rng(8)
        img = rng.random((1, 6, 6))
        heat = Heatmap(grid=rng.random((6, 6)), upsampled=rng.random((6, 6)))
        alpha = 0.35
        out = overlay(img, heat, alpha)
        expected = ((1 - alpha) * np.repeat(img[0][:, :, None], 3, axis=2)
                    + alpha * explain.color_ramp(heat.upsampled))
        np.testing.assert_allclose(out, expected, atol=1e-15)

    def test_shape_mismatch_raises(self):
        img = np.zeros((1, 8, 8))
        with pytest.raises(ValueError, match="disagree"):
            overlay(img, self._heat(4, 4), alpha=0.5)


class TestUpsample:
    def test_preserves_grid_values_when_aligned(self):
        grid = np.random.default_rng(9).random((8, 8))
        up = explain.bilinear_upsample(grid, 64)
        # 63/7 = 9: original grid points land exactly on the output lattice
        np.testing.assert_allclose(up[::9, ::9], grid, atol=1e-12)

    def test_constant_grid(self):
        up = explain.bilinear_upsample(np.full((4, 4), 0.25), 32)
        np.testing.assert_allclose(up, 0.25, atol=1e-15)


class TestWriteOutputs(object):
    def test_files_written(self, tmp_path):
        m = micro_model(7)
        img = np.random.default_rng(10).random((1, 64, 64))
        heat = gradcam(m, img)
        paths = explain.write_outputs(str(tmp_path / "case1"), img, heat)
        for p in paths:
            assert (tmp_path / p.split("/")[-1]).exists()
        svg = (tmp_path / "case1_gradcam.svg").read_text()
        assert svg.count("data:image/png;base64") == 3

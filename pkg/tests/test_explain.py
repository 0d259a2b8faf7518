import numpy as np
import pytest
import torch
from PIL import Image
from torch import nn

from colopath.explain import COLORMAP, Heatmap, colorize, grad_cam, grad_cam_raw, overlay, quadrant_mass
from colopath.model import BackboneHandle, build_model


class ConstantFeatures(nn.Module):
    """Conv layer whose output is 1 everywhere, followed by pooling and a linear head."""

    def __init__(self, fc_sign: float):
        super().__init__()
        self.features = nn.Conv2d(3, 4, 3, padding=1)
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.fc = nn.Linear(4, 2)
        with torch.no_grad():
            self.features.weight.zero_()
            self.features.bias.fill_(1.0)
            self.fc.weight.copy_(fc_sign * torch.tensor([[1.0, 2.0, 3.0, 4.0], [0.5, 0.5, 0.5, 0.5]]))

    def forward(self, x):
        return self.fc(torch.flatten(self.pool(self.features(x)), 1))


def handle(net, side=16):
    return BackboneHandle(net, "custom", 2, False, "features", input_side=side)


def test_constant_activations_give_uniform_map():
    hm = grad_cam(handle(ConstantFeatures(1.0)), torch.rand(3, 16, 16), 0)
    assert hm.values.shape == (16, 16)
    np.testing.assert_allclose(hm.values, 1.0, atol=1e-12)
    raw = grad_cam_raw(handle(ConstantFeatures(1.0)), torch.rand(3, 16, 16), 0)
    # alpha_k = w_k / (H W); map = sum_k alpha_k * 1
    np.testing.assert_allclose(raw, 10.0 / 256, rtol=1e-6)


def test_negative_evidence_is_rectified_to_zero():
    hm = grad_cam(handle(ConstantFeatures(-1.0)), torch.rand(3, 16, 16), 0)
    assert np.all(hm.values == 0.0)


def test_range_and_determinism():
    m = build_model(4, False, "tiny", 0, 64).eval()
    x = torch.randn(3, 64, 64)
    a = grad_cam(m, x, 2)
    b = grad_cam(m, x, 2)
    assert np.array_equal(a.values, b.values)
    assert a.values.shape == (64, 64)
    assert a.values.min() >= 0 and a.values.max() <= 1
    assert a.values.max() in (0.0, 1.0)


def test_rejects_bad_class():
    with pytest.raises(ValueError):
        grad_cam(handle(ConstantFeatures(1.0)), torch.rand(3, 16, 16), 2)


def test_hooks_removed():
    m = handle(ConstantFeatures(1.0))
    grad_cam(m, torch.rand(3, 16, 16), 1)
    assert not m.layer()._forward_hooks


class TestOverlay:
    def test_alpha_zero_is_original(self):
        img = np.random.default_rng(0).integers(0, 256, (8, 8, 3)) / 255.0
        out = overlay(img, np.random.default_rng(1).random((8, 8)), alpha=0.0)
        assert np.array_equal(out, (img * 255).round().astype(np.uint8))

    def test_alpha_one_is_colormap(self):
        hm = np.linspace(0, 1, 64).reshape(8, 8)
        out = overlay(np.zeros((8, 8, 3)), hm, alpha=1.0)
        assert np.array_equal(out, COLORMAP[np.rint(hm * 255).astype(int)])

    def test_zero_heatmap_formula(self):
        img = np.full((4, 4, 3), 0.5)
        out = overlay(img, Heatmap(np.zeros((4, 4)), 0), alpha=0.4)
        expected = np.rint((0.6 * 0.5 + 0.4 * COLORMAP[0] / 255.0) * 255).astype(np.uint8)
        assert np.array_equal(out, np.broadcast_to(expected, (4, 4, 3)))

    def test_writes_png(self, tmp_path):
        path = tmp_path / "h" / "x.png"
        out = overlay(np.zeros((6, 6, 3)), np.ones((6, 6)), path=path)
        assert np.array_equal(np.asarray(Image.open(path).convert("RGB")), out)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="shapes"):
            overlay(np.zeros((8, 8, 3)), np.zeros((4, 4)))

    def test_colormap_table(self):
        assert COLORMAP.shape == (256, 3) and COLORMAP.dtype == np.uint8
        # low end blue, high end red
        assert COLORMAP[0][2] > COLORMAP[0][0] and COLORMAP[255][0] > COLORMAP[255][2]
        assert colorize(np.array([[0.0]])).shape == (1, 1, 3)


def test_quadrant_mass():
    v = np.zeros((4, 4))
    v[:2, 2:] = 1.0
    assert quadrant_mass(v, 1) == 1.0
    assert quadrant_mass(v, 0) == 0.0
    assert quadrant_mass(np.ones((4, 4)), 3) == 0.25
    assert quadrant_mass(np.zeros((4, 4)), 0) == 0.0

import math

import numpy as np
import pytest
import torch

from mfdsnet.backbone import FeaturePyramid
from mfdsnet.mdpm import (CBAM, MDPM, DenseBlock, MDPMLevel, MultiScaleRF, edge_enhance, gated_residual,
                          highfreq_map, mdpm_forward)

from conftest import central_diff_check


def zero_(module):
    """Zero every weight and bias, leaving DO-Conv depthwise operators at identity."""
    with torch.no_grad():
        for name, p in module.named_parameters():
            if name.split(".")[-1] != "D":
                p.zero_()
    return module


def highfreq_oracle(img, sigma):
    """numpy evaluation of grayscale -> Gaussian -> 5-point Laplacian -> min-max (no resize)."""
    gray = 0.299 * img[0] + 0.587 * img[1] + 0.114 * img[2]
    r = max(1, math.ceil(3 * sigma))
    x = np.arange(-r, r + 1)
    k1 = np.exp(-0.5 * (x / sigma) ** 2)
    k1 /= k1.sum()
    k2 = np.outer(k1, k1)
    h, w = gray.shape
    pad = np.pad(gray, r, mode="edge")
    blur = np.zeros_like(gray)
    for i in range(h):
        for j in range(w):
            blur[i, j] = (pad[i:i + 2 * r + 1, j:j + 2 * r + 1] * k2).sum()
    p = np.pad(blur, 1, mode="edge")
    lap = p[:-2, 1:-1] + p[2:, 1:-1] + p[1:-1, :-2] + p[1:-1, 2:] - 4 * p[1:-1, 1:-1]
    span = lap.max() - lap.min()
    return (lap - lap.min()) / span if span > 0 else np.zeros_like(lap)


class TestHighFreq:
    def test_constant_image_is_zero(self):
        out = highfreq_map(torch.full((2, 3, 16, 16), 0.7), 8, 8, 1.0)
        assert out.shape == (2, 1, 8, 8)
        assert torch.count_nonzero(out) == 0

    def test_matches_direct_stencil(self, rng):
        img = rng.random((3, 12, 12))
        out = highfreq_map(torch.from_numpy(img)[None], 12, 12, 1.0)
        np.testing.assert_allclose(out[0, 0].numpy(), highfreq_oracle(img, 1.0), atol=1e-10)

    def test_bright_pixel_response(self):
        img = torch.zeros(1, 3, 32, 32, dtype=torch.float64)
        img[0, :, 16, 16] = 1.0
        out = highfreq_map(img, 32, 32, 0.2)[0, 0]
        i, j = np.unravel_index(int(out.argmax()), out.shape)
        assert max(abs(i - 16), abs(j - 16)) <= 1
        # the ring around the pixel carries the response; the pixel itself is the minimum
        assert out[16, 16] == 0.0

    def test_bright_pixel_resized_location(self):
        img = torch.zeros(1, 3, 64, 64, dtype=torch.float64)
        img[0, :, 20:22, 40:42] = 1.0   # 2x2 block so the bilinear /2 resize keeps it
        out = highfreq_map(img, 32, 32, 0.2)[0, 0]
        i, j = np.unravel_index(int(out.argmax()), out.shape)
        assert abs(i - 10.25) <= 1.5 and abs(j - 20.25) <= 1.5

    def test_range(self, rng):
        for _ in range(20):
            out = highfreq_map(torch.from_numpy(rng.random((1, 3, 24, 24))), 12, 12, 1.0)
            assert float(out.min()) >= 0.0 and float(out.max()) <= 1.0

    def test_rejects_tiny_target(self):
        with pytest.raises(ValueError, match="3x3"):
            highfreq_map(torch.rand(1, 3, 8, 8), 2, 8)

    def test_rejects_bad_sigma(self):
        with pytest.raises(ValueError, match="sigma"):
            highfreq_map(torch.rand(1, 3, 8, 8), 8, 8, 0.0)


class TestEdgeEnhance:
    def test_unit_map(self, rng):
        f = torch.from_numpy(rng.standard_normal((2, 4, 5, 5)))
        assert torch.equal(edge_enhance(f, torch.ones(2, 1, 5, 5, dtype=f.dtype)), f)

    def test_zero_map(self, rng):
        f = torch.from_numpy(rng.standard_normal((2, 4, 5, 5)))
        assert torch.count_nonzero(edge_enhance(f, torch.zeros(2, 1, 5, 5, dtype=f.dtype))) == 0

    def test_matches_loop(self, rng):
        f = rng.standard_normal((2, 3, 4, 5))
        h = rng.random((2, 1, 4, 5))
        out = edge_enhance(torch.from_numpy(f), torch.from_numpy(h)).numpy()
        expect = np.empty_like(f)
        for b in range(2):
            for c in range(3):
                for i in range(4):
                    for j in range(5):
                        expect[b, c, i, j] = h[b, 0, i, j] * f[b, c, i, j]
        np.testing.assert_array_equal(out, expect)

    def test_mismatch(self):
        with pytest.raises(ValueError, match="spatially"):
            edge_enhance(torch.rand(1, 4, 5, 5), torch.rand(1, 1, 4, 5))


class TestFuseAndMask:
    def test_mask_range(self):
        lvl = MDPMLevel(4, cbam_reduction=2)
        f = torch.randn(2, 4, 8, 8) * 10
        with torch.no_grad():
            _, a_m = lvl.fuse_and_mask(f, f * 0.3)
        assert a_m.shape == (2, 1, 8, 8)
        assert float(a_m.min()) > 0 and float(a_m.max()) < 1

    def test_zero_weights_half(self):
        lvl = MDPMLevel(4, cbam_reduction=2)
        zero_(lvl.fuse)
        zero_(lvl.mask)
        f = torch.randn(1, 4, 6, 6)
        _, a_m = lvl.fuse_and_mask(f, f)
        assert torch.all(a_m == 0.5)

    @pytest.mark.parametrize("channels", [64, 128, 256])
    def test_channel_count(self, channels):
        lvl = MDPMLevel(channels)
        f = torch.randn(1, channels, 4, 4)
        f_fuse, _ = lvl.fuse_and_mask(f, f)
        assert f_fuse.shape == (1, channels, 4, 4)


class TestGatedResidual:
    def test_gate_closed(self, rng):
        f = torch.from_numpy(rng.standard_normal((1, 3, 4, 4)))
        out = gated_residual(torch.randn(1, 3, 4, 4, dtype=f.dtype), torch.rand(1, 1, 4, 4, dtype=f.dtype), f, 0.0)
        assert torch.equal(out, f)

    def test_open_full_mask(self, rng):
        f, ff = (torch.from_numpy(rng.standard_normal((1, 3, 4, 4))) for _ in range(2))
        out = gated_residual(ff, torch.ones(1, 1, 4, 4, dtype=f.dtype), f, 1.0)
        torch.testing.assert_close(out, ff + f, rtol=0, atol=0)

    def test_matches_loop(self, rng):
        ff = rng.standard_normal((2, 3, 4, 4))
        a = rng.random((2, 1, 4, 4))
        f = rng.standard_normal((2, 3, 4, 4))
        out = gated_residual(torch.from_numpy(ff), torch.from_numpy(a), torch.from_numpy(f), 0.37).numpy()
        expect = np.empty_like(f)
        for idx in np.ndindex(*f.shape):
            b, c, i, j = idx
            expect[idx] = 0.37 * ff[idx] * a[b, 0, i, j] + f[idx]
        np.testing.assert_allclose(out, expect, atol=1e-12)


class TestCBAM:
    def test_maps_in_unit_interval_and_shape(self):
        cbam = CBAM(8, reduction=4)
        x = torch.randn(2, 8, 6, 6) * 5
        cm = cbam.channel_map(x)
        sm = cbam.spatial_map(x * cm)
        assert cm.shape == (2, 8, 1, 1) and sm.shape == (2, 1, 6, 6)
        for m in (cm, sm):
            assert float(m.detach().min()) > 0 and float(m.detach().max()) < 1
        assert cbam(x).shape == x.shape

    def test_zero_spatial_conv(self):
        cbam = CBAM(8, reduction=4)
        zero_(cbam.spatial)
        x = torch.randn(2, 8, 6, 6)
        torch.testing.assert_close(cbam(x), 0.5 * (x * cbam.channel_map(x)))


class TestDense:
    def test_shape(self):
        lvl = MDPMLevel(4, cbam_reduction=2)
        x = torch.randn(2, 4, 6, 6)
        assert lvl.dense(x).shape == x.shape

    def test_zero_weights_is_identity(self):
        lvl = MDPMLevel(4, cbam_reduction=2)
        zero_(lvl.dense)
        x = torch.randn(2, 4, 6, 6)
        assert torch.equal(lvl.dense(x), x)

    def test_gradient_reaches_every_parameter(self):
        torch.manual_seed(3)
        blocks = torch.nn.Sequential(DenseBlock(4), DenseBlock(4))
        blocks(torch.randn(2, 4, 6, 6)).sum().backward()
        dead = [n for n, p in blocks.named_parameters() if p.grad is None or p.grad.abs().sum() == 0]
        assert not dead


class TestMultiScaleRF:
    def test_nonnegative(self):
        out = MultiScaleRF(4)(torch.randn(2, 4, 12, 12))
        assert out.shape == (2, 4, 12, 12)
        assert float(out.detach().min()) >= 0

    def test_zero_branches(self):
        m = zero_(MultiScaleRF(4))
        x = torch.randn(1, 4, 12, 12)
        assert torch.equal(m(x), torch.relu(x))

    def test_one_hot_center_kernels(self):
        m = zero_(MultiScaleRF(3)).double()
        with torch.no_grad():
            for br in m.branches:
                for c in range(3):
                    br.W[c, 4, c] = 1.0   # center tap, D is the identity embedding
            for c in range(3):
                m.proj.W[c, 0, c] = 1.0
        x = torch.randn(1, 3, 12, 12, dtype=torch.float64)
        torch.testing.assert_close(m(x), torch.relu(4 * x))


class TestMDPMForward:
    def test_shapes_and_determinism(self):
        m = MDPM((8, 16, 32), cbam_reduction=4).eval()
        img = torch.rand(2, 3, 32, 32)
        pyr = FeaturePyramid(torch.randn(2, 8, 16, 16), torch.randn(2, 16, 8, 8), torch.randn(2, 32, 4, 4))
        with torch.no_grad():
            out1 = mdpm_forward(pyr, img, m)
            out2 = mdpm_forward(pyr, img, m)
        assert [o.shape for o in out1] == [p.shape for p in pyr]
        assert all(torch.equal(a, b) for a, b in zip(out1, out2))

    def test_degenerate_path(self):
        lvl = MDPMLevel(4, cbam_reduction=2)
        zero_(lvl.dense)
        zero_(lvl.msrf)
        f = torch.randn(2, 4, 8, 8)
        out = lvl(f, torch.rand(2, 3, 16, 16))
        torch.testing.assert_close(out, torch.relu(lvl.cbam(f)))

    def test_every_stage_preserves_shape(self):
        lvl = MDPMLevel(4, cbam_reduction=2)
        with torch.no_grad():
            lvl.g.fill_(0.5)
        f = torch.randn(1, 4, 8, 8)
        f_h = highfreq_map(torch.rand(1, 3, 16, 16), 8, 8)
        f_e = edge_enhance(f, f_h)
        f_fuse, a_m = lvl.fuse_and_mask(f, f_e)
        x = lvl.cbam(gated_residual(f_fuse, a_m, f, lvl.g))
        for t in (f_e, f_fuse, x, lvl.dense(x), lvl.msrf(lvl.dense(x))):
            assert t.shape == f.shape

    @pytest.mark.parametrize("param", ["g", "fuse.W", "mask.W", "cbam.spatial.W",
                                       "dense.0.convs.1.W", "msrf.branches.2.W", "msrf.proj.W"])
    def test_gradcheck(self, param):
        torch.manual_seed(5)
        lvl = MDPMLevel(4, cbam_reduction=2).double()
        with torch.no_grad():
            lvl.g.fill_(0.7)
        f = torch.randn(1, 4, 8, 8, dtype=torch.float64)
        img = torch.rand(1, 3, 16, 16, dtype=torch.float64)
        probe = torch.randn(1, 4, 8, 8, dtype=torch.float64)
        target = dict(lvl.named_parameters())[param]
        assert central_diff_check(lambda: (lvl(f, img) * probe).sum(), target) < 1e-3

import pytest
import torch

from mfdsnet.dfim import (AFF, DFIM, ChannelAttentionLogits, EndLayer, LocalAttention, aff_fuse,
                          dfim_forward, endlayer)

from conftest import central_diff_check


def zero_(module):
    with torch.no_grad():
        for name, p in module.named_parameters():
            if not name.endswith("D"):
                p.zero_()


def triple(shape=(2, 8, 6, 6), dtype=torch.float32):
    return tuple(torch.randn(*shape, dtype=dtype) for _ in range(3))


class TestAttention:
    def test_local_is_pointwise(self):
        la = LocalAttention(8).eval()
        with torch.no_grad():
            la.body[1].bias.fill_(10.0)    # keep the hidden ReLU active
        x = torch.randn(1, 8, 7, 7)
        y = x.clone()
        y[0, :, 3, 3] += 5.0
        with torch.no_grad():
            diff = (la(x) - la(y)).abs().sum(1)[0]
        assert diff[3, 3] > 0
        diff[3, 3] = 0
        assert diff.sum() == 0

    def test_channel_logits_ignore_layout(self):
        ca = ChannelAttentionLogits(8)
        x = torch.randn(2, 8, 6, 6)
        perm = torch.randperm(36)
        shuffled = x.flatten(2)[:, :, perm].view_as(x)
        with torch.no_grad():
            a, b = ca(x), ca(shuffled)
        assert a.shape == (2, 8, 1, 1)
        torch.testing.assert_close(a, b, rtol=0, atol=1e-6)


class TestAFF:
    def test_convex_combination(self):
        aff = AFF(8)
        _, i_r, i_p = triple()
        with torch.no_grad():
            out = aff_fuse(i_r, i_p, aff)
        lo, hi = torch.minimum(i_r, i_p), torch.maximum(i_r, i_p)
        assert bool(((out >= lo - 1e-6) & (out <= hi + 1e-6)).all())

    def test_equal_operands(self):
        aff = AFF(8)
        x = torch.randn(2, 8, 6, 6)
        with torch.no_grad():
            torch.testing.assert_close(aff(x, x.clone()), x, rtol=0, atol=1e-6)

    def test_zero_params_average(self):
        aff = AFF(8)
        zero_(aff)
        _, i_r, i_p = triple()
        with torch.no_grad():
            torch.testing.assert_close(aff(i_r, i_p), 0.5 * (i_r + i_p), rtol=0, atol=1e-6)

    def test_weights_swap_invariant(self):
        aff = AFF(8)
        _, i_r, i_p = triple()
        with torch.no_grad():
            assert torch.equal(aff.weights(i_r, i_p), aff.weights(i_p, i_r))

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="differ"):
            AFF(8)(torch.randn(1, 8, 4, 4), torch.randn(1, 8, 4, 6))


class TestDFIM:
    def test_shapes_and_ranges(self):
        m = DFIM(8)
        i_d, i_r, i_p = triple()
        with torch.no_grad():
            out = dfim_forward(i_d, i_r, i_p, m)
            gl, gd = m.gates(m.aff(i_r, i_p), i_d)
        assert out.shape == i_d.shape
        assert bool((out >= 0).all())
        i_mul = gl * gd
        assert bool(((i_mul > 0) & (i_mul < 1)).all())

    def test_matches_composition(self):
        m = DFIM(8).double().eval()
        i_d, i_r, i_p = triple(dtype=torch.float64)
        with torch.no_grad():
            wt = torch.sigmoid(m.aff.f_c(i_r + i_p) + m.aff.f_l(i_r + i_p))
            i_l = wt * i_p + (1 - wt) * i_r
            i_mul = torch.sigmoid(m.f_l(i_l)) * torch.sigmoid(m.f_c(i_d))
            a, d = m.conv_l(i_l), m.conv_d(i_d)
            i_add = a * torch.sigmoid(m.f_l(a)) + d * torch.sigmoid(m.f_c(d))
            expected = torch.relu(m.norm(i_add)) * i_mul
            torch.testing.assert_close(m(i_d, i_r, i_p), expected, rtol=0, atol=1e-12)

    def test_zeroed_additive_branch(self):
        m = DFIM(8).eval()
        zero_(m.conv_l)
        zero_(m.conv_d)
        with torch.no_grad():
            assert torch.count_nonzero(m(*triple())) == 0

    def test_literal_add_differs(self):
        torch.manual_seed(3)
        a = DFIM(8).eval()
        b = DFIM(8, literal_add=True).eval()
        b.load_state_dict(a.state_dict())
        args = triple()
        with torch.no_grad():
            assert not torch.allclose(a(*args), b(*args))

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="does not match"):
            DFIM(8)(torch.randn(1, 8, 4, 4), torch.randn(1, 8, 8, 8), torch.randn(1, 8, 8, 8))

    @pytest.mark.parametrize("param", ["aff.f_c.body.0.W", "aff.f_l.body.3.W", "f_l.body.0.W",
                                       "f_c.body.2.W", "conv_l.W", "conv_d.W", "norm.weight"])
    def test_gradcheck(self, param):
        torch.manual_seed(4)
        m = DFIM(4, reduction=2).double()
        i_d, i_r, i_p = triple((2, 4, 4, 4), torch.float64)
        probe = torch.randn(2, 4, 4, 4, dtype=torch.float64)
        target = dict(m.named_parameters())[param]
        assert central_diff_check(lambda: (m(i_d, i_r, i_p) * probe).sum(), target) < 1e-3


class TestEndLayer:
    def test_shape(self):
        e = EndLayer(64)
        with torch.no_grad():
            assert endlayer(torch.randn(2, 64, 16, 16), e).shape == (2, 1, 32, 32)
            assert e(torch.randn(1, 64, 16, 16), size=(40, 24)).shape == (1, 1, 40, 24)

    @pytest.mark.parametrize("bias", [-3.0, 3.0])
    def test_logit_sign_follows_bias(self, bias):
        e = EndLayer(8).eval()
        with torch.no_grad():
            e.out.W.zero_()
            e.out.bias.fill_(bias)
            out = e(torch.randn(1, 8, 4, 4))
        assert torch.equal(torch.sign(out), torch.full_like(out, bias).sign())

    def test_gradcheck(self):
        e = EndLayer(4).double()
        x = torch.randn(2, 4, 4, 4, dtype=torch.float64)
        probe = torch.randn(2, 1, 8, 8, dtype=torch.float64)
        assert central_diff_check(lambda: (e(x) * probe).sum(), e.conv.W) < 1e-3

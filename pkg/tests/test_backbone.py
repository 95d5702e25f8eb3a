import pytest
import torch

from mfdsnet.backbone import (STAGE_BLOCKS, BasicBlock, ResNet34Encoder, extract_features,
                              twin_extract)


@pytest.fixture(scope="module")
def encoder():
    torch.manual_seed(0)
    return ResNet34Encoder().eval()


def test_pyramid_shapes_256(encoder):
    with torch.no_grad():
        p = extract_features(torch.rand(2, 3, 256, 256), encoder)
    assert p.level0.shape == (2, 64, 128, 128)
    assert p.level1.shape == (2, 128, 64, 64)
    assert p.level2.shape == (2, 256, 32, 32)


@pytest.mark.parametrize("batch", [1, 2, 7])
def test_batch_preserved(encoder, batch):
    with torch.no_grad():
        p = extract_features(torch.rand(batch, 3, 32, 32), encoder)
    assert [lvl.shape[0] for lvl in p] == [batch] * 3
    assert [lvl.shape[-1] for lvl in p] == [16, 8, 4]


def test_deterministic_eval(encoder):
    x = torch.rand(1, 3, 64, 64)
    with torch.no_grad():
        a, b = extract_features(x, encoder), extract_features(x, encoder)
    assert all(torch.equal(u, v) for u, v in zip(a, b))


def test_rejects_indivisible(encoder):
    with pytest.raises(ValueError, match="divisible by 8"):
        extract_features(torch.rand(1, 3, 60, 64), encoder)


def test_no_pooling_layers(encoder):
    pooling = (torch.nn.MaxPool2d, torch.nn.AvgPool2d, torch.nn.AdaptiveAvgPool2d, torch.nn.AdaptiveMaxPool2d)
    assert not any(isinstance(m, pooling) for m in encoder.modules())


def test_block_counts():
    enc = ResNet34Encoder()
    counts = tuple(sum(isinstance(m, BasicBlock) for m in s.modules())
                   for s in (enc.stage1, enc.stage2, enc.stage3))
    assert counts == STAGE_BLOCKS == (3, 4, 6)


def test_gradient_reaches_every_parameter():
    torch.manual_seed(1)
    enc = ResNet34Encoder()
    extract_features(torch.rand(2, 3, 32, 32), enc).level2.square().mean().backward()
    dead = [n for n, p in enc.named_parameters() if p.grad is None or p.grad.abs().sum() == 0]
    assert not dead


class TestTwin:
    def test_identical_inputs(self, encoder):
        x = torch.rand(1, 3, 32, 32)
        with torch.no_grad():
            pa, pb = twin_extract(x, x.clone(), encoder)
        assert all(torch.equal(u, v) for u, v in zip(pa, pb))

    def test_swap_symmetry(self, encoder):
        a, b = torch.rand(1, 3, 32, 32), torch.rand(1, 3, 32, 32)
        with torch.no_grad():
            p1, p2 = twin_extract(a, b, encoder)
            q1, q2 = twin_extract(b, a, encoder)
        assert all(torch.equal(u, v) for u, v in zip(p1, q2))
        assert all(torch.equal(u, v) for u, v in zip(p2, q1))

    def test_distinct_inputs_differ(self, encoder):
        with torch.no_grad():
            pa, pb = twin_extract(torch.rand(1, 3, 32, 32), torch.rand(1, 3, 32, 32), encoder)
        assert all(not torch.equal(u, v) for u, v in zip(pa, pb))

    def test_shape_mismatch(self, encoder):
        with pytest.raises(ValueError, match="differ in shape"):
            twin_extract(torch.rand(1, 3, 32, 32), torch.rand(1, 3, 32, 40), encoder)

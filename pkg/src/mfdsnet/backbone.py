"""Pooling-free ResNet-34 twin encoder.

Only the stem and the first three residual stages of ResNet-34 are kept and
the stem max-pool is removed, giving three feature levels at strides 2/4/8.
"""
from typing import NamedTuple

import torch.nn as nn
from torch import Tensor

from .doconv import DOConv2d

STAGE_BLOCKS = (3, 4, 6)
STAGE_CHANNELS = (64, 128, 256)


class FeaturePyramid(NamedTuple):
    level0: Tensor  # stride 2, 64 ch
    level1: Tensor  # stride 4, 128 ch
    level2: Tensor  # stride 8, 256 ch


def conv_bn_relu(c_in, c_out, k=3, stride=1, padding=None, relu=True):
    padding = k // 2 if padding is None else padding
    layers = [DOConv2d(c_in, c_out, k, stride=stride, padding=padding, bias=False), nn.BatchNorm2d(c_out)]
    if relu:
        layers.append(nn.ReLU(inplace=True))
    return nn.Sequential(*layers)


class BasicBlock(nn.Module):
    def __init__(self, c_in, c_out, stride=1):
        super().__init__()
        self.conv1 = conv_bn_relu(c_in, c_out, 3, stride)
        self.conv2 = conv_bn_relu(c_out, c_out, 3, relu=False)
        self.shortcut = None
        if stride != 1 or c_in != c_out:
            self.shortcut = conv_bn_relu(c_in, c_out, 1, stride, padding=0, relu=False)
        self.act = nn.ReLU(inplace=True)

    def forward(self, x):
        identity = x if self.shortcut is None else self.shortcut(x)
        return self.act(self.conv2(self.conv1(x)) + identity)


def _stage(c_in, c_out, blocks, stride):
    layers = [BasicBlock(c_in, c_out, stride)]
    layers += [BasicBlock(c_out, c_out) for _ in range(blocks - 1)]
    return nn.Sequential(*layers)


class ResNet34Encoder(nn.Module):
    def __init__(self, in_channels=3):
        super().__init__()
        self.stem = conv_bn_relu(in_channels, STAGE_CHANNELS[0], 7, stride=2, padding=3)
        self.stage1 = _stage(STAGE_CHANNELS[0], STAGE_CHANNELS[0], STAGE_BLOCKS[0], 1)
        self.stage2 = _stage(STAGE_CHANNELS[0], STAGE_CHANNELS[1], STAGE_BLOCKS[1], 2)
        self.stage3 = _stage(STAGE_CHANNELS[1], STAGE_CHANNELS[2], STAGE_BLOCKS[2], 2)

    def forward(self, image):
        return extract_features(image, self)

    def load_external(self, state_dict, strict=False):
        """Hook for externally supplied (e.g. converted pretrained) weights."""
        return self.load_state_dict(state_dict, strict=strict)


def extract_features(image: Tensor, encoder: ResNet34Encoder) -> FeaturePyramid:
    if image.dim() != 4 or image.shape[1] != 3:
        raise ValueError(f"expected image of shape (B, 3, H, W), got {tuple(image.shape)}")
    h, w = image.shape[-2:]
    if h % 8 or w % 8:
        raise ValueError(f"image height and width must be divisible by 8, got {h}x{w}")
    x = encoder.stem(image)
    l0 = encoder.stage1(x)
    l1 = encoder.stage2(l0)
    l2 = encoder.stage3(l1)
    return FeaturePyramid(l0, l1, l2)


def twin_extract(image_a: Tensor, image_b: Tensor, encoder: ResNet34Encoder):
    if image_a.shape != image_b.shape:
        raise ValueError(f"image_a {tuple(image_a.shape)} and image_b {tuple(image_b.shape)} differ in shape")
    return extract_features(image_a, encoder), extract_features(image_b, encoder)

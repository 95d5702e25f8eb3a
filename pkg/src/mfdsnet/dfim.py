"""Differential Feature Integration Module and the final prediction layer."""
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch import Tensor

from .doconv import DOConv2d


class LocalAttention(nn.Module):
    """Per-pixel bottleneck producing attention logits (no pooling, no sigmoid)."""

    def __init__(self, channels, reduction=4):
        super().__init__()
        hidden = max(1, channels // reduction)
        self.body = nn.Sequential(
            DOConv2d(channels, hidden, 1),
            nn.BatchNorm2d(hidden),
            nn.ReLU(inplace=True),
            DOConv2d(hidden, channels, 1),
        )

    def forward(self, x):
        return self.body(x)


class ChannelAttentionLogits(nn.Module):
    """Global average pool followed by a 1x1 bottleneck; returns (B, C, 1, 1) logits."""

    def __init__(self, channels, reduction=4):
        super().__init__()
        hidden = max(1, channels // reduction)
        self.body = nn.Sequential(
            DOConv2d(channels, hidden, 1),
            nn.ReLU(inplace=True),
            DOConv2d(hidden, channels, 1),
        )

    def forward(self, x):
        return self.body(x.mean(dim=(2, 3), keepdim=True))


def local_attention(x: Tensor, state: LocalAttention) -> Tensor:
    return state(x)


def channel_attention_logits(x: Tensor, state: ChannelAttentionLogits) -> Tensor:
    return state(x)


class AFF(nn.Module):
    def __init__(self, channels, reduction=4):
        super().__init__()
        self.f_c = ChannelAttentionLogits(channels, reduction)
        self.f_l = LocalAttention(channels, reduction)

    def weights(self, i_r, i_p):
        i_f = i_r + i_p
        return torch.sigmoid(self.f_c(i_f) + self.f_l(i_f))

    def forward(self, i_r, i_p):
        if i_r.shape != i_p.shape:
            raise ValueError(f"aff_fuse: shapes {tuple(i_r.shape)} and {tuple(i_p.shape)} differ")
        wt = self.weights(i_r, i_p)
        return wt * i_p + (1 - wt) * i_r


def aff_fuse(i_r: Tensor, i_p: Tensor, state: AFF) -> Tensor:
    return state(i_r, i_p)


class DFIM(nn.Module):
    """Two-stage fusion of the temporal shallow features with the deep feature.

    ``literal_add=True`` sums the raw attention logits in the additive branch
    instead of modulating each conv feature by its sigmoid attention.
    """

    def __init__(self, channels, reduction=4, literal_add=False):
        super().__init__()
        self.literal_add = literal_add
        self.aff = AFF(channels, reduction)
        self.f_l = LocalAttention(channels, reduction)
        self.f_c = ChannelAttentionLogits(channels, reduction)
        self.conv_l = DOConv2d(channels, channels, 3, padding=1)
        self.conv_d = DOConv2d(channels, channels, 3, padding=1)
        self.norm = nn.BatchNorm2d(channels)

    def gates(self, i_l, i_d):
        return torch.sigmoid(self.f_l(i_l)), torch.sigmoid(self.f_c(i_d))

    def additive(self, i_l, i_d):
        a = self.conv_l(i_l)
        d = self.conv_d(i_d)
        if self.literal_add:
            return self.f_l(a) + self.f_c(d)
        return a * torch.sigmoid(self.f_l(a)) + d * torch.sigmoid(self.f_c(d))

    def forward(self, i_d, i_r, i_p):
        if i_d.shape != i_r.shape:
            raise ValueError(f"dfim: deep feature {tuple(i_d.shape)} does not match shallow {tuple(i_r.shape)}")
        i_l = self.aff(i_r, i_p)
        gate_l, gate_d = self.gates(i_l, i_d)
        i_mul = gate_l * gate_d
        i_add = self.additive(i_l, i_d)
        return F.relu(self.norm(i_add)) * i_mul


def dfim_forward(i_d: Tensor, i_r: Tensor, i_p: Tensor, state: DFIM) -> Tensor:
    return state(i_d, i_r, i_p)


class EndLayer(nn.Module):
    def __init__(self, channels, scale=2):
        super().__init__()
        self.scale = scale
        self.conv = DOConv2d(channels, channels, 3, padding=1, bias=False)
        self.norm = nn.BatchNorm2d(channels)
        self.out = DOConv2d(channels, 1, 1)

    def forward(self, features, size=None):
        x = self.out(F.relu(self.norm(self.conv(features))))
        if size is None:
            size = (features.shape[-2] * self.scale, features.shape[-1] * self.scale)
        return F.interpolate(x, size=size, mode="bilinear", align_corners=False)


def endlayer(features: Tensor, state: EndLayer) -> Tensor:
    return state(features)

"""Global Semantic Enhancement Module (bottleneck).

Channel attention followed by four parallel Semantic Context Modules, each
combining a patch-local convolution with a non-local block evaluated on a
pooled ``k x k`` grid.
"""
import math

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch import Tensor

from .doconv import DOConv2d

PATCH_GRIDS = (1, 2, 4, 8)


class ChannelAttention(nn.Module):
    def __init__(self, channels, reduction=16):
        super().__init__()
        if reduction < 1 or channels % reduction:
            raise ValueError(f"channels={channels} not divisible by reduction ratio {reduction}")
        self.fc1 = DOConv2d(channels, channels // reduction, 1)
        self.fc2 = DOConv2d(channels // reduction, channels, 1)

    def weights(self, x):
        z = x.mean(dim=(2, 3), keepdim=True)
        return torch.sigmoid(self.fc2(F.relu(self.fc1(z))))

    def forward(self, x):
        return self.weights(x) * x


def channel_attention(x: Tensor, state: ChannelAttention) -> Tensor:
    return state(x)


class NonLocalBlock(nn.Module):
    """Embedded-Gaussian non-local block with a residual output projection."""

    def __init__(self, channels, inter_channels=None):
        super().__init__()
        self.inter = inter_channels or max(1, channels // 2)
        self.theta = DOConv2d(channels, self.inter, 1)
        self.phi = DOConv2d(channels, self.inter, 1)
        self.g = DOConv2d(channels, self.inter, 1)
        self.proj = DOConv2d(self.inter, channels, 1)

    def attention(self, w):
        q = self.theta(w).flatten(2).transpose(1, 2)  # B, N, d
        k = self.phi(w).flatten(2)                     # B, d, N
        return torch.softmax(q @ k / math.sqrt(self.inter), dim=-1)

    def forward(self, w):
        b, _, h, wd = w.shape
        v = self.g(w).flatten(2).transpose(1, 2)       # B, N, d
        y = (self.attention(w) @ v).transpose(1, 2).reshape(b, self.inter, h, wd)
        return w + self.proj(y)


def non_local(w: Tensor, state: NonLocalBlock) -> Tensor:
    return state(w)


def to_patches(x: Tensor, k: int) -> Tensor:
    """(B, C, H, W) -> (B*k*k, C, H/k, W/k), patches in row-major grid order."""
    b, c, h, w = x.shape
    ph, pw = h // k, w // k
    x = x.reshape(b, c, k, ph, k, pw).permute(0, 2, 4, 1, 3, 5)
    return x.reshape(b * k * k, c, ph, pw)


def from_patches(p: Tensor, k: int) -> Tensor:
    bkk, c, ph, pw = p.shape
    b = bkk // (k * k)
    x = p.reshape(b, k, k, c, ph, pw).permute(0, 3, 1, 4, 2, 5)
    return x.reshape(b, c, k * ph, k * pw)


class SCM(nn.Module):
    def __init__(self, channels, k):
        super().__init__()
        if k < 1:
            raise ValueError(f"patch grid k must be >= 1, got {k}")
        self.k = k
        self.patch_conv = DOConv2d(channels, channels, 3, padding=1)
        self.non_local = NonLocalBlock(channels)
        self.gamma = nn.Parameter(torch.zeros(()))

    def local_branch(self, x):
        return from_patches(self.patch_conv(to_patches(x, self.k)), self.k)

    def context_branch(self, x):
        pooled = F.adaptive_avg_pool2d(x, self.k)
        ctx = self.non_local(pooled)
        return F.interpolate(ctx, size=x.shape[-2:], mode="bilinear", align_corners=False)

    def forward(self, x_prime):
        h, w = x_prime.shape[-2:]
        if h % self.k or w % self.k:
            raise ValueError(f"feature size {h}x{w} is not divisible by patch grid k={self.k}")
        return self.gamma * (self.context_branch(x_prime) * self.local_branch(x_prime))


def scm(x_prime: Tensor, k: int, state: SCM) -> Tensor:
    if state.k != k:
        raise ValueError(f"SCM state was built for k={state.k}, called with k={k}")
    return state(x_prime)


class GSEM(nn.Module):
    def __init__(self, channels=256, grids=PATCH_GRIDS, reduction=16):
        super().__init__()
        self.grids = tuple(grids)
        self.ca = ChannelAttention(channels, reduction)
        self.scms = nn.ModuleList(SCM(channels, k) for k in self.grids)
        self.fuse = DOConv2d(len(self.grids) * channels, channels, 1)

    def forward(self, x):
        return gsem_forward(x, self)


def gsem_forward(x: Tensor, state: GSEM) -> Tensor:
    kmax = max(state.grids)
    h, w = x.shape[-2:]
    if h % kmax or w % kmax:
        raise ValueError(f"feature size {h}x{w} is not divisible by the largest patch grid {kmax}")
    x_prime = state.ca(x)
    return state.fuse(torch.cat([m(x_prime) for m in state.scms], dim=1))

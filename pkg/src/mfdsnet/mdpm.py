"""Multi-scale Detail Preservation Module.

Per pyramid level the module injects a Gaussian-then-Laplacian edge map of
the source image, gates the fused result with a learned attention mask,
recalibrates it with CBAM and refines it with two dense blocks followed by
three parallel dilated convolutions.
"""
import math

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch import Tensor

from .backbone import FeaturePyramid
from .doconv import DOConv2d

GRAY_WEIGHTS = (0.299, 0.587, 0.114)
LAPLACIAN = ((0.0, 1.0, 0.0), (1.0, -4.0, 1.0), (0.0, 1.0, 0.0))
DILATIONS = (1, 3, 5)


def gaussian_kernel1d(sigma: float, dtype=torch.float32) -> Tensor:
    radius = max(1, math.ceil(3 * sigma))
    x = torch.arange(-radius, radius + 1, dtype=dtype)
    k = torch.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def minmax_normalize(x: Tensor) -> Tensor:
    """Per-sample min-max scaling to [0, 1]; a flat map becomes all zeros."""
    flat = x.flatten(1)
    lo = flat.min(dim=1).values.view(-1, 1, 1, 1)
    hi = flat.max(dim=1).values.view(-1, 1, 1, 1)
    span = hi - lo
    safe = torch.where(span > 0, span, torch.ones_like(span))
    return torch.where(span > 0, (x - lo) / safe, torch.zeros_like(x))


def highfreq_map(source_image: Tensor, target_h: int, target_w: int, sigma: float = 1.0) -> Tensor:
    if sigma <= 0:
        raise ValueError(f"sigma must be > 0, got {sigma}")
    if target_h < 3 or target_w < 3:
        raise ValueError(f"target size must be at least 3x3 for the Laplacian, got {target_h}x{target_w}")
    if source_image.dim() != 4 or source_image.shape[1] != 3:
        raise ValueError(f"expected source image of shape (B, 3, H, W), got {tuple(source_image.shape)}")
    wts = torch.tensor(GRAY_WEIGHTS, dtype=source_image.dtype, device=source_image.device)
    gray = (source_image * wts.view(1, 3, 1, 1)).sum(dim=1, keepdim=True)
    if gray.shape[-2:] != (target_h, target_w):
        gray = F.interpolate(gray, size=(target_h, target_w), mode="bilinear", align_corners=False)

    k = gaussian_kernel1d(sigma, gray.dtype).to(gray.device)
    r = k.numel() // 2
    # separable blur; replicate padding keeps flat regions flat at the border
    blurred = F.conv2d(F.pad(gray, (r, r, 0, 0), mode="replicate"), k.view(1, 1, 1, -1))
    blurred = F.conv2d(F.pad(blurred, (0, 0, r, r), mode="replicate"), k.view(1, 1, -1, 1))
    lap = torch.tensor(LAPLACIAN, dtype=gray.dtype, device=gray.device).view(1, 1, 3, 3)
    response = F.conv2d(F.pad(blurred, (1, 1, 1, 1), mode="replicate"), lap)
    return minmax_normalize(response)


def _check_spatial(a: Tensor, b: Tensor, what: str):
    if a.shape[0] != b.shape[0] or a.shape[-2:] != b.shape[-2:]:
        raise ValueError(f"{what}: shapes {tuple(a.shape)} and {tuple(b.shape)} do not match spatially")


def edge_enhance(f: Tensor, f_h: Tensor) -> Tensor:
    _check_spatial(f, f_h, "edge_enhance")
    if f_h.shape[1] != 1:
        raise ValueError(f"edge map must have one channel, got {f_h.shape[1]}")
    return f_h * f


def gated_residual(f_fuse: Tensor, a_m: Tensor, f_original: Tensor, g) -> Tensor:
    return g * (f_fuse * a_m) + f_original


class CBAM(nn.Module):
    def __init__(self, channels, reduction=16, spatial_kernel=7):
        super().__init__()
        hidden = max(1, channels // reduction)
        self.mlp = nn.Sequential(
            DOConv2d(channels, hidden, 1),
            nn.ReLU(inplace=True),
            DOConv2d(hidden, channels, 1),
        )
        self.spatial = DOConv2d(2, 1, spatial_kernel, padding=spatial_kernel // 2)

    def channel_map(self, x):
        avg = self.mlp(F.adaptive_avg_pool2d(x, 1))
        mx = self.mlp(F.adaptive_max_pool2d(x, 1))
        return torch.sigmoid(avg + mx)

    def spatial_map(self, x):
        pooled = torch.cat([x.mean(dim=1, keepdim=True), x.amax(dim=1, keepdim=True)], dim=1)
        return torch.sigmoid(self.spatial(pooled))

    def forward(self, x):
        x = x * self.channel_map(x)
        return x * self.spatial_map(x)


class DenseBlock(nn.Module):
    """Two densely connected 3x3 conv layers, 1x1 projection, residual add."""

    def __init__(self, channels, growth=None, layers=2):
        super().__init__()
        growth = growth or max(1, channels // 2)
        self.convs = nn.ModuleList(
            DOConv2d(channels + i * growth, growth, 3, padding=1) for i in range(layers))
        self.proj = DOConv2d(channels + layers * growth, channels, 1)

    def forward(self, x):
        feats = [x]
        for conv in self.convs:
            feats.append(F.relu(conv(torch.cat(feats, dim=1))))
        return x + self.proj(torch.cat(feats, dim=1))


class MultiScaleRF(nn.Module):
    def __init__(self, channels, dilations=DILATIONS):
        super().__init__()
        self.branches = nn.ModuleList(
            DOConv2d(channels, channels, 3, padding=d, dilation=d) for d in dilations)
        self.proj = DOConv2d(channels, channels, 1)

    def forward(self, x_prime):
        x_f = self.proj(sum(branch(x_prime) for branch in self.branches))
        return F.relu(x_f + x_prime)


class MDPMLevel(nn.Module):
    """Detail preservation for one pyramid level with ``channels`` features."""

    def __init__(self, channels, sigma=1.0, cbam_reduction=16, dense_blocks=2):
        super().__init__()
        if sigma <= 0:
            raise ValueError(f"sigma must be > 0, got {sigma}")
        self.sigma = sigma
        self.fuse = DOConv2d(2 * channels, channels, 3, padding=1)
        self.mask = DOConv2d(channels, 1, 1)
        self.g = nn.Parameter(torch.zeros(()))
        self.cbam = CBAM(channels, cbam_reduction)
        self.dense = nn.Sequential(*[DenseBlock(channels) for _ in range(dense_blocks)])
        self.msrf = MultiScaleRF(channels)

    def fuse_and_mask(self, f, f_e):
        if f.shape != f_e.shape:
            raise ValueError(f"fuse_and_mask: f {tuple(f.shape)} and f_e {tuple(f_e.shape)} differ")
        f_fuse = self.fuse(torch.cat([f_e, f], dim=1))
        return f_fuse, torch.sigmoid(self.mask(f_fuse))

    def forward(self, f, source_image):
        f_h = highfreq_map(source_image, f.shape[-2], f.shape[-1], self.sigma)
        f_e = edge_enhance(f, f_h)
        f_fuse, a_m = self.fuse_and_mask(f, f_e)
        x = self.cbam(gated_residual(f_fuse, a_m, f, self.g))
        return self.msrf(self.dense(x))


class MDPM(nn.Module):
    def __init__(self, channels=(64, 128, 256), sigma=1.0, cbam_reduction=16):
        super().__init__()
        self.levels = nn.ModuleList(MDPMLevel(c, sigma, cbam_reduction) for c in channels)

    def forward(self, pyramid: FeaturePyramid, source_image: Tensor) -> FeaturePyramid:
        return mdpm_forward(pyramid, source_image, self)


def mdpm_forward(pyramid: FeaturePyramid, source_image: Tensor, state: MDPM) -> FeaturePyramid:
    if pyramid[0].shape[0] != source_image.shape[0]:
        raise ValueError("pyramid and source image batch sizes differ")
    return FeaturePyramid(*(level(f, source_image) for level, f in zip(state.levels, pyramid)))

"""Full MFDS-Net forward pass with its deep-supervision side outputs."""
from dataclasses import dataclass, field
from typing import List, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch import Tensor

from .backbone import STAGE_CHANNELS, ResNet34Encoder, twin_extract
from .dfim import DFIM, EndLayer
from .doconv import DOConv2d, fold_module
from .gsem import GSEM, PATCH_GRIDS
from .mdpm import MDPM

# ImageNet statistics, applied after scaling pixels to [0, 1]
DEFAULT_MEAN = (0.485, 0.456, 0.406)
DEFAULT_STD = (0.229, 0.224, 0.225)

AUX_NAMES = ("gsem_a", "gsem_b", "bottleneck", "dfim_1", "dfim_0")


@dataclass
class ModelConfig:
    sigma: float = 1.0
    grids: Tuple[int, ...] = PATCH_GRIDS
    gsem_reduction: int = 16
    cbam_reduction: int = 16
    dfim_reduction: int = 4
    literal_add: bool = False
    mean: Tuple[float, ...] = DEFAULT_MEAN
    std: Tuple[float, ...] = DEFAULT_STD


@dataclass
class ForwardOutputs:
    final_logits: Tensor
    aux_logits: List[Tensor] = field(default_factory=list)

    @property
    def aux_sizes(self):
        return [tuple(a.shape[-2:]) for a in self.aux_logits]


class AuxHead(nn.Module):
    """1x1 conv to a single logit channel; upsampling happens in :func:`aux_head`."""

    def __init__(self, channels):
        super().__init__()
        self.conv = DOConv2d(channels, 1, 1)

    def forward(self, feature):
        return self.conv(feature)


def upsample_to(x: Tensor, size) -> Tensor:
    if tuple(x.shape[-2:]) == tuple(size):
        return x
    return F.interpolate(x, size=tuple(size), mode="bilinear", align_corners=False)


def aux_head(feature: Tensor, head: AuxHead, size) -> Tensor:
    return upsample_to(head(feature), size)


class UpProject(nn.Module):
    """Bilinear x2 upsampling followed by a 1x1 channel projection."""

    def __init__(self, c_in, c_out):
        super().__init__()
        self.proj = DOConv2d(c_in, c_out, 1)

    def forward(self, x):
        x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
        return self.proj(x)


class MFDSNet(nn.Module):
    def __init__(self, config: ModelConfig = None):
        super().__init__()
        self.config = config or ModelConfig()
        cfg = self.config
        c0, c1, c2 = STAGE_CHANNELS
        self.encoder = ResNet34Encoder()
        self.mdpm = MDPM(STAGE_CHANNELS, cfg.sigma, cfg.cbam_reduction)
        self.gsem = GSEM(c2, cfg.grids, cfg.gsem_reduction)
        self.up1 = UpProject(c2, c1)
        self.dfim1 = DFIM(c1, cfg.dfim_reduction, cfg.literal_add)
        self.up0 = UpProject(c1, c0)
        self.dfim0 = DFIM(c0, cfg.dfim_reduction, cfg.literal_add)
        self.endlayer = EndLayer(c0)
        # out1/out2 share a head: both live in the same GSEM feature space
        self.head_gsem = AuxHead(c2)
        self.head_bottleneck = AuxHead(c2)
        self.head_dfim1 = AuxHead(c1)
        self.head_dfim0 = AuxHead(c0)
        self.register_buffer("mean", torch.tensor(cfg.mean).view(1, 3, 1, 1), persistent=False)
        self.register_buffer("std", torch.tensor(cfg.std).view(1, 3, 1, 1), persistent=False)
        self.folded = False

    @property
    def min_divisor(self):
        return 8 * max(self.config.grids)

    def normalize(self, image):
        return (image - self.mean) / self.std

    def forward(self, image_a, image_b):
        return forward_full(image_a, image_b, self)

    def predict_logits(self, image_a, image_b):
        return forward_full(image_a, image_b, self).final_logits

    def fold(self):
        return fold_model(self)


def check_image_pair(image_a: Tensor, image_b: Tensor, divisor: int = 8):
    if image_a.dim() != 4 or image_a.shape[1] != 3:
        raise ValueError(f"expected images of shape (B, 3, H, W), got {tuple(image_a.shape)}")
    if image_a.shape != image_b.shape:
        raise ValueError(f"image_a {tuple(image_a.shape)} and image_b {tuple(image_b.shape)} differ in shape")
    h, w = image_a.shape[-2:]
    if h % divisor or w % divisor:
        raise ValueError(f"image height and width must be divisible by {divisor}, got {h}x{w}")


def forward_full(image_a: Tensor, image_b: Tensor, model: MFDSNet) -> ForwardOutputs:
    """Run the whole network on a pair of images scaled to [0, 1].

    Aux logits are returned at their native resolution in the order
    (GSEM branch a, GSEM branch b, summed bottleneck, DFIM at stride 4,
    DFIM at stride 2).
    """
    check_image_pair(image_a, image_b, model.min_divisor)
    size = image_a.shape[-2:]
    list_a, list_b = twin_extract(model.normalize(image_a), model.normalize(image_b), model.encoder)
    mlist_a = model.mdpm(list_a, image_a)
    mlist_b = model.mdpm(list_b, image_b)

    out_a = model.gsem(mlist_a.level2)
    out_b = model.gsem(mlist_b.level2)
    out = out_a + out_b
    aux = [model.head_gsem(out_a), model.head_gsem(out_b), model.head_bottleneck(out)]

    out = model.dfim1(model.up1(out), mlist_a.level1, mlist_b.level1)
    aux.append(model.head_dfim1(out))
    out = model.dfim0(model.up0(out), mlist_a.level0, mlist_b.level0)
    aux.append(model.head_dfim0(out))

    final = model.endlayer(out, size=size)
    return ForwardOutputs(final, aux)


def fold_model(model: MFDSNet) -> MFDSNet:
    """Fold every DO-Conv into a plain convolution (in place, idempotent)."""
    fold_module(model)
    model.folded = True
    return model

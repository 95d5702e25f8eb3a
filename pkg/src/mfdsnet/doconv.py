"""Depthwise over-parameterized convolution (DO-Conv).

A DO-Conv layer keeps two trainable tensors: a depthwise operator ``D`` of
shape ``(kh*kw, d_mul, c_in)`` and a conventional operator ``W`` of shape
``(c_out, d_mul, c_in)``.  During training they are composed into a single
conventional kernel ``W'[o, t, c] = sum_m D[t, m, c] * W[o, m, c]`` which is
then applied as an ordinary convolution.  At inference time the composition
is computed once ("folded") and the layer becomes a plain convolution.

Spatial taps are indexed row-major: ``t = i * kw + j``.
"""
import math
from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch import Tensor

__all__ = [
    "ConvGeometry",
    "DOConvParams",
    "FoldedConvParams",
    "conventional_conv",
    "depthwise_conv",
    "compose_kernel",
    "doconv_forward",
    "init_doconv",
    "DOConv2d",
    "fold_module",
]


@dataclass(frozen=True)
class ConvGeometry:
    kernel_h: int
    kernel_w: int
    c_in: int
    c_out: int
    stride: int = 1
    padding: int = 0
    dilation: int = 1

    def __post_init__(self):
        for name in ("kernel_h", "kernel_w", "stride", "c_in", "c_out", "dilation"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.padding < 0:
            raise ValueError(f"padding must be >= 0, got {self.padding}")

    @property
    def taps(self) -> int:
        return self.kernel_h * self.kernel_w

    def output_size(self, h: int, w: int):
        eff_h = self.dilation * (self.kernel_h - 1) + 1
        eff_w = self.dilation * (self.kernel_w - 1) + 1
        return ((h + 2 * self.padding - eff_h) // self.stride + 1,
                (w + 2 * self.padding - eff_w) // self.stride + 1)


@dataclass
class DOConvParams:
    geometry: ConvGeometry
    D: Tensor
    W: Tensor
    bias: Optional[Tensor] = None

    @property
    def d_mul(self) -> int:
        return self.W.shape[1]

    def validate(self):
        g = self.geometry
        if self.d_mul < g.taps:
            raise ValueError(f"d_mul={self.d_mul} must be >= kernel_h*kernel_w={g.taps}")
        if tuple(self.D.shape) != (g.taps, self.d_mul, g.c_in):
            raise ValueError(f"D has shape {tuple(self.D.shape)}, expected {(g.taps, self.d_mul, g.c_in)}")
        if tuple(self.W.shape) != (g.c_out, self.d_mul, g.c_in):
            raise ValueError(f"W has shape {tuple(self.W.shape)}, expected {(g.c_out, self.d_mul, g.c_in)}")
        _check_bias(self.bias, g)
        return self


@dataclass
class FoldedConvParams:
    geometry: ConvGeometry
    W_folded: Tensor
    bias: Optional[Tensor] = None

    def validate(self):
        g = self.geometry
        if tuple(self.W_folded.shape) != (g.c_out, g.taps, g.c_in):
            raise ValueError(
                f"W_folded has shape {tuple(self.W_folded.shape)}, expected {(g.c_out, g.taps, g.c_in)}")
        _check_bias(self.bias, g)
        return self

    def torch_weight(self) -> Tensor:
        """Kernel in torch layout ``(c_out, c_in, kh, kw)``."""
        g = self.geometry
        return self.W_folded.permute(0, 2, 1).reshape(g.c_out, g.c_in, g.kernel_h, g.kernel_w)

    @classmethod
    def from_torch_weight(cls, weight: Tensor, geometry: ConvGeometry, bias=None):
        c_out, c_in, kh, kw = weight.shape
        w = weight.reshape(c_out, c_in, kh * kw).permute(0, 2, 1)
        return cls(geometry, w, bias).validate()


def _check_bias(bias, g: ConvGeometry):
    if bias is not None and tuple(bias.shape) != (g.c_out,):
        raise ValueError(f"bias has shape {tuple(bias.shape)}, expected ({g.c_out},)")


def _check_input(x: Tensor, g: ConvGeometry):
    if x.dim() != 4:
        raise ValueError(f"input must be rank 4 (batch, channels, height, width), got rank {x.dim()}")
    if x.shape[1] != g.c_in:
        raise ValueError(f"input channels: got {x.shape[1]}, expected c_in={g.c_in}")
    eff_h = g.dilation * (g.kernel_h - 1) + 1
    eff_w = g.dilation * (g.kernel_w - 1) + 1
    if x.shape[2] + 2 * g.padding < eff_h:
        raise ValueError(f"input height {x.shape[2]} (padding {g.padding}) smaller than kernel extent {eff_h}")
    if x.shape[3] + 2 * g.padding < eff_w:
        raise ValueError(f"input width {x.shape[3]} (padding {g.padding}) smaller than kernel extent {eff_w}")


def conventional_conv(kernel: FoldedConvParams, x: Tensor) -> Tensor:
    g = kernel.geometry
    _check_input(x, g)
    return F.conv2d(x, kernel.torch_weight(), kernel.bias, stride=g.stride,
                    padding=g.padding, dilation=g.dilation)


def depthwise_conv(D: Tensor, d_mul: int, geometry: ConvGeometry, x: Tensor) -> Tensor:
    """Per-channel convolution; output channel ``c * d_mul + m`` uses ``D[:, m, c]``."""
    if d_mul < 1:
        raise ValueError(f"d_mul must be >= 1, got {d_mul}")
    g = geometry
    if tuple(D.shape) != (g.taps, d_mul, g.c_in):
        raise ValueError(f"D has shape {tuple(D.shape)}, expected {(g.taps, d_mul, g.c_in)}")
    _check_input(x, g)
    weight = D.permute(2, 1, 0).reshape(g.c_in * d_mul, 1, g.kernel_h, g.kernel_w)
    return F.conv2d(x, weight, None, stride=g.stride, padding=g.padding,
                    dilation=g.dilation, groups=g.c_in)


def _compose(D: Tensor, W: Tensor) -> Tensor:
    # (taps, m, c) x (o, m, c) -> (o, taps, c)
    return torch.einsum("tmc,omc->otc", D, W)


def compose_kernel(params: DOConvParams) -> FoldedConvParams:
    params.validate()
    return FoldedConvParams(params.geometry, _compose(params.D, params.W), params.bias)


def doconv_forward(params: DOConvParams, x: Tensor) -> Tensor:
    return conventional_conv(compose_kernel(params), x)


def identity_depthwise(taps: int, d_mul: int, c_in: int, dtype=torch.float32) -> Tensor:
    D = torch.zeros(taps, d_mul, c_in, dtype=dtype)
    idx = torch.arange(taps)
    D[idx, idx, :] = 1.0
    return D


def _fan_in_uniform(shape, fan_in: int, generator=None, dtype=torch.float32) -> Tensor:
    # same bound as torch's default conv init (kaiming_uniform with a=sqrt(5))
    bound = 1.0 / math.sqrt(fan_in)
    return (torch.rand(shape, generator=generator, dtype=dtype) * 2 - 1) * bound


def init_doconv(geometry: ConvGeometry, d_mul: int, seed: int, bias: bool = True,
                dtype=torch.float32) -> DOConvParams:
    if d_mul < geometry.taps:
        raise ValueError(f"d_mul={d_mul} must be >= kernel_h*kernel_w={geometry.taps}")
    gen = torch.Generator().manual_seed(seed)
    g = geometry
    fan_in = g.c_in * g.taps
    W = _fan_in_uniform((g.c_out, d_mul, g.c_in), fan_in, gen, dtype)
    b = _fan_in_uniform((g.c_out,), fan_in, gen, dtype) if bias else None
    return DOConvParams(g, identity_depthwise(g.taps, d_mul, g.c_in, dtype), W, b).validate()


class DOConv2d(nn.Module):
    """Drop-in replacement for ``nn.Conv2d`` backed by a (D, W) pair.

    ``D`` starts as the identity embedding, so an untrained DO-Conv computes
    exactly the conventional convolution with kernel ``W``.
    """

    def __init__(self, in_channels, out_channels, kernel_size, stride=1, padding=0,
                 dilation=1, bias=True, d_mul=None):
        super().__init__()
        kh, kw = (kernel_size, kernel_size) if isinstance(kernel_size, int) else kernel_size
        self.geometry = ConvGeometry(kh, kw, in_channels, out_channels, stride, padding, dilation)
        taps = kh * kw
        self.d_mul = taps if d_mul is None else d_mul
        if self.d_mul < taps:
            raise ValueError(f"d_mul={self.d_mul} must be >= kernel_h*kernel_w={taps}")
        self.D = nn.Parameter(identity_depthwise(taps, self.d_mul, in_channels))
        self.W = nn.Parameter(torch.empty(out_channels, self.d_mul, in_channels))
        self.bias = nn.Parameter(torch.empty(out_channels)) if bias else None
        self.reset_parameters()

    @property
    def in_channels(self):
        return self.geometry.c_in

    @property
    def out_channels(self):
        return self.geometry.c_out

    def reset_parameters(self):
        fan_in = self.geometry.c_in * self.geometry.taps
        bound = 1.0 / math.sqrt(fan_in)
        with torch.no_grad():
            self.D.copy_(identity_depthwise(self.geometry.taps, self.d_mul, self.geometry.c_in))
            nn.init.uniform_(self.W, -bound, bound)
            if self.bias is not None:
                nn.init.uniform_(self.bias, -bound, bound)

    def params(self) -> DOConvParams:
        return DOConvParams(self.geometry, self.D, self.W, self.bias)

    def folded(self) -> FoldedConvParams:
        return compose_kernel(self.params())

    def forward(self, x):
        return doconv_forward(self.params(), x)

    def to_conv2d(self) -> nn.Conv2d:
        g = self.geometry
        conv = nn.Conv2d(g.c_in, g.c_out, (g.kernel_h, g.kernel_w), stride=g.stride,
                         padding=g.padding, dilation=g.dilation, bias=self.bias is not None)
        conv = conv.to(device=self.W.device, dtype=self.W.dtype)
        with torch.no_grad():
            conv.weight.copy_(self.folded().torch_weight())
            if self.bias is not None:
                conv.bias.copy_(self.bias)
        return conv

    def extra_repr(self):
        g = self.geometry
        return (f"{g.c_in}, {g.c_out}, kernel_size=({g.kernel_h}, {g.kernel_w}), stride={g.stride}, "
                f"padding={g.padding}, dilation={g.dilation}, d_mul={self.d_mul}, bias={self.bias is not None}")


def fold_module(module: nn.Module) -> nn.Module:
    """Replace every ``DOConv2d`` inside ``module`` (in place) with its folded ``nn.Conv2d``."""
    if isinstance(module, DOConv2d):
        return module.to_conv2d()
    for name, child in list(module.named_children()):
        folded = fold_module(child)
        if folded is not child:
            setattr(module, name, folded)
    return module

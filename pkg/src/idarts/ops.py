"""Candidate operations for 1d (signal) and 2d (image) cells."""

import torch
import torch.nn as nn
import torch.nn.functional as F

# Index order is part of the contract: argmax ties resolve to the lowest index.
PRIMITIVES = (
    "sep_conv_3",
    "sep_conv_5",
    "dil_conv_3",
    "dil_conv_5",
    "max_pool_3",
    "avg_pool_3",
    "identity",
    "zero",
)
ZERO_INDEX = PRIMITIVES.index("zero")
IDENTITY_INDEX = PRIMITIVES.index("identity")

_CONV = {1: nn.Conv1d, 2: nn.Conv2d}
_BN = {1: nn.BatchNorm1d, 2: nn.BatchNorm2d}
_MAXPOOL = {1: nn.MaxPool1d, 2: nn.MaxPool2d}
_AVGPOOL = {1: nn.AvgPool1d, 2: nn.AvgPool2d}


def _check_dim(dim):
    if dim not in (1, 2):
        raise ValueError(f"dim must be 1 or 2, got {dim}")


class ReLUConvBN(nn.Module):
    def __init__(self, C_in, C_out, kernel_size, stride, padding, dim=2, affine=True):
        super().__init__()
        _check_dim(dim)
        self.op = nn.Sequential(
            nn.ReLU(inplace=False),
            _CONV[dim](C_in, C_out, kernel_size, stride=stride, padding=padding, bias=False),
            _BN[dim](C_out, affine=affine),
        )

    def forward(self, x):
        return self.op(x)


class DilConv(nn.Module):
    """ReLU, depthwise dilated conv, pointwise conv, batch norm."""

    def __init__(self, C_in, C_out, kernel_size, stride, padding, dilation, dim=2, affine=True):
        super().__init__()
        _check_dim(dim)
        conv = _CONV[dim]
        self.op = nn.Sequential(
            nn.ReLU(inplace=False),
            conv(C_in, C_in, kernel_size, stride=stride, padding=padding,
                 dilation=dilation, groups=C_in, bias=False),
            conv(C_in, C_out, 1, bias=False),
            _BN[dim](C_out, affine=affine),
        )

    def forward(self, x):
        return self.op(x)


class SepConv(nn.Module):
    """Two stacked depthwise-separable convolutions; only the first strides."""

    def __init__(self, C_in, C_out, kernel_size, stride, padding, dim=2, affine=True):
        super().__init__()
        self.op = nn.Sequential(
            DilConv(C_in, C_in, kernel_size, stride, padding, 1, dim=dim, affine=affine),
            DilConv(C_in, C_out, kernel_size, 1, padding, 1, dim=dim, affine=affine),
        )

    def forward(self, x):
        return self.op(x)


class Identity(nn.Module):
    def forward(self, x):
        return x


class Zero(nn.Module):
    def __init__(self, stride, dim=2):
        super().__init__()
        self.stride = stride
        self.dim = dim

    def forward(self, x):
        if self.stride == 1:
            return x.mul(0.0)
        if self.dim == 1:
            return x[:, :, :: self.stride].mul(0.0)
        return x[:, :, :: self.stride, :: self.stride].mul(0.0)


class FactorizedReduce(nn.Module):
    """Stride-2 projection built from two offset 1x1 convolutions.

    The shifted branch is zero-padded so both branches keep the same spatial
    size, which also makes degenerate height-1 inputs work.
    """

    def __init__(self, C_in, C_out, dim=2, affine=True):
        super().__init__()
        if C_out % 2:
            raise ValueError("FactorizedReduce needs an even output channel count")
        conv = _CONV[dim]
        self.dim = dim
        self.relu = nn.ReLU(inplace=False)
        self.conv_1 = conv(C_in, C_out // 2, 1, stride=2, bias=False)
        self.conv_2 = conv(C_in, C_out // 2, 1, stride=2, bias=False)
        self.bn = _BN[dim](C_out, affine=affine)

    def forward(self, x):
        x = self.relu(x)
        if self.dim == 1:
            shifted = F.pad(x, (0, 1))[:, :, 1:]
        else:
            shifted = F.pad(x, (0, 1, 0, 1))[:, :, 1:, 1:]
        out = torch.cat([self.conv_1(x), self.conv_2(shifted)], dim=1)
        return self.bn(out)


def make_op(kind, C, stride, dim=2, affine=False):
    """Build candidate operation ``kind`` mapping C channels to C channels."""
    _check_dim(dim)
    if kind == "sep_conv_3":
        return SepConv(C, C, 3, stride, 1, dim=dim, affine=affine)
    if kind == "sep_conv_5":
        return SepConv(C, C, 5, stride, 2, dim=dim, affine=affine)
    if kind == "dil_conv_3":
        return DilConv(C, C, 3, stride, 2, 2, dim=dim, affine=affine)
    if kind == "dil_conv_5":
        return DilConv(C, C, 5, stride, 4, 2, dim=dim, affine=affine)
    if kind == "max_pool_3":
        return _MAXPOOL[dim](3, stride=stride, padding=1)
    if kind == "avg_pool_3":
        return _AVGPOOL[dim](3, stride=stride, padding=1, count_include_pad=False)
    if kind == "identity":
        return Identity() if stride == 1 else FactorizedReduce(C, C, dim=dim, affine=affine)
    if kind == "zero":
        return Zero(stride, dim=dim)
    raise ValueError(f"unknown operation {kind!r}; expected one of {PRIMITIVES}")

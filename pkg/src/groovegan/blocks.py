"""Shared 1-D convolution building blocks for the torch networks."""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F


class PaddedConv1d(nn.Module):
    """Conv1d with length-preserving asymmetric padding.

    Pads ``kernel_eff - stride`` samples in total (extra sample on the left
    for odd amounts), so an input of length ``L`` yields ``floor(L / stride)``
    output positions. Inputs shorter than one window are right-padded just
    enough to emit a single output position, so downstream window-scoring
    layers always see at least one window.
    """

    def __init__(self, in_channels, out_channels, kernel_size,
                 stride: int = 1, dilation: int = 1):
        super().__init__()
        self.stride = stride
        self.kernel_eff = (kernel_size - 1) * dilation + 1
        total = max(self.kernel_eff - stride, 0)
        self.pad_left = total - total // 2
        self.pad_right = total // 2
        self.conv = nn.Conv1d(in_channels, out_channels, kernel_size,
                              stride=stride, dilation=dilation)

    def forward(self, x):
        right = self.pad_right
        short = self.kernel_eff - (x.shape[-1] + self.pad_left + right)
        if short > 0:
            right += short
        return self.conv(F.pad(x, (self.pad_left, right)))


class GroupedStridedConv1d(PaddedConv1d):
    """PaddedConv1d with channel groups (discriminator downsampling layers)."""

    def __init__(self, in_channels, out_channels, kernel_size, stride, groups):
        super().__init__(in_channels, out_channels, kernel_size, stride=stride)
        self.conv = nn.Conv1d(in_channels, out_channels, kernel_size,
                              stride=stride, groups=groups)


class ResidualStack(nn.Module):
    """Three residual blocks with dilations 1, 3, 9.

    Each block is LeakyReLU -> dilated 3-tap conv -> LeakyReLU -> 1-tap conv,
    added to its input.
    """

    def __init__(self, channels, dilations=(1, 3, 9), leak: float = 0.2):
        super().__init__()
        self.blocks = nn.ModuleList(
            nn.Sequential(
                nn.LeakyReLU(leak),
                PaddedConv1d(channels, channels, 3, dilation=d),
                nn.LeakyReLU(leak),
                nn.Conv1d(channels, channels, 1),
            )
            for d in dilations
        )

    def forward(self, x):
        for block in self.blocks:
            x = x + block(x)
        return x


def scaled(channels: int, divisor: int) -> int:
    """Scale a table channel width down for small configurations."""
    return max(1, channels // divisor)

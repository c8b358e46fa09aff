"""Music-from-motion generator and multi-scale window discriminators.

The generator has three stages: a motion encoder and a visual encoder run at
their native frame rates, their outputs are nearest-neighbour resampled to a
shared length and concatenated, and a strided convolutional trunk maps the
fused sequence down (by its two stride-2 layers) to the target feature
length, ending in a tanh scaled by ``sigma``. Discriminators score the
generated feature sequences — flattened time-major to one channel — at
multiple time scales, one score per window position.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .blocks import GroupedStridedConv1d, PaddedConv1d, ResidualStack, scaled
from .errors import ConfigError, DataError

LEVELS = ("high", "low")

# Downsampling trunk per level: (kernel, stride, channels) rows, each
# followed by a residual stack; tail rows are (kernel, stride, channels,
# leaky_after) without residual stacks. The final tail row feeds the tanh.
VQ_GENERATOR_TABLES = {
    "high": {
        "stages": [(6, 2, 32), (41, 2, 64), (41, 1, 128), (41, 1, 256), (41, 1, 512)],
        "tail": [(40, 1, 64, False)],
    },
    "low": {
        "stages": [(6, 2, 32), (4, 1, 64), (40, 2, 128), (40, 1, 256),
                   (40, 1, 512), (40, 1, 1024)],
        "tail": [(40, 1, 1024, True), (40, 1, 64, True)],
    },
}

# Input length must be this multiple of the target length (the stride-2 rows).
GENERATOR_DOWNSAMPLE = 4

# Keep the scaled tanh *strictly* inside (-sigma, sigma): float32 tanh
# saturates to exactly +-1.0 for large inputs, which would touch the bound.
TANH_MARGIN = 1e-6


@dataclass(frozen=True)
class GeneratorConfig:
    """Shape and ablation settings for the composite generator."""

    level: str = "high"
    embed_dim: int = 64
    motion_channels: int = 34
    visual_channels: int = 1024
    sigma: float = 100.0
    width_divisor: int = 1
    no_motion: bool = False
    no_visual: bool = False

    def __post_init__(self):
        if self.level not in LEVELS:
            raise ConfigError(f"level must be one of {LEVELS}, got {self.level!r}")
        if self.no_motion and self.no_visual:
            raise ConfigError("cannot drop both the motion and the visual stream")
        if self.sigma <= 0:
            raise ConfigError(f"sigma must be positive, got {self.sigma}")
        if self.width_divisor < 1:
            raise ConfigError("width_divisor must be >= 1")
        if min(self.embed_dim, self.motion_channels, self.visual_channels) < 1:
            raise ConfigError("channel counts must be positive")


def _conv_bn_act(in_ch, out_ch, kernel, stride=1, leak=0.2):
    return [PaddedConv1d(in_ch, out_ch, kernel, stride=stride),
            nn.BatchNorm1d(out_ch), nn.LeakyReLU(leak)]


class MotionEncoder(nn.Module):
    """Stride-1 conv/residual tower over motion channels.

    ``forward`` returns ``(features, activity)``: the 1024-channel (scaled)
    feature map consumed by fusion, and the single-channel activity head.
    """

    def __init__(self, in_channels: int, width_divisor: int = 1):
        super().__init__()
        w = width_divisor
        trunk = []
        trunk += _conv_bn_act(in_channels, scaled(256, w), 6)
        trunk += [ResidualStack(scaled(256, w))]
        trunk += _conv_bn_act(scaled(256, w), scaled(512, w), 3)
        trunk += [ResidualStack(scaled(512, w))]
        trunk += _conv_bn_act(scaled(512, w), scaled(1024, w), 3)
        trunk += [ResidualStack(scaled(1024, w))]
        trunk += _conv_bn_act(scaled(1024, w), scaled(1024, w), 3)
        self.trunk = nn.Sequential(*trunk)
        self.activity_head = PaddedConv1d(scaled(1024, w), 1, 4)
        self.out_channels = scaled(1024, w)

    def forward(self, x):
        features = self.trunk(x)
        return features, self.activity_head(features)


class VisualEncoder(nn.Module):
    """Two stride-1 convs squeezing visual features to a compact stream."""

    def __init__(self, in_channels: int, width_divisor: int = 1):
        super().__init__()
        w = width_divisor
        self.net = nn.Sequential(
            *_conv_bn_act(in_channels, scaled(512, w), 3),
            *_conv_bn_act(scaled(512, w), scaled(256, w), 3),
        )
        self.out_channels = scaled(256, w)

    def forward(self, x):
        return self.net(x)


class VqGenerator(nn.Module):
    """Fused features -> bounded feature sequence, per the level's table."""

    def __init__(self, in_channels: int, config: GeneratorConfig):
        super().__init__()
        table = VQ_GENERATOR_TABLES[config.level]
        w = config.width_divisor
        layers = []
        prev = in_channels
        for kernel, stride, channels in table["stages"]:
            ch = scaled(channels, w)
            layers += _conv_bn_act(prev, ch, kernel, stride=stride)
            layers += [ResidualStack(ch)]
            prev = ch
        for i, (kernel, stride, channels, leaky_after) in enumerate(table["tail"]):
            last = i == len(table["tail"]) - 1
            ch = config.embed_dim if last else scaled(channels, w)
            layers += [PaddedConv1d(prev, ch, kernel, stride=stride)]
            if not last:
                layers += [nn.BatchNorm1d(ch)]
            if leaky_after:
                layers += [nn.LeakyReLU(0.2)]
            prev = ch
        self.net = nn.Sequential(*layers)
        self.sigma = config.sigma

    def forward(self, fused):
        bounded = torch.tanh(self.net(fused))
        bounded = torch.clamp(bounded, -1.0 + TANH_MARGIN, 1.0 - TANH_MARGIN)
        return self.sigma * bounded


def resample_nearest(stream: torch.Tensor, length: int) -> torch.Tensor:
    """Nearest-neighbour time resampling: index map i(j) = floor(j*T/len)."""
    if length < 1:
        raise DataError(f"target length must be positive, got {length}")
    source = stream.shape[-1]
    idx = torch.div(torch.arange(length, device=stream.device) * source,
                    length, rounding_mode="floor")
    return stream.index_select(-1, idx)


class MusicGenerator(nn.Module):
    """Composite generator: encode both streams, fuse, generate features."""

    def __init__(self, config: GeneratorConfig):
        super().__init__()
        self.config = config
        self.motion_encoder = MotionEncoder(config.motion_channels, config.width_divisor)
        self.visual_encoder = VisualEncoder(config.visual_channels, config.width_divisor)
        fused_channels = self.motion_encoder.out_channels + self.visual_encoder.out_channels
        self.vq_generator = VqGenerator(fused_channels, config)

    def fuse(self, motion_features, visual_features, length: int):
        """Resample both streams to ``length`` and concatenate channels.

        A stream disabled by configuration is replaced by zeros, leaving the
        other pathway untouched.
        """
        motion_r = resample_nearest(motion_features, length)
        visual_r = resample_nearest(visual_features, length)
        if self.config.no_motion:
            motion_r = torch.zeros_like(motion_r)
        if self.config.no_visual:
            visual_r = torch.zeros_like(visual_r)
        return torch.cat([motion_r, visual_r], dim=1)

    def forward(self, motion, visual, target_frames: int):
        if motion.shape[1] != self.config.motion_channels:
            raise DataError(
                f"motion has {motion.shape[1]} channels, expected "
                f"{self.config.motion_channels}"
            )
        if visual.shape[1] != self.config.visual_channels:
            raise DataError(
                f"visual features have {visual.shape[1]} channels, expected "
                f"{self.config.visual_channels}"
            )
        if target_frames < 1:
            raise DataError(f"target_frames must be positive, got {target_frames}")
        motion_features, _ = self.motion_encoder(motion)
        visual_features = self.visual_encoder(visual)
        fused = self.fuse(motion_features, visual_features,
                          GENERATOR_DOWNSAMPLE * target_frames)
        out = self.vq_generator(fused)
        if out.shape[-1] != target_frames:
            raise DataError(
                f"generator produced {out.shape[-1]} frames for target "
                f"{target_frames}; stride plan is inconsistent"
            )
        return out


# ---------------------------------------------------------------------------
# Discriminators
# ---------------------------------------------------------------------------


def reshape_for_discriminator(features: torch.Tensor) -> torch.Tensor:
    """Flatten ``[B, D, T]`` time-major into ``[B, 1, D*T]``.

    Output position ``D*t + d`` holds ``features[:, d, t]``; invertible by
    :func:`inverse_reshape`.
    """
    b, d, t = features.shape
    return features.transpose(1, 2).reshape(b, 1, d * t)


def inverse_reshape(flat: torch.Tensor, dim: int) -> torch.Tensor:
    """Invert :func:`reshape_for_discriminator` given the channel count."""
    b, one, n = flat.shape
    if one != 1 or n % dim:
        raise DataError(f"cannot reshape length {n} into {dim} channels")
    return flat.reshape(b, n // dim, dim).transpose(1, 2)


class WindowDiscriminator(nn.Module):
    """One block: grouped strided convs emitting per-window realness scores.

    ``forward`` returns ``(features, score)`` where ``features`` lists the
    six intermediate activation maps used for feature matching.
    """

    def __init__(self, in_channels: int = 1, width_divisor: int = 1, leak: float = 0.2):
        super().__init__()
        w = width_divisor
        chs = [scaled(c, w) for c in (16, 64, 256, 1024, 1024)]
        layers = [nn.Sequential(PaddedConv1d(in_channels, chs[0], 15), nn.LeakyReLU(leak))]
        prev = chs[0]
        for ch in chs[1:]:
            groups = max(1, prev // 4)
            layers.append(nn.Sequential(
                GroupedStridedConv1d(prev, ch, 41, stride=4, groups=groups),
                nn.LeakyReLU(leak),
            ))
            prev = ch
        layers.append(nn.Sequential(PaddedConv1d(prev, prev, 5), nn.LeakyReLU(leak)))
        self.layers = nn.ModuleList(layers)
        self.score = PaddedConv1d(prev, 1, 3)

    def forward(self, x):
        features = []
        for layer in self.layers:
            x = layer(x)
            features.append(x)
        return features, self.score(x)


class DiscriminatorSet(nn.Module):
    """The same block applied at successively average-pooled time scales."""

    def __init__(self, in_channels: int = 1, n_scales: int = 3, width_divisor: int = 1):
        super().__init__()
        if n_scales < 1:
            raise ConfigError(f"need at least one scale, got {n_scales}")
        self.blocks = nn.ModuleList(
            WindowDiscriminator(in_channels, width_divisor) for _ in range(n_scales)
        )
        self.pool = nn.AvgPool1d(4, stride=2, padding=1, count_include_pad=False)

    def forward(self, x):
        """Score an input at every scale: list of ``(features, score)``."""
        coarsest = x.shape[-1] // (2 ** (len(self.blocks) - 1))
        if coarsest < 4:
            raise DataError(
                f"sequence length {x.shape[-1]} is too short for the "
                f"coarsest of {len(self.blocks)} scales"
            )
        outputs = []
        for i, block in enumerate(self.blocks):
            if i:
                x = self.pool(x)
            outputs.append(block(x))
        return outputs

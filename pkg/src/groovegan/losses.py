"""Training objectives: hinge adversarial losses, feature matching, and
feature/waveform/mel reconstruction terms, plus their weighted combination.

Score and feature arguments arrive as lists with one entry per discriminator
scale, matching what :class:`~groovegan.model.DiscriminatorSet` returns.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .audio import MelConfig, hann_window, mel_filterbank
from .errors import DataError


@dataclass(frozen=True)
class LossWeights:
    """Term weights for the total generator objective."""

    adversarial: float = 1.0
    feature_matching: float = 3.0
    code: float = 15.0
    waveform: float = 40.0
    mel: float = 15.0


def hinge_d_loss(real_scores, fake_scores):
    """Discriminator hinge loss summed over scales.

    Zero exactly when every real score is >= 1 and every fake score is <= -1.
    """
    total = None
    for real, fake in zip(real_scores, fake_scores, strict=True):
        term = F.relu(1.0 - real).mean() + F.relu(1.0 + fake).mean()
        total = term if total is None else total + term
    if total is None:
        raise DataError("need scores from at least one scale")
    return total


def hinge_g_loss(fake_scores):
    """Generator hinge loss: negated mean fake score, summed over scales."""
    total = None
    for fake in fake_scores:
        term = -fake.mean()
        total = term if total is None else total + term
    if total is None:
        raise DataError("need scores from at least one scale")
    return total


def feature_matching_loss(real_features, fake_features):
    """Mean absolute difference of discriminator activations.

    Each layer contributes its element-count-normalized L1 (averaged over the
    batch), summed over layers and scales; a layer differing by a constant c
    everywhere contributes exactly c.
    """
    total = None
    for real_scale, fake_scale in zip(real_features, fake_features, strict=True):
        for real, fake in zip(real_scale, fake_scale, strict=True):
            if real.shape != fake.shape:
                raise DataError(
                    f"feature shapes differ: {tuple(real.shape)} vs {tuple(fake.shape)}"
                )
            term = (real - fake).abs().mean()
            total = term if total is None else total + term
    if total is None:
        raise DataError("need features from at least one scale")
    return total


def commitment_l1(generated, quantized_target):
    """Mean absolute pull of generated features toward the looked-up codes."""
    if generated.shape != quantized_target.shape:
        raise DataError(
            f"generated {tuple(generated.shape)} and target "
            f"{tuple(quantized_target.shape)} shapes differ"
        )
    return (generated - quantized_target).abs().mean()


def waveform_l1(real, synthesized):
    """Mean absolute sample difference between two aligned waveform batches."""
    if real.shape != synthesized.shape:
        raise DataError(
            f"waveform shapes differ: {tuple(real.shape)} vs {tuple(synthesized.shape)}"
        )
    return (real - synthesized).abs().mean()


class MelAnalyzer(nn.Module):
    """Differentiable mel analysis, numerically equal to the numpy pipeline.

    Computation runs in float64 internally so that values agree with
    :func:`groovegan.audio.mel_spectrogram` to well under 1e-6; gradients
    flow back to the input's own dtype.
    """

    def __init__(self, sample_rate: int, config: MelConfig | None = None):
        super().__init__()
        cfg = config or MelConfig()
        self.n_fft, self.hop = cfg.n_fft, cfg.hop
        fb = mel_filterbank(sample_rate, cfg.n_fft, cfg.n_mels, cfg.fmin, cfg.fmax)
        self.register_buffer("filterbank", torch.from_numpy(fb))
        self.register_buffer("window", torch.from_numpy(hann_window(cfg.n_fft)))

    def forward(self, wav: torch.Tensor) -> torch.Tensor:
        """Log-compressed mel magnitudes: ``[B, n] -> [B, n_mels, frames]``."""
        x = wav.to(torch.float64)
        if x.dim() == 1:
            x = x[None]
        if x.shape[-1] < self.n_fft:
            raise DataError(f"need at least {self.n_fft} samples, got {x.shape[-1]}")
        pad = self.n_fft // 2
        frames = F.pad(x, (pad, pad)).unfold(-1, self.n_fft, self.hop) * self.window
        magnitudes = torch.abs(torch.fft.rfft(frames, dim=-1))
        return torch.log1p(torch.einsum("mf,btf->bmt", self.filterbank, magnitudes))


def mel_l1(analyzer: MelAnalyzer, real, synthesized):
    """Mean absolute difference of the two waveforms' mel frames."""
    return (analyzer(real) - analyzer(synthesized)).abs().mean()


def _scalar(value) -> float:
    return float(value.detach()) if torch.is_tensor(value) else float(value)


def combine(weights: LossWeights, adversarial, feature_matching, code, waveform, mel):
    """Weighted total plus a per-term breakdown for logging.

    Terms may be tensors or plain zeros (for disabled pathways); the total
    preserves tensor-ness for backprop. The logged ``total`` is recomputed
    in float64 from the logged scalar terms, so auditors can reproduce it
    bit-for-bit from the log alone.
    """
    total = (
        weights.adversarial * adversarial
        + weights.feature_matching * feature_matching
        + weights.code * code
        + weights.waveform * waveform
        + weights.mel * mel
    )
    breakdown = {
        "adversarial": _scalar(adversarial),
        "feature_matching": _scalar(feature_matching),
        "code": _scalar(code),
        "waveform": _scalar(waveform),
        "mel": _scalar(mel),
    }
    breakdown["total"] = (
        weights.adversarial * breakdown["adversarial"]
        + weights.feature_matching * breakdown["feature_matching"]
        + weights.code * breakdown["code"]
        + weights.waveform * breakdown["waveform"]
        + weights.mel * breakdown["mel"]
    )
    return total, breakdown

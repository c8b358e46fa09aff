"""Learned vector-quantized audio codec.

A strided convolutional encoder maps waveforms to continuous feature
sequences (one column per ``hop`` samples), a codebook quantizes columns to
their nearest entries, and a mirrored transposed-convolution decoder
synthesizes audio back from feature sequences. The codebook is learned with
exponential-moving-average updates plus a dead-entry reset; the encoder and
codebook are frozen once pretraining ends.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
import torch
import torch.nn as nn
from scipy.cluster.vq import kmeans2

from . import archive
from .audio import Waveform
from .blocks import PaddedConv1d, ResidualStack
from .errors import ConfigError, DataError, NumericsError

LEVELS = ("high", "low")


# ---------------------------------------------------------------------------
# Configuration and data types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CodecConfig:
    """Settings for one codec level.

    ``strides`` multiply to the hop: one feature column summarizes that many
    samples. ``channels`` lists the channel width after the input lift plus
    one width per strided stage.
    """

    level: str = "high"
    sample_rate: int = 22050
    strides: tuple = (4, 4, 8)
    channels: tuple = (32, 64, 128, 256)
    embed_dim: int = 64
    codebook_size: int = 512
    commitment_weight: float = 0.25
    ema_decay: float = 0.99
    dead_code_steps: int = 200

    def __post_init__(self):
        if self.level not in LEVELS:
            raise ConfigError(f"level must be one of {LEVELS}, got {self.level!r}")
        if len(self.channels) != len(self.strides) + 1:
            raise ConfigError("channels must list the lift width plus one width per stride")
        if any(s < 2 or s % 2 for s in self.strides):
            raise ConfigError(f"strides must be even and >= 2, got {self.strides}")
        if self.codebook_size < 2:
            raise ConfigError("codebook needs at least 2 entries")
        if self.embed_dim < 1 or self.sample_rate <= 0:
            raise ConfigError("embed_dim and sample_rate must be positive")

    @property
    def hop(self) -> int:
        return math.prod(self.strides)

    @classmethod
    def for_level(cls, level: str, **overrides) -> "CodecConfig":
        """Default stride plans: hop 128 for "high", hop 32 for "low"."""
        if level == "high":
            base = cls(level="high", strides=(4, 4, 8), channels=(32, 64, 128, 256))
        elif level == "low":
            base = cls(level="low", strides=(4, 8), channels=(32, 64, 128))
        else:
            raise ConfigError(f"level must be one of {LEVELS}, got {level!r}")
        return replace(base, **overrides) if overrides else base


@dataclass
class Codebook:
    """Quantization table: ``entries[k]`` is the D-dim vector for code k."""

    entries: np.ndarray

    def __post_init__(self):
        self.entries = np.asarray(self.entries)
        if self.entries.ndim != 2 or self.entries.shape[0] < 2:
            raise DataError(f"codebook must be [K >= 2, D], got shape {self.entries.shape}")
        if not np.all(np.isfinite(self.entries)):
            raise DataError("codebook entries must be finite")

    @property
    def size(self) -> int:
        return self.entries.shape[0]

    @property
    def dim(self) -> int:
        return self.entries.shape[1]


@dataclass
class VQSequence:
    """A feature sequence ``[embed_dim, frames]`` at one codec level."""

    features: np.ndarray
    level: str

    def __post_init__(self):
        self.features = np.asarray(self.features)
        if self.features.ndim != 2:
            raise DataError(f"VQ features must be 2-D, got shape {self.features.shape}")
        if self.level not in LEVELS:
            raise DataError(f"level must be one of {LEVELS}, got {self.level!r}")
        if not np.all(np.isfinite(self.features)):
            raise DataError("VQ features must be finite")

    @property
    def frames(self) -> int:
        return self.features.shape[1]


def quantize_features(features: np.ndarray, entries: np.ndarray):
    """Nearest codebook entry per column; ties resolve to the lowest index.

    Returns ``(indices [T], quantized [D, T])``.
    """
    features = np.asarray(features)
    entries = np.asarray(entries)
    if features.shape[0] != entries.shape[1]:
        raise DataError(
            f"feature dimension {features.shape[0]} does not match "
            f"codebook entry dimension {entries.shape[1]}"
        )
    x = features.T
    distances = (
        (x**2).sum(axis=1, keepdims=True)
        + (entries**2).sum(axis=1)[None, :]
        - 2.0 * x @ entries.T
    )
    indices = np.argmin(distances, axis=1)
    return indices.astype(np.int64), entries[indices].T.astype(features.dtype, copy=False)


# ---------------------------------------------------------------------------
# Torch modules
# ---------------------------------------------------------------------------


class CodecEncoder(nn.Module):
    def __init__(self, cfg: CodecConfig):
        super().__init__()
        ch = cfg.channels
        layers = [PaddedConv1d(1, ch[0], 7)]
        for i, stride in enumerate(cfg.strides):
            layers += [
                nn.LeakyReLU(0.2),
                PaddedConv1d(ch[i], ch[i + 1], 2 * stride, stride=stride),
                ResidualStack(ch[i + 1]),
            ]
        layers += [nn.LeakyReLU(0.2), PaddedConv1d(ch[-1], cfg.embed_dim, 3)]
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        return self.net(x)


class CodecDecoder(nn.Module):
    def __init__(self, cfg: CodecConfig):
        super().__init__()
        ch = cfg.channels
        layers = [PaddedConv1d(cfg.embed_dim, ch[-1], 3)]
        for i in reversed(range(len(cfg.strides))):
            stride = cfg.strides[i]
            layers += [
                nn.LeakyReLU(0.2),
                nn.ConvTranspose1d(ch[i + 1], ch[i], 2 * stride,
                                   stride=stride, padding=stride // 2),
                ResidualStack(ch[i]),
            ]
        layers += [nn.LeakyReLU(0.2), PaddedConv1d(ch[0], 1, 7), nn.Tanh()]
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        return self.net(x)


class VectorQuantizer(nn.Module):
    """EMA-updated codebook with straight-through gradients.

    ``forward`` returns ``(quantized, commitment, indices)`` where
    ``quantized`` carries the encoder's gradient (straight-through) and
    ``commitment`` is the mean squared pull of features toward their chosen
    entries. In training mode the codebook follows cluster EMA statistics,
    and entries unused for ``dead_code_steps`` consecutive steps are reseeded
    from the current batch.
    """

    def __init__(self, cfg: CodecConfig):
        super().__init__()
        self.decay = cfg.ema_decay
        self.dead_code_steps = cfg.dead_code_steps
        self.eps = 1e-5
        embed = torch.randn(cfg.codebook_size, cfg.embed_dim) * 0.5
        self.register_buffer("embedding", embed)
        self.register_buffer("ema_cluster_size", torch.zeros(cfg.codebook_size))
        self.register_buffer("ema_embed_sum", embed.clone())
        self.register_buffer("steps_unused", torch.zeros(cfg.codebook_size, dtype=torch.long))
        self.generator: torch.Generator | None = None

    def forward(self, features):
        batch, dim, frames = features.shape
        flat = features.permute(0, 2, 1).reshape(-1, dim)
        distances = (
            flat.pow(2).sum(1, keepdim=True)
            + self.embedding.pow(2).sum(1)[None, :]
            - 2.0 * flat @ self.embedding.t()
        )
        indices = distances.argmin(dim=1)
        quantized = self.embedding[indices].reshape(batch, frames, dim).permute(0, 2, 1)
        commitment = (features - quantized.detach()).pow(2).mean()
        if self.training:
            self._update(flat.detach(), indices)
        quantized = features + (quantized - features).detach()
        return quantized, commitment, indices.reshape(batch, frames)

    def seed_entries(self, features, seed: int = 0) -> None:
        """Initialize the codebook from observed feature columns.

        Clusters the columns of ``features`` ([B, D, T]) so every entry
        starts inside the data distribution instead of at a random point no
        column ever selects. With fewer columns than entries, columns are
        recycled. Resets the usage statistics.
        """
        dim = features.shape[1]
        data = (features.detach().permute(0, 2, 1).reshape(-1, dim)
                .cpu().numpy().astype(np.float64))
        k = self.embedding.shape[0]
        if data.shape[0] >= k:
            centers, _ = kmeans2(data, k, minit="++", seed=seed)
        else:
            centers = data[np.resize(np.arange(data.shape[0]), k)]
        entries = torch.from_numpy(np.ascontiguousarray(centers)).to(self.embedding)
        self.embedding.copy_(entries)
        self.ema_embed_sum.copy_(entries)
        self.ema_cluster_size.fill_(1.0)
        self.steps_unused.zero_()

    def _update(self, flat, indices):
        k = self.embedding.shape[0]
        onehot = torch.zeros(flat.shape[0], k, dtype=flat.dtype, device=flat.device)
        onehot.scatter_(1, indices[:, None], 1.0)
        counts = onehot.sum(0)
        sums = onehot.t() @ flat
        self.ema_cluster_size.mul_(self.decay).add_(counts, alpha=1 - self.decay)
        self.ema_embed_sum.mul_(self.decay).add_(sums, alpha=1 - self.decay)
        total = self.ema_cluster_size.sum()
        smoothed = (self.ema_cluster_size + self.eps) / (total + k * self.eps) * total
        self.embedding.copy_(self.ema_embed_sum / smoothed[:, None])

        used = counts > 0
        self.steps_unused[used] = 0
        self.steps_unused[~used] += 1
        dead = self.steps_unused >= self.dead_code_steps
        n_dead = int(dead.sum())
        if n_dead:
            gen = self.generator
            pick = torch.randint(0, flat.shape[0], (n_dead,), generator=gen,
                                 device=flat.device)
            seeds = flat[pick]
            self.embedding[dead] = seeds
            self.ema_embed_sum[dead] = seeds
            self.ema_cluster_size[dead] = 1.0
            self.steps_unused[dead] = 0


# ---------------------------------------------------------------------------
# Public codec wrapper
# ---------------------------------------------------------------------------


class CodecLevel:
    """One trained (or training) codec level plus its public operations."""

    def __init__(self, config: CodecConfig, encoder=None, decoder=None, quantizer=None):
        self.config = config
        self.encoder = encoder if encoder is not None else CodecEncoder(config)
        self.decoder = decoder if decoder is not None else CodecDecoder(config)
        self.quantizer = quantizer if quantizer is not None else VectorQuantizer(config)

    # -- numpy-facing operations ------------------------------------------

    def encode(self, wave: Waveform) -> VQSequence:
        """Continuous features of a waveform, shape ``[D, floor(n / hop)]``.

        The trailing partial hop (if any) is dropped. Deterministic: modules
        run in eval mode without gradients.
        """
        if wave.sample_rate != self.config.sample_rate:
            raise DataError(
                f"waveform rate {wave.sample_rate} does not match codec rate "
                f"{self.config.sample_rate}; resample first"
            )
        hop = self.config.hop
        if len(wave) < hop:
            raise DataError(f"need at least {hop} samples to encode, got {len(wave)}")
        frames = len(wave) // hop
        x = torch.from_numpy(np.ascontiguousarray(wave.samples[: frames * hop], dtype=np.float32))
        self.encoder.eval()
        with torch.no_grad():
            features = self.encoder(x[None, None, :])[0]
        return VQSequence(features.numpy(), self.config.level)

    def quantize(self, seq: VQSequence):
        """Nearest-entry lookup: ``(indices, quantized VQSequence)``."""
        entries = self.quantizer.embedding.detach().cpu().numpy()
        indices, quantized = quantize_features(seq.features, entries)
        return indices, VQSequence(quantized, seq.level)

    def decode(self, seq: VQSequence) -> Waveform:
        """Synthesize audio from features, length ``frames * hop``."""
        if seq.features.shape[0] != self.config.embed_dim:
            raise DataError(
                f"feature dimension {seq.features.shape[0]} does not match "
                f"codec embed_dim {self.config.embed_dim}"
            )
        x = torch.from_numpy(np.ascontiguousarray(seq.features, dtype=np.float32))
        self.decoder.eval()
        with torch.no_grad():
            out = self.decoder(x[None, :, :])[0, 0]
        return Waveform(out.numpy(), self.config.sample_rate)

    @property
    def codebook(self) -> Codebook:
        return Codebook(self.quantizer.embedding.detach().cpu().numpy().copy())

    # -- torch-facing helpers ----------------------------------------------

    def modules(self):
        return {"encoder": self.encoder, "decoder": self.decoder, "quantizer": self.quantizer}

    def train_mode(self, flag: bool = True):
        for module in self.modules().values():
            module.train(flag)
        return self

    def freeze(self, decoder_too: bool = True):
        """Disable gradients (encoder/codebook always; decoder optionally)."""
        self.encoder.requires_grad_(False)
        self.quantizer.requires_grad_(False)
        if decoder_too:
            self.decoder.requires_grad_(False)
        return self

    # -- persistence ---------------------------------------------------------

    def save(self, path) -> None:
        arrays = {}
        for prefix, module in self.modules().items():
            for name, value in module.state_dict().items():
                arrays[f"{prefix}.{name}"] = value.detach().cpu().numpy()
        metadata = {
            "kind": "codec",
            "config": {
                "level": self.config.level,
                "sample_rate": self.config.sample_rate,
                "strides": list(self.config.strides),
                "channels": list(self.config.channels),
                "embed_dim": self.config.embed_dim,
                "codebook_size": self.config.codebook_size,
                "commitment_weight": self.config.commitment_weight,
                "ema_decay": self.config.ema_decay,
                "dead_code_steps": self.config.dead_code_steps,
            },
        }
        archive.save_archive(path, arrays, metadata)

    @classmethod
    def load(cls, path) -> "CodecLevel":
        arrays, metadata = archive.load_archive(path)
        if metadata.get("kind") != "codec":
            raise NumericsError(f"{path} is not a codec checkpoint")
        raw = dict(metadata["config"])
        raw["strides"] = tuple(raw["strides"])
        raw["channels"] = tuple(raw["channels"])
        config = CodecConfig(**raw)
        codec = cls(config)
        for prefix, module in codec.modules().items():
            state = {
                name[len(prefix) + 1:]: torch.from_numpy(value.copy())
                for name, value in arrays.items()
                if name.startswith(prefix + ".")
            }
            module.load_state_dict(state)
        return codec


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


def _sample_crops(clips, lengths, batch_size, crop, rng):
    """Stack ``batch_size`` random fixed-length crops as a [B, 1, crop] tensor."""
    out = np.empty((batch_size, 1, crop), dtype=np.float32)
    for b in range(batch_size):
        i = int(rng.integers(len(clips)))
        start = int(rng.integers(lengths[i] - crop + 1))
        out[b, 0] = clips[i].samples[start : start + crop]
    return torch.from_numpy(out)


def _check_clips(clips, config, crop):
    if not clips:
        raise DataError("need at least one training clip")
    for clip in clips:
        if clip.sample_rate != config.sample_rate:
            raise DataError(
                f"clip rate {clip.sample_rate} does not match codec rate "
                f"{config.sample_rate}"
            )
        if len(clip) < crop:
            raise DataError(f"clips must have at least {crop} samples, got {len(clip)}")


def pretrain_codec(clips, config: CodecConfig, steps: int = 500,
                   batch_size: int = 8, crop_samples: int = 8192,
                   lr: float = 1e-3, seed: int = 0, log_every: int = 50,
                   logger=None):
    """Train a codec level from scratch on raw audio clips.

    Objective: waveform reconstruction L1 plus the commitment pull (weight
    from the config); the codebook itself learns through EMA statistics and
    starts from clusters of a warm-up batch's encoder outputs so entries are
    reachable from step one. Returns ``(codec, history)`` where history holds
    one record per step. Raises NumericsError if the loss leaves the finite
    range.
    """
    crop = max(config.hop, crop_samples - crop_samples % config.hop)
    _check_clips(clips, config, crop)
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    codec = CodecLevel(config)
    codec.quantizer.generator = torch.Generator().manual_seed(seed)
    codec.train_mode(True)
    params = list(codec.encoder.parameters()) + list(codec.decoder.parameters())
    opt = torch.optim.Adam(params, lr=lr)
    lengths = [len(c) for c in clips]
    with torch.no_grad():
        warmup = _sample_crops(clips, lengths, batch_size, crop, rng)
        codec.quantizer.seed_entries(codec.encoder(warmup), seed=seed)
    history = []
    for step in range(1, steps + 1):
        x = _sample_crops(clips, lengths, batch_size, crop, rng)
        features = codec.encoder(x)
        quantized, commitment, _ = codec.quantizer(features)
        recon = codec.decoder(quantized)
        recon_l1 = (recon - x).abs().mean()
        loss = recon_l1 + config.commitment_weight * commitment
        if not torch.isfinite(loss):
            raise NumericsError(f"codec pretraining diverged at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        record = {
            "step": step,
            "recon_l1": float(recon_l1.detach()),
            "commitment": float(commitment.detach()),
            "total": float(loss.detach()),
        }
        history.append(record)
        if logger and (step % log_every == 0 or step == steps):
            logger(record)
    codec.train_mode(False)
    return codec, history


def reconstruction_l1(codec: CodecLevel, clips) -> float:
    """Mean quantized-reconstruction L1 over full clips (eval mode)."""
    if not clips:
        raise DataError("need at least one clip to evaluate")
    total = 0.0
    for clip in clips:
        seq = codec.encode(clip)
        _, quantized = codec.quantize(seq)
        recon = codec.decode(quantized)
        n = len(recon)
        total += float(np.mean(np.abs(recon.samples - clip.samples[:n])))
    return total / len(clips)


def codebook_usage(codec: CodecLevel, clips) -> float:
    """Fraction of codebook entries selected at least once over ``clips``."""
    used = np.zeros(codec.config.codebook_size, dtype=bool)
    for clip in clips:
        indices, _ = codec.quantize(codec.encode(clip))
        used[indices] = True
    return float(used.mean())


def finetune_decoder(codec: CodecLevel, clips, steps: int,
                     batch_size: int = 4, crop_samples: int = 8192,
                     lr: float = 1e-5, d_lr: float = 1e-4, seed: int = 0,
                     n_scales: int = 3, width_divisor: int = 1,
                     grad_clip: float = 10.0, logger=None):
    """Adversarially refine the decoder against waveform discriminators.

    The encoder and codebook stay frozen; the decoder sees quantized features
    of real clips and is trained with the usual weighted objective
    (adversarial + feature matching + waveform and mel reconstruction).
    Zero steps return the codec unchanged.
    """
    from .losses import LossWeights, MelAnalyzer, feature_matching_loss, hinge_d_loss, hinge_g_loss
    from .model import DiscriminatorSet

    if steps == 0:
        return codec, []
    hop = codec.config.hop
    crop = max(hop, crop_samples - crop_samples % hop)
    _check_clips(clips, codec.config, crop)
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    codec.freeze(decoder_too=False)
    codec.decoder.train(True)
    codec.encoder.eval()
    codec.quantizer.eval()
    disc = DiscriminatorSet(in_channels=1, n_scales=n_scales, width_divisor=width_divisor)
    weights = LossWeights()
    mel = MelAnalyzer(codec.config.sample_rate)
    opt_g = torch.optim.Adam(codec.decoder.parameters(), lr=lr, betas=(0.5, 0.9))
    opt_d = torch.optim.Adam(disc.parameters(), lr=d_lr, betas=(0.5, 0.9))
    lengths = [len(c) for c in clips]
    history = []
    for step in range(1, steps + 1):
        x = _sample_crops(clips, lengths, batch_size, crop, rng)
        with torch.no_grad():
            quantized, _, _ = codec.quantizer(codec.encoder(x))
        fake = codec.decoder(quantized)

        real_out = disc(x)
        fake_out = disc(fake.detach())
        d_loss = hinge_d_loss([s for _, s in real_out], [s for _, s in fake_out])
        opt_d.zero_grad()
        d_loss.backward()
        torch.nn.utils.clip_grad_norm_(disc.parameters(), grad_clip)
        opt_d.step()

        real_out = disc(x)
        fake_out = disc(fake)
        adv = hinge_g_loss([s for _, s in fake_out])
        fm = feature_matching_loss([f for f, _ in real_out], [f for f, _ in fake_out])
        wav_l1 = (fake - x).abs().mean()
        mel_l1 = (mel(fake[:, 0]) - mel(x[:, 0])).abs().mean()
        g_loss = adv + weights.feature_matching * fm + weights.waveform * wav_l1 + weights.mel * mel_l1
        if not (torch.isfinite(d_loss) and torch.isfinite(g_loss)):
            raise NumericsError(f"decoder fine-tuning diverged at step {step}")
        opt_g.zero_grad()
        g_loss.backward()
        torch.nn.utils.clip_grad_norm_(codec.decoder.parameters(), grad_clip)
        opt_g.step()
        record = {"step": step, "d_loss": float(d_loss.detach()),
                  "g_loss": float(g_loss.detach()),
                  "wav_l1": float(wav_l1.detach()), "mel_l1": float(mel_l1.detach())}
        history.append(record)
        if logger:
            logger(record)
    codec.decoder.train(False)
    return codec, history

"""Adversarial training of the feature generator, and music generation.

The codec (encoder, codebook, decoder) is trained beforehand and stays
frozen here. Each step encodes a batch of real clips into continuous
codec features, generates competing features from the paired motion and
visual streams, and updates window discriminators and the generator in
alternation. The code term pulls generated features toward the
*quantized* real codes; reconstruction terms decode the *continuous*
generated features through the frozen decoder. Quantization enters the
generation path only at inference time.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from . import audio as audio_mod
from .archive import load_archive, save_archive
from .codec import CodecLevel, VQSequence
from .errors import ConfigError, DataError, NumericsError
from .losses import (LossWeights, MelAnalyzer, combine, commitment_l1,
                     feature_matching_loss, hinge_d_loss, hinge_g_loss,
                     mel_l1, waveform_l1)
from .model import (DiscriminatorSet, GeneratorConfig, MusicGenerator,
                    reshape_for_discriminator)

MOTION_FPS = 60.0
METRIC_TAIL = 20


@dataclass(frozen=True)
class TrainConfig:
    """Optimization settings and ablation switches for one level."""

    level: str = "high"
    clip_seconds: float = 2.0
    batch_size: int = 16
    g_lr: float = 1e-4
    d_lr: float = 1e-4
    betas: tuple = (0.5, 0.9)
    finetune_lr: float = 1e-5
    max_steps: int = 500
    seed: int = 0
    grad_clip: float = 10.0
    d_layers: int = 3
    width_divisor: int = 1
    log_every: int = 10
    motion_channels: int = 34
    visual_channels: int = 1024
    no_motion: bool = False
    no_visual: bool = False
    no_scaling: bool = False
    no_reshape: bool = False
    weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if self.max_steps < 0 or self.batch_size < 1:
            raise ConfigError("max_steps must be >= 0 and batch_size >= 1")
        if min(self.g_lr, self.d_lr, self.finetune_lr, self.grad_clip) <= 0:
            raise ConfigError("learning rates and gradient clip must be positive")
        if self.d_layers not in (1, 2, 3):
            raise ConfigError(f"d_layers must be 1, 2, or 3, got {self.d_layers}")
        if self.clip_seconds <= 0:
            raise ConfigError("clip_seconds must be positive")
        if self.log_every < 1:
            raise ConfigError("log_every must be >= 1")

    def generator_config(self) -> GeneratorConfig:
        return GeneratorConfig(
            level=self.level,
            motion_channels=self.motion_channels,
            visual_channels=self.visual_channels,
            sigma=1.0 if self.no_scaling else 100.0,
            width_divisor=self.width_divisor,
            no_motion=self.no_motion,
            no_visual=self.no_visual,
        )


@dataclass
class Checkpoint:
    """Everything needed to resume or rerun a training state.

    Holds parameter tensors (generator and discriminators), both optimizer
    states, the step counter, the full configuration, and the tail of the
    metric log.
    """

    config: TrainConfig
    step: int
    generator_state: dict
    discriminator_state: dict
    opt_g_state: dict | None = None
    opt_d_state: dict | None = None
    metric_tail: list = field(default_factory=list)

    def build_generator(self) -> MusicGenerator:
        generator = MusicGenerator(self.config.generator_config())
        generator.load_state_dict(self.generator_state)
        generator.eval()
        return generator

    def build_discriminators(self) -> DiscriminatorSet:
        channels = (self.config.generator_config().embed_dim
                    if self.config.no_reshape else 1)
        discriminators = DiscriminatorSet(
            in_channels=channels, n_scales=self.config.d_layers,
            width_divisor=self.config.width_divisor)
        discriminators.load_state_dict(self.discriminator_state)
        discriminators.eval()
        return discriminators


def _clone_tensors(value):
    """Deep-copy a (possibly nested) structure, cloning every tensor."""
    if isinstance(value, torch.Tensor):
        return value.detach().clone()
    if isinstance(value, dict):
        return {k: _clone_tensors(v) for k, v in value.items()}
    if isinstance(value, list):
        return [_clone_tensors(v) for v in value]
    if isinstance(value, tuple):
        return tuple(_clone_tensors(v) for v in value)
    return value


def _stack_clips(clips, hop: int, sample_rate: int, clip_seconds: float):
    """Validate a clip list and stack it into batched tensors.

    Returns ``(waves [N,1,samples], motion [N,C,Tm], visual [N,Cv,Tv],
    target_frames)`` with every waveform cropped to a whole number of
    codec frames.
    """
    if not clips:
        raise DataError("need at least one training clip")
    n_samples = len(clips[0].audio.samples)
    frames = n_samples // hop
    if frames < 1:
        raise DataError(f"clips of {n_samples} samples are shorter than one frame")
    usable = frames * hop
    waves, motions, visuals = [], [], []
    for clip in clips:
        if clip.audio.sample_rate != sample_rate:
            raise DataError(
                f"clip {clip.record.clip_id!r} is at {clip.audio.sample_rate} Hz; "
                f"the codec expects {sample_rate}"
            )
        if abs(clip.record.seconds - clip_seconds) > 1e-6:
            raise DataError(
                f"clip {clip.record.clip_id!r} spans {clip.record.seconds}s but "
                f"the run is configured for {clip_seconds}s clips"
            )
        if len(clip.audio.samples) != n_samples:
            raise DataError("all training clips must have the same length")
        waves.append(clip.audio.samples[:usable])
        motions.append(clip.motion)
        visuals.append(clip.visual)
    waves = torch.from_numpy(np.stack(waves)).float().unsqueeze(1)
    motion = torch.from_numpy(np.stack(motions)).float()
    visual = torch.from_numpy(np.stack(visuals)).float()
    return waves, motion, visual, frames


def train_level(clips, codec: CodecLevel, config: TrainConfig,
                metrics_path=None, checkpoint_path=None, logger=None):
    """Train the feature generator for one level against a frozen codec.

    Writes one JSON line per step to ``metrics_path`` (when given); the log
    is byte-identical across runs with the same seed and inputs. On
    numerical divergence the most recent snapshot (taken at step 0 and
    every ``log_every`` steps) is written to ``checkpoint_path`` before
    the error propagates. ``max_steps=0`` returns the initial state
    untouched. Returns ``(checkpoint, history)``.
    """
    if codec.config.level != config.level:
        raise ConfigError(
            f"codec level {codec.config.level!r} does not match "
            f"training level {config.level!r}"
        )
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    sample_rate = codec.config.sample_rate
    waves, motion, visual, target_frames = _stack_clips(
        clips, codec.config.hop, sample_rate, config.clip_seconds)
    codec.freeze(decoder_too=True).train_mode(False)

    generator = MusicGenerator(config.generator_config())
    disc_channels = codec.config.embed_dim if config.no_reshape else 1
    discriminators = DiscriminatorSet(
        in_channels=disc_channels, n_scales=config.d_layers,
        width_divisor=config.width_divisor)
    for_disc = (lambda f: f) if config.no_reshape else reshape_for_discriminator

    opt_g = torch.optim.Adam(generator.parameters(), lr=config.g_lr,
                             betas=config.betas)
    opt_d = torch.optim.Adam(discriminators.parameters(), lr=config.d_lr,
                             betas=config.betas)
    analyzer = MelAnalyzer(sample_rate)

    def make_checkpoint(step, history):
        return Checkpoint(
            config=config, step=step,
            generator_state=_clone_tensors(generator.state_dict()),
            discriminator_state=_clone_tensors(discriminators.state_dict()),
            opt_g_state=_clone_tensors(opt_g.state_dict()),
            opt_d_state=_clone_tensors(opt_d.state_dict()),
            metric_tail=list(history[-METRIC_TAIL:]),
        )

    metrics_file = open(metrics_path, "w") if metrics_path is not None else None
    history = []
    snapshot = make_checkpoint(0, history)
    try:
        for step in range(1, config.max_steps + 1):
            idx = torch.from_numpy(rng.integers(0, len(clips), size=config.batch_size))
            wave_b = waves[idx]
            with torch.no_grad():
                real_features = codec.encoder(wave_b)
                real_codes, _, _ = codec.quantizer(real_features)
            fake_features = generator(motion[idx], visual[idx], target_frames)

            real_in = for_disc(real_features)
            fake_in = for_disc(fake_features)
            real_out = discriminators(real_in)
            fake_out = discriminators(fake_in.detach())
            d_loss = hinge_d_loss([s for _, s in real_out], [s for _, s in fake_out])
            opt_d.zero_grad()
            d_loss.backward()
            torch.nn.utils.clip_grad_norm_(discriminators.parameters(), config.grad_clip)
            opt_d.step()

            with torch.no_grad():
                real_out = discriminators(real_in)
            fake_out = discriminators(fake_in)
            adversarial = hinge_g_loss([s for _, s in fake_out])
            matching = feature_matching_loss(
                [f for f, _ in real_out], [f for f, _ in fake_out])
            code = commitment_l1(fake_features, real_codes)
            decoded = codec.decoder(fake_features)
            wav = waveform_l1(wave_b, decoded)
            mel = mel_l1(analyzer, wave_b[:, 0], decoded[:, 0])
            g_loss, breakdown = combine(config.weights, adversarial, matching,
                                        code, wav, mel)
            if not (torch.isfinite(d_loss) and torch.isfinite(g_loss)):
                if checkpoint_path is not None:
                    save_checkpoint(checkpoint_path, snapshot)
                raise NumericsError(
                    f"training diverged at step {step}; last good snapshot "
                    f"is step {snapshot.step}")
            opt_g.zero_grad()
            g_loss.backward()
            torch.nn.utils.clip_grad_norm_(generator.parameters(), config.grad_clip)
            opt_g.step()

            record = {"step": step, "d_loss": float(d_loss.detach())}
            record.update(breakdown)
            history.append(record)
            if metrics_file is not None:
                metrics_file.write(json.dumps(record) + "\n")
            if logger is not None:
                logger(record)
            if step % config.log_every == 0 or step == config.max_steps:
                snapshot = make_checkpoint(step, history)
    finally:
        if metrics_file is not None:
            metrics_file.close()
    generator.eval()
    discriminators.eval()
    checkpoint = make_checkpoint(config.max_steps, history)
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, checkpoint)
    return checkpoint, history


def _resolve_generator(source) -> MusicGenerator:
    if isinstance(source, Checkpoint):
        return source.build_generator()
    if isinstance(source, MusicGenerator):
        return source
    raise ConfigError(f"cannot generate from {type(source).__name__}")


def generate_music(source, codec: CodecLevel, motion: np.ndarray,
                   visual: np.ndarray, target_frames: int | None = None,
                   denoise: bool = False) -> audio_mod.Waveform:
    """Generate a waveform from one motion/visual pair.

    ``source`` is a trained generator or a checkpoint. Generated features
    are snapped to their nearest codebook entries and decoded;
    ``target_frames`` defaults to the motion clip's duration expressed in
    codec frames.
    """
    generator = _resolve_generator(source)
    if motion.ndim != 2 or visual.ndim != 2:
        raise DataError("motion and visual inputs must be [channels, frames]")
    if target_frames is None:
        duration = motion.shape[1] / MOTION_FPS
        target_frames = int(duration * codec.config.sample_rate) // codec.config.hop
    if target_frames < 1:
        raise DataError(f"cannot generate {target_frames} frames")
    generator.eval()
    with torch.no_grad():
        features = generator(
            torch.from_numpy(np.ascontiguousarray(motion)).float()[None],
            torch.from_numpy(np.ascontiguousarray(visual)).float()[None],
            target_frames,
        )[0].numpy()
    seq = VQSequence(features, codec.config.level)
    _, quantized = codec.quantize(seq)
    wave = codec.decode(quantized)
    if denoise:
        wave = audio_mod.spectral_denoise(wave)
    return wave


# ---------------------------------------------------------------------------
# Checkpoint persistence
# ---------------------------------------------------------------------------


def _flatten_state(prefix: str, state: dict, arrays: dict, spill: dict):
    """Split a nested state dict into named arrays and JSON-safe leftovers."""
    for key, value in state.items():
        name = f"{prefix}/{key}"
        if isinstance(value, torch.Tensor):
            arrays[name] = value.detach().cpu().numpy()
        elif isinstance(value, dict):
            _flatten_state(name, value, arrays, spill)
        else:
            spill[name] = value


def _unflatten_state(prefix: str, arrays: dict, spill: dict) -> dict:
    out: dict = {}
    lead = prefix + "/"

    def insert(tree, path, value):
        head = path[0]
        # Optimizer states key parameter slots by integer index.
        head = int(head) if head.lstrip("-").isdigit() else head
        if len(path) == 1:
            tree[head] = value
        else:
            insert(tree.setdefault(head, {}), path[1:], value)

    for name, array in arrays.items():
        if name.startswith(lead):
            insert(out, name[len(lead):].split("/"), torch.from_numpy(array.copy()))
    for name, value in spill.items():
        if name.startswith(lead):
            insert(out, name[len(lead):].split("/"), value)
    return out


def save_checkpoint(path, checkpoint: Checkpoint) -> None:
    """Persist a checkpoint as a content-hashed named-array archive."""
    arrays: dict = {}
    spill: dict = {}
    _flatten_state("generator", checkpoint.generator_state, arrays, spill)
    _flatten_state("disc", checkpoint.discriminator_state, arrays, spill)
    optim_meta = {}
    for tag, state in (("opt_g", checkpoint.opt_g_state),
                       ("opt_d", checkpoint.opt_d_state)):
        if state is None:
            continue
        _flatten_state(f"{tag}/state", state.get("state", {}), arrays, spill)
        optim_meta[tag] = {"param_groups": state.get("param_groups", [])}
    config_echo = asdict(checkpoint.config)
    metadata = {
        "kind": "checkpoint",
        "step": checkpoint.step,
        "config": config_echo,
        "metric_tail": checkpoint.metric_tail,
        "optim": optim_meta,
        "spill": spill,
    }
    save_archive(path, arrays, metadata)


def load_checkpoint(path) -> Checkpoint:
    """Rebuild a checkpoint; the archive hash guards against corruption."""
    arrays, metadata = load_archive(path)
    if metadata.get("kind") != "checkpoint":
        raise DataError(f"{path} does not hold a training checkpoint")
    config_echo = dict(metadata["config"])
    config_echo["betas"] = tuple(config_echo["betas"])
    config_echo["weights"] = LossWeights(**config_echo["weights"])
    config = TrainConfig(**config_echo)
    spill = metadata.get("spill", {})
    opt_states = {}
    for tag in ("opt_g", "opt_d"):
        if tag in metadata.get("optim", {}):
            groups = [dict(g) for g in metadata["optim"][tag]["param_groups"]]
            for group in groups:
                if "betas" in group:
                    group["betas"] = tuple(group["betas"])
            opt_states[tag] = {
                "state": _unflatten_state(f"{tag}/state", arrays, spill),
                "param_groups": groups,
            }
    return Checkpoint(
        config=config,
        step=metadata["step"],
        generator_state=_unflatten_state("generator", arrays, spill),
        discriminator_state=_unflatten_state("disc", arrays, spill),
        opt_g_state=opt_states.get("opt_g"),
        opt_d_state=opt_states.get("opt_d"),
        metric_tail=metadata.get("metric_tail", []),
    )

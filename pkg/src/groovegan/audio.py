"""Waveform I/O and audio analysis primitives.

Everything in this module is plain numpy/scipy and fully deterministic; the
torch-based parts of the package treat these functions as ground truth. The
analysis conventions used throughout the package are fixed here:

* STFT: periodic Hann window, zero-pad centering (``n_fft // 2`` on each
  side), ``n_frames = 1 + floor(n_samples / hop)``.
* Mel: Slaney-style scale with area normalization, ``fmin=0``,
  ``fmax=sr/2``, filterbank applied to the *magnitude* spectrum, compressed
  with ``log(1 + x)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.io.wavfile
import scipy.signal

from .errors import DataError

INT16_SCALE = 32768.0


# ---------------------------------------------------------------------------
# Types
# ---------------------------------------------------------------------------


@dataclass
class Waveform:
    """A mono audio clip: 1-D float samples at a fixed sample rate."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples)
        if self.samples.ndim != 1:
            raise DataError(f"waveform must be 1-D, got shape {self.samples.shape}")
        if not np.issubdtype(self.samples.dtype, np.floating):
            raise DataError(f"waveform samples must be float, got {self.samples.dtype}")
        if self.sample_rate <= 0:
            raise DataError(f"sample rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(self.samples)):
            raise DataError("waveform contains NaN or Inf samples")

    @property
    def duration(self) -> float:
        """Clip length in seconds."""
        return len(self.samples) / self.sample_rate

    def __len__(self) -> int:
        return len(self.samples)


@dataclass
class MelConfig:
    """Mel analysis settings; defaults are the package-wide convention."""

    n_fft: int = 1024
    hop: int = 256
    n_mels: int = 80
    fmin: float = 0.0
    fmax: float | None = None  # None -> sr / 2


@dataclass
class MelSpectrogram:
    """Log-compressed mel magnitudes, shape ``[n_mels, n_frames]``."""

    frames: np.ndarray
    sample_rate: int
    hop: int

    def __post_init__(self):
        self.frames = np.asarray(self.frames)
        if self.frames.ndim != 2:
            raise DataError(f"mel frames must be 2-D, got shape {self.frames.shape}")
        if np.any(self.frames < 0):
            raise DataError("mel frames must be non-negative")

    @property
    def frame_rate(self) -> float:
        """Frames per second."""
        return self.sample_rate / self.hop


@dataclass
class OnsetEnvelope:
    """Per-frame onset strength (non-negative), plus its frame rate."""

    values: np.ndarray
    frame_rate: float

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 1:
            raise DataError("onset envelope must be 1-D")
        if np.any(self.values < 0):
            raise DataError("onset strength must be non-negative")


@dataclass
class BeatList:
    """Beat positions in seconds, strictly increasing."""

    times: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64)
        if self.times.ndim != 1:
            raise DataError("beat times must be 1-D")
        if len(self.times) and (np.any(self.times < 0) or np.any(np.diff(self.times) <= 0)):
            raise DataError("beat times must be non-negative and strictly increasing")

    def __len__(self) -> int:
        return len(self.times)


# ---------------------------------------------------------------------------
# WAV I/O
# ---------------------------------------------------------------------------


def load_wav(path) -> Waveform:
    """Load a PCM WAV file (16-bit int or 32-bit float; mono or stereo).

    Stereo is downmixed by channel averaging. Other encodings raise DataError.
    """
    try:
        rate, data = scipy.io.wavfile.read(path)
    except FileNotFoundError:
        raise
    except Exception as exc:
        raise DataError(f"could not read WAV file {path}: {exc}") from exc
    if data.size == 0:
        raise DataError(f"WAV file {path} contains no samples")
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / INT16_SCALE
    elif data.dtype == np.float32:
        samples = data.astype(np.float64)
    else:
        raise DataError(
            f"unsupported WAV sample format {data.dtype} in {path}; "
            "expected 16-bit PCM or 32-bit float"
        )
    if samples.ndim == 2:
        samples = samples.mean(axis=1)
    elif samples.ndim != 1:
        raise DataError(f"unsupported WAV layout with shape {data.shape}")
    samples = np.clip(samples, -1.0, 1.0)
    return Waveform(samples.astype(np.float32), int(rate))


def save_wav(wave: Waveform, path) -> None:
    """Write a waveform as mono 16-bit PCM.

    Round trip through save/load changes samples by at most 1/32768.
    """
    scaled = np.round(np.asarray(wave.samples, dtype=np.float64) * INT16_SCALE)
    quantized = np.clip(scaled, -32768, 32767).astype(np.int16)
    scipy.io.wavfile.write(path, wave.sample_rate, quantized)


# ---------------------------------------------------------------------------
# Resampling
# ---------------------------------------------------------------------------


def resample(wave: Waveform, target_rate: int) -> Waveform:
    """Band-limited polyphase resampling to ``target_rate``.

    Output length is ``round(n * target_rate / source_rate)``; resampling to
    the source rate returns the samples unchanged.
    """
    if target_rate <= 0:
        raise DataError(f"target sample rate must be positive, got {target_rate}")
    if target_rate == wave.sample_rate:
        return Waveform(wave.samples.copy(), wave.sample_rate)
    g = math.gcd(target_rate, wave.sample_rate)
    up, down = target_rate // g, wave.sample_rate // g
    out = scipy.signal.resample_poly(np.asarray(wave.samples, dtype=np.float64), up, down)
    n_out = int(round(len(wave.samples) * target_rate / wave.sample_rate))
    out = out[:n_out]
    return Waveform(out.astype(np.float32), target_rate)


# ---------------------------------------------------------------------------
# STFT / mel analysis
# ---------------------------------------------------------------------------


def hann_window(n: int) -> np.ndarray:
    """Periodic Hann window of length ``n`` (float64)."""
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def stft(samples: np.ndarray, n_fft: int, hop: int) -> np.ndarray:
    """Complex STFT with zero-pad centering, shape ``[1 + n_fft/2, frames]``.

    Frame ``t`` is centered on sample ``t * hop``; the frame count is
    ``1 + floor(n / hop)``.
    """
    x = np.asarray(samples, dtype=np.float64)
    if len(x) < n_fft:
        raise DataError(f"need at least {n_fft} samples for analysis, got {len(x)}")
    pad = n_fft // 2
    x = np.pad(x, (pad, pad))
    n_frames = 1 + (len(x) - n_fft) // hop
    idx = np.arange(n_fft)[None, :] + hop * np.arange(n_frames)[:, None]
    frames = x[idx] * hann_window(n_fft)[None, :]
    return np.fft.rfft(frames, axis=1).T


def istft(spec: np.ndarray, n_fft: int, hop: int, length: int) -> np.ndarray:
    """Inverse of :func:`stft` via weighted overlap-add, cropped to ``length``."""
    window = hann_window(n_fft)
    frames = np.fft.irfft(spec.T, n=n_fft, axis=1) * window[None, :]
    n_frames = frames.shape[0]
    total = n_fft + hop * (n_frames - 1)
    out = np.zeros(total)
    norm = np.zeros(total)
    for t in range(n_frames):
        out[t * hop : t * hop + n_fft] += frames[t]
        norm[t * hop : t * hop + n_fft] += window**2
    out = out / np.maximum(norm, 1e-10)
    pad = n_fft // 2
    return out[pad : pad + length]


def _hz_to_mel(freq):
    """Slaney mel scale: linear below 1 kHz, logarithmic above."""
    freq = np.asarray(freq, dtype=np.float64)
    f_sp = 200.0 / 3
    mels = freq / f_sp
    min_log_hz = 1000.0
    logstep = np.log(6.4) / 27.0
    above = freq >= min_log_hz
    mels = np.where(above, min_log_hz / f_sp + np.log(np.maximum(freq, min_log_hz) / min_log_hz) / logstep, mels)
    return mels


def _mel_to_hz(mels):
    mels = np.asarray(mels, dtype=np.float64)
    f_sp = 200.0 / 3
    freq = mels * f_sp
    min_log_hz = 1000.0
    min_log_mel = min_log_hz / f_sp
    logstep = np.log(6.4) / 27.0
    above = mels >= min_log_mel
    return np.where(above, min_log_hz * np.exp(logstep * (np.maximum(mels, min_log_mel) - min_log_mel)), freq)


def mel_filterbank(sample_rate: int, n_fft: int, n_mels: int,
                   fmin: float = 0.0, fmax: float | None = None) -> np.ndarray:
    """Triangular mel filterbank, shape ``[n_mels, 1 + n_fft/2]`` (float64).

    Slaney scale with area normalization, so each row integrates to roughly
    the same energy regardless of bandwidth.
    """
    if fmax is None:
        fmax = sample_rate / 2.0
    fft_freqs = np.linspace(0.0, sample_rate / 2.0, 1 + n_fft // 2)
    mel_points = np.linspace(_hz_to_mel(fmin), _hz_to_mel(fmax), n_mels + 2)
    hz_points = _mel_to_hz(mel_points)
    fb = np.zeros((n_mels, len(fft_freqs)))
    for m in range(n_mels):
        lower, center, upper = hz_points[m], hz_points[m + 1], hz_points[m + 2]
        up = (fft_freqs - lower) / max(center - lower, 1e-10)
        down = (upper - fft_freqs) / max(upper - center, 1e-10)
        fb[m] = np.maximum(0.0, np.minimum(up, down))
        fb[m] *= 2.0 / (upper - lower)
    return fb


def mel_spectrogram(wave: Waveform, config: MelConfig | None = None) -> MelSpectrogram:
    """Log-compressed mel magnitudes of a waveform.

    Requires ``len(wave) >= n_fft``. A zero signal produces all-zero frames
    (the ``log(1+x)`` floor).
    """
    cfg = config or MelConfig()
    mag = np.abs(stft(wave.samples, cfg.n_fft, cfg.hop))
    fb = mel_filterbank(wave.sample_rate, cfg.n_fft, cfg.n_mels, cfg.fmin, cfg.fmax)
    return MelSpectrogram(np.log1p(fb @ mag), wave.sample_rate, cfg.hop)


# ---------------------------------------------------------------------------
# Onsets and beats
# ---------------------------------------------------------------------------


def onset_strength(mel: MelSpectrogram) -> OnsetEnvelope:
    """Spectral flux: positive first difference of log-mel, summed over bands.

    The first frame has no predecessor and is defined as zero; the envelope
    length equals the mel frame count.
    """
    diff = np.diff(mel.frames, axis=1)
    flux = np.maximum(diff, 0.0).sum(axis=0)
    return OnsetEnvelope(np.concatenate([[0.0], flux]), mel.frame_rate)


def detect_beats(envelope: OnsetEnvelope, min_gap: float = 0.1,
                 window: float = 1.0, std_mult: float = 1.5,
                 edge_guard: float = 0.05, min_strength: float = 0.5) -> BeatList:
    """Pick beats from an onset envelope.

    Candidates are interior local maxima that exceed an adaptive threshold
    (mean + ``std_mult``·std over a centered ``window``-second span). They are
    accepted strongest-first subject to a ``min_gap``-second minimum spacing.
    Frames whose centers fall within ``edge_guard`` seconds of either end are
    ineligible: the analysis window ramping in or out of the clip produces
    spurious flux there. ``min_strength`` is an absolute floor in flux units:
    sustained tones ripple by ~1e-2 from spectral leakage while even very
    quiet percussive onsets exceed 1 by orders of magnitude, so the floor
    rejects ripple without ever masking a real attack.
    """
    env = envelope.values
    n = len(env)
    if n < 3:
        return BeatList()
    half = max(1, int(round(window * envelope.frame_rate)) // 2)
    thresholds = np.empty(n)
    for t in range(n):
        lo, hi = max(0, t - half), min(n, t + half + 1)
        seg = env[lo:hi]
        thresholds[t] = seg.mean() + std_mult * seg.std()
    guard = int(math.ceil(edge_guard * envelope.frame_rate))
    lo_frame, hi_frame = max(1, guard), min(n - 1, n - guard)
    candidates = [
        t for t in range(lo_frame, hi_frame)
        if env[t] > env[t - 1] and env[t] >= env[t + 1]
        and env[t] > thresholds[t] and env[t] >= min_strength
    ]
    candidates.sort(key=lambda t: (-env[t], t))
    min_frames = min_gap * envelope.frame_rate
    kept: list[int] = []
    for t in candidates:
        if all(abs(t - k) >= min_frames for k in kept):
            kept.append(t)
    return BeatList(np.sort(np.asarray(kept, dtype=np.float64)) / envelope.frame_rate)


# ---------------------------------------------------------------------------
# Denoising
# ---------------------------------------------------------------------------


def spectral_denoise(wave: Waveform, quantile: float = 0.1,
                     std_mult: float = 1.5, slope_db: float = 2.0,
                     config: MelConfig | None = None) -> Waveform:
    """Stationary spectral gating.

    The per-bin noise profile is mean + ``std_mult``·std (in dB) over the
    quietest ``quantile`` fraction of frames; a sigmoid gate with ``slope_db``
    attenuates bins near or below that profile. Output length equals input
    length.
    """
    cfg = config or MelConfig()
    spec = stft(wave.samples, cfg.n_fft, cfg.hop)
    mag = np.abs(spec)
    db = 20.0 * np.log10(mag + 1e-10)
    energy = (mag**2).sum(axis=0)
    n_quiet = max(1, int(round(quantile * mag.shape[1])))
    quiet = np.argsort(energy, kind="stable")[:n_quiet]
    noise_db = db[:, quiet]
    threshold = noise_db.mean(axis=1) + std_mult * noise_db.std(axis=1)
    gain = 1.0 / (1.0 + np.exp(-(db - threshold[:, None]) / slope_db))
    out = istft(spec * gain, cfg.n_fft, cfg.hop, len(wave.samples))
    return Waveform(out.astype(np.float32), wave.sample_rate)

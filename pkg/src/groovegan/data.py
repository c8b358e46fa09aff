"""Dataset manifests, modality loaders, splitting, and the synthetic corpus.

A dataset is a directory with a ``manifest.json`` describing clip records
per split, plus the referenced audio (WAV), motion (JSON), and visual
(``.npy``) files. Splits are disjoint at the *song* level so evaluation
never sees training songs.

Motion files are JSON with a small header and per-frame arrays::

    {"representation": "keypoints2d", "fps": 60.0, "width": 1.0,
     "height": 1.0, "frames": [[[x, y, confidence] * 17] ...]}

    {"representation": "smpl", "fps": 60.0, "frames": [[75 floats] ...]}

2-D keypoints load as 34 channels (x then y per joint, normalized by the
declared frame size; entries with confidence <= 0 are zeroed); SMPL pose
vectors load as 75 channels (24 axis-angle triples plus translation).
Visual feature files are ``.npy`` arrays of shape ``[windows, 1024]``.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import audio as audio_mod
from .errors import ConfigError, DataError

MOTION_REPRESENTATIONS = ("keypoints2d", "smpl")
MOTION_CHANNELS = {"keypoints2d": 34, "smpl": 75}
VISUAL_DIM = 1024
MOTION_FPS = 60.0
VISUAL_WINDOW_SECONDS = 0.5


# ---------------------------------------------------------------------------
# Records and manifests
# ---------------------------------------------------------------------------


@dataclass
class ClipRecord:
    """One aligned clip: audio file plus motion/visual files and labels."""

    clip_id: str
    song_id: str
    genre: str
    audio: str
    motion: str
    motion_representation: str
    start: float
    end: float
    visual: str | None = None

    def __post_init__(self):
        if self.motion_representation not in MOTION_REPRESENTATIONS:
            raise DataError(
                f"unknown motion representation {self.motion_representation!r} "
                f"in clip {self.clip_id!r}"
            )
        if not self.clip_id or not self.song_id:
            raise DataError("clip_id and song_id must be non-empty")
        if self.end <= self.start:
            raise DataError(
                f"clip {self.clip_id!r} has non-positive length "
                f"({self.start}..{self.end})"
            )

    @property
    def seconds(self) -> float:
        return self.end - self.start


@dataclass
class DatasetManifest:
    """The records of one split plus shared metadata."""

    split: str
    records: list
    metadata: dict
    root: Path = field(default_factory=Path)

    def path(self, relative: str) -> Path:
        return self.root / relative

    def __len__(self) -> int:
        return len(self.records)


def save_manifest(path, splits: dict, metadata: dict) -> None:
    """Write a manifest file: ``{"metadata": ..., "splits": {name: [...]}}``."""
    payload = {
        "metadata": metadata,
        "splits": {name: [asdict(r) for r in records] for name, records in splits.items()},
    }
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True))


def load_manifest(path) -> dict:
    """Load and validate a manifest; returns ``{split: DatasetManifest}``.

    Validation: schema, referenced files exist, clip lengths match the
    configured clip length (when one is declared), unique clip ids, and
    song-level disjointness across splits.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"manifest {path} does not exist")
    try:
        payload = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"manifest {path} is not valid JSON: {exc}") from exc
    if not isinstance(payload, dict) or "splits" not in payload:
        raise DataError(f"manifest {path} is missing the 'splits' table")
    metadata = payload.get("metadata", {})
    clip_seconds = metadata.get("clip_seconds")
    root = path.parent
    manifests = {}
    seen_ids: set = set()
    song_splits: dict = {}
    for split, raw_records in payload["splits"].items():
        records = []
        for raw in raw_records:
            try:
                record = ClipRecord(**raw)
            except TypeError as exc:
                raise DataError(f"bad record in split {split!r}: {exc}") from exc
            if record.clip_id in seen_ids:
                raise DataError(f"duplicate clip id {record.clip_id!r}")
            seen_ids.add(record.clip_id)
            if clip_seconds is not None and abs(record.seconds - clip_seconds) > 1e-6:
                raise DataError(
                    f"clip {record.clip_id!r} spans {record.seconds}s but the "
                    f"manifest declares {clip_seconds}s clips"
                )
            for rel in (record.audio, record.motion, record.visual):
                if rel is not None and not (root / rel).exists():
                    raise DataError(f"clip {record.clip_id!r} references missing file {rel}")
            previous = song_splits.setdefault(record.song_id, split)
            if previous != split:
                raise DataError(
                    f"song {record.song_id!r} appears in splits {previous!r} "
                    f"and {split!r}; splits must be song-disjoint"
                )
            records.append(record)
        manifests[split] = DatasetManifest(split, records, metadata, root)
    return manifests


# ---------------------------------------------------------------------------
# Splitting and segmentation
# ---------------------------------------------------------------------------


def split_by_song(records, ratios: dict, seed: int = 0, assignments: dict | None = None) -> dict:
    """Partition records into splits with every song entirely on one side.

    ``ratios`` maps split name to its share of *songs* (largest-remainder
    rounding); an explicit ``assignments`` map (song id -> split name)
    overrides the randomized partition.
    """
    songs = sorted({r.song_id for r in records})
    if assignments is not None:
        missing = [s for s in songs if s not in assignments]
        if missing:
            raise DataError(f"assignments missing songs: {missing[:5]}")
        song_to_split = {s: assignments[s] for s in songs}
        names = sorted(set(song_to_split.values()))
        return {
            name: [r for r in records if song_to_split[r.song_id] == name]
            for name in names
        }
    if abs(sum(ratios.values()) - 1.0) > 1e-6 or any(v < 0 for v in ratios.values()):
        raise ConfigError(f"split ratios must be non-negative and sum to 1, got {ratios}")
    active = [name for name, ratio in ratios.items() if ratio > 0]
    if len(songs) < len(active):
        raise DataError(
            f"{len(songs)} distinct songs cannot fill {len(active)} non-empty splits"
        )
    rng = np.random.default_rng(seed)
    order = [songs[i] for i in rng.permutation(len(songs))]
    fractions = {name: ratios[name] * len(songs) for name in active}
    counts = {name: int(fractions[name]) for name in active}
    # Every active split gets at least one song before remainders are dealt.
    for name in active:
        counts[name] = max(counts[name], 1)
    while sum(counts.values()) > len(songs):
        largest = max(active, key=lambda n: counts[n])
        counts[largest] -= 1
    leftovers = len(songs) - sum(counts.values())
    by_remainder = sorted(active, key=lambda n: fractions[n] - int(fractions[n]), reverse=True)
    for name in by_remainder[:leftovers]:
        counts[name] += 1
    song_to_split = {}
    cursor = 0
    for name in ratios:
        if name not in active:
            continue
        for song in order[cursor : cursor + counts[name]]:
            song_to_split[song] = name
        cursor += counts[name]
    out = {name: [] for name in ratios}
    for record in records:
        out[song_to_split[record.song_id]].append(record)
    return out


def segment_clips(duration: float, clip_seconds: float, stride_seconds: float,
                  start: float = 0.0) -> list:
    """Fixed windows ``[s, s + clip_seconds)`` while they fit in ``duration``."""
    if clip_seconds <= 0 or stride_seconds <= 0:
        raise ConfigError("clip and stride lengths must be positive")
    segments = []
    s = start
    while s + clip_seconds <= duration + 1e-9:
        segments.append((s, s + clip_seconds))
        s += stride_seconds
    return segments


# ---------------------------------------------------------------------------
# Modality loaders
# ---------------------------------------------------------------------------


def _resample_frames(frames: np.ndarray, source_fps: float, target_fps: float) -> np.ndarray:
    """Linear time interpolation of ``[C, T]`` channels to a new frame rate."""
    if abs(source_fps - target_fps) < 1e-9:
        return frames
    n_src = frames.shape[1]
    n_out = int(round(n_src * target_fps / source_fps))
    t_src = np.arange(n_src) / source_fps
    t_out = np.arange(n_out) / target_fps
    return np.stack([np.interp(t_out, t_src, frames[c]) for c in range(frames.shape[0])])


def load_motion(path, representation: str | None = None,
                expected_frames: int | None = None) -> np.ndarray:
    """Load a motion file as ``[channels, frames]`` at 60 fps.

    ``representation`` (when given) must match the file header. When
    ``expected_frames`` is given, a frame count off by more than 10% is a
    data error.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"motion file {path} does not exist")
    try:
        payload = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"motion file {path} is not valid JSON: {exc}") from exc
    declared = payload.get("representation")
    if declared not in MOTION_REPRESENTATIONS:
        raise DataError(f"motion file {path} declares unknown representation {declared!r}")
    if representation is not None and declared != representation:
        raise DataError(
            f"motion file {path} holds {declared!r} but {representation!r} was expected"
        )
    fps = float(payload.get("fps", MOTION_FPS))
    frames = np.asarray(payload.get("frames", []), dtype=np.float64)
    if frames.size == 0:
        raise DataError(f"motion file {path} has no frames")
    if declared == "keypoints2d":
        if frames.ndim != 3 or frames.shape[1:] != (17, 3):
            raise DataError(
                f"keypoints in {path} must be [frames, 17, 3], got {frames.shape}"
            )
        width = float(payload.get("width", 1.0))
        height = float(payload.get("height", 1.0))
        xy = frames[:, :, :2] / np.array([width, height])
        confident = frames[:, :, 2:3] > 0
        xy = np.where(confident, xy, 0.0)
        channels = xy.reshape(frames.shape[0], 34).T
    else:
        if frames.ndim != 2 or frames.shape[1] != 75:
            raise DataError(f"SMPL frames in {path} must be [frames, 75], got {frames.shape}")
        channels = frames.T
    channels = _resample_frames(channels, fps, MOTION_FPS)
    if expected_frames is not None:
        if abs(channels.shape[1] - expected_frames) > 0.1 * expected_frames:
            raise DataError(
                f"motion file {path} has {channels.shape[1]} frames at 60 fps; "
                f"expected about {expected_frames}"
            )
    return channels.astype(np.float32)


def load_visual_features(path) -> np.ndarray:
    """Load precomputed visual features as ``[1024, windows]``."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"visual feature file {path} does not exist")
    features = np.load(path)
    if features.ndim != 2 or features.shape[1] != VISUAL_DIM:
        raise DataError(
            f"visual features in {path} must be [windows, {VISUAL_DIM}], "
            f"got {features.shape}"
        )
    return np.ascontiguousarray(features.T, dtype=np.float32)


@dataclass
class LoadedClip:
    """A fully materialized clip ready for batching."""

    record: ClipRecord
    audio: audio_mod.Waveform
    motion: np.ndarray
    visual: np.ndarray


def load_clip(manifest: DatasetManifest, record: ClipRecord,
              allow_missing_visual: bool = False) -> LoadedClip:
    """Load one record's audio/motion/visual data, validating rates."""
    wave = audio_mod.load_wav(manifest.path(record.audio))
    target_rate = manifest.metadata.get("sample_rate")
    if target_rate is not None and wave.sample_rate != target_rate:
        wave = audio_mod.resample(wave, int(target_rate))
    expected = int(round(record.seconds * MOTION_FPS))
    motion = load_motion(manifest.path(record.motion), record.motion_representation,
                         expected_frames=expected)
    if record.visual is not None:
        visual = load_visual_features(manifest.path(record.visual))
    elif allow_missing_visual:
        windows = max(1, int(round(record.seconds / VISUAL_WINDOW_SECONDS)))
        visual = np.zeros((VISUAL_DIM, windows), dtype=np.float32)
    else:
        raise DataError(
            f"clip {record.clip_id!r} has no visual features; pass "
            "allow_missing_visual to substitute zeros"
        )
    return LoadedClip(record, wave, motion, visual)


def load_split(manifest: DatasetManifest, allow_missing_visual: bool = False) -> list:
    """Materialize every record of a split."""
    if not manifest.records:
        raise DataError(f"split {manifest.split!r} has no records")
    return [load_clip(manifest, r, allow_missing_visual) for r in manifest.records]


# ---------------------------------------------------------------------------
# Synthetic corpus
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ToyGenre:
    """A synthetic genre: a tempo plus a harmonic timbre."""

    name: str
    bpm: float
    base_freq: float


TOY_GENRES = (ToyGenre("ninety", 90.0, 220.0), ToyGenre("onefifty", 150.0, 660.0))
TOY_FIRST_BEAT = 0.1


def make_toy_genres(n: int):
    """The first ``n`` synthetic genres, extending the stock pair as needed."""
    if n < 1:
        raise ConfigError("need at least one genre")
    genres = list(TOY_GENRES[:n])
    for i in range(len(genres), n):
        genres.append(ToyGenre(f"genre{i:02d}", 80.0 + 21.0 * i,
                               min(3200.0, 200.0 * 1.4 ** i)))
    return tuple(genres)


def toy_beat_times(genre: ToyGenre, clip_seconds: float) -> np.ndarray:
    """Click positions for a toy clip: every beat from 0.1 s onward."""
    period = 60.0 / genre.bpm
    n = int(np.floor((clip_seconds - TOY_FIRST_BEAT) / period - 1e-9)) + 1
    return TOY_FIRST_BEAT + period * np.arange(n)


def _toy_audio(genre: ToyGenre, clip_seconds: float, sample_rate: int,
               rng: np.random.Generator) -> audio_mod.Waveform:
    n = int(round(clip_seconds * sample_rate))
    t = np.arange(n) / sample_rate
    phase = rng.uniform(0, 2 * np.pi, size=2)
    bed = (0.22 * np.sin(2 * np.pi * genre.base_freq * t + phase[0])
           + 0.10 * np.sin(2 * np.pi * 2 * genre.base_freq * t + phase[1]))
    burst_t = np.arange(int(0.005 * sample_rate)) / sample_rate
    burst = 0.6 * np.sin(2 * np.pi * 3000.0 * burst_t) * np.exp(-burst_t / 0.002)
    x = bed.copy()
    for beat in toy_beat_times(genre, clip_seconds):
        start = int(round(beat * sample_rate))
        stop = min(n, start + len(burst))
        x[start:stop] += burst[: stop - start]
    return audio_mod.Waveform(np.clip(x, -1.0, 1.0).astype(np.float32), sample_rate)


def _toy_motion(genre: ToyGenre, clip_seconds: float, rng: np.random.Generator) -> dict:
    """Sinusoidal keypoints whose peaks land on the click times."""
    n_frames = int(round(clip_seconds * MOTION_FPS))
    t = np.arange(n_frames) / MOTION_FPS
    period = 60.0 / genre.bpm
    oscillation = np.cos(2 * np.pi * (t - TOY_FIRST_BEAT) / period)
    base = rng.uniform(0.25, 0.75, size=(17, 2))
    amp = rng.uniform(0.05, 0.15, size=(17, 2))
    frames = np.empty((n_frames, 17, 3))
    frames[:, :, 0] = base[:, 0] + amp[:, 0] * oscillation[:, None]
    frames[:, :, 1] = base[:, 1] + amp[:, 1] * oscillation[:, None]
    frames[:, :, 2] = 1.0
    return {
        "representation": "keypoints2d",
        "fps": MOTION_FPS,
        "width": 1.0,
        "height": 1.0,
        "frames": frames.tolist(),
    }


def _toy_visual(genre_index: int, clip_seconds: float, rank: int,
                rng: np.random.Generator) -> np.ndarray:
    """Genre-tagged low-rank features: a fixed genre basis times a clip latent."""
    windows = max(1, int(round(clip_seconds / VISUAL_WINDOW_SECONDS)))
    genre_rng = np.random.default_rng(1000 + genre_index)
    basis = genre_rng.standard_normal((VISUAL_DIM, rank)) / np.sqrt(rank)
    offset = genre_rng.standard_normal(VISUAL_DIM)
    latents = rng.standard_normal((rank, windows))
    return (basis @ latents + offset[:, None]).T.astype(np.float32)


def synth_toy_dataset(out_dir, n_songs: int = 10, clips_per_song: int = 4,
                      clip_seconds: float = 2.0, sample_rate: int = 22050,
                      seed: int = 0, ratios: dict | None = None,
                      visual_rank: int = 8, genres: int = 2,
                      total_clips: int | None = None) -> Path:
    """Generate a deterministic multi-genre corpus and write its manifest.

    Each song carries one genre (alternating): clips are click tracks at the
    genre tempo over a genre-specific harmonic bed, motion oscillates in
    phase with the clicks, and visual features are genre-tagged low-rank
    projections. ``total_clips`` overrides the per-song count by spreading
    that many clips across the songs as evenly as possible. Returns the
    manifest path.
    """
    if n_songs < 2:
        raise ConfigError("need at least two songs for song-disjoint splits")
    genre_list = make_toy_genres(genres)
    if total_clips is not None:
        if total_clips < n_songs:
            raise ConfigError(
                f"{total_clips} clips cannot cover {n_songs} songs; "
                "lower --songs or raise --clips")
        counts = [total_clips // n_songs + (1 if s < total_clips % n_songs else 0)
                  for s in range(n_songs)]
    else:
        counts = [clips_per_song] * n_songs
    out_dir = Path(out_dir)
    for sub in ("audio", "motion", "visual"):
        (out_dir / sub).mkdir(parents=True, exist_ok=True)
    ratios = ratios or {"train": 0.7, "val": 0.15, "test": 0.15}
    rng = np.random.default_rng(seed)
    records = []
    for s in range(n_songs):
        song_id = f"song{s:03d}"
        genre_index = s % len(genre_list)
        genre = genre_list[genre_index]
        for c in range(counts[s]):
            clip_id = f"{song_id}_clip{c:02d}"
            wave = _toy_audio(genre, clip_seconds, sample_rate, rng)
            audio_mod.save_wav(wave, out_dir / "audio" / f"{clip_id}.wav")
            motion = _toy_motion(genre, clip_seconds, rng)
            (out_dir / "motion" / f"{clip_id}.json").write_text(json.dumps(motion))
            visual = _toy_visual(genre_index, clip_seconds, visual_rank, rng)
            np.save(out_dir / "visual" / f"{clip_id}.npy", visual)
            records.append(ClipRecord(
                clip_id=clip_id,
                song_id=song_id,
                genre=genre.name,
                audio=f"audio/{clip_id}.wav",
                motion=f"motion/{clip_id}.json",
                motion_representation="keypoints2d",
                visual=f"visual/{clip_id}.npy",
                start=c * clip_seconds,
                end=(c + 1) * clip_seconds,
            ))
    splits = split_by_song(records, ratios, seed=seed)
    metadata = {
        "sample_rate": sample_rate,
        "fps": MOTION_FPS,
        "clip_seconds": clip_seconds,
        "genres": [g.name for g in genre_list],
    }
    manifest_path = out_dir / "manifest.json"
    save_manifest(manifest_path, splits, metadata)
    return manifest_path

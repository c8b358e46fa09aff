"""Objective evaluation: rhythm alignment and genre retrieval.

Rhythm is scored by matching detected beats of the generated audio
against beats of the reference track (one-to-one, nearest first, within
a fixed tolerance). Genre consistency is scored by retrieving the
nearest reference clip in a fixed audio embedding space and checking
its genre label.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import audio as audio_mod
from . import data as data_mod
from .errors import DataError
from .training import generate_music

BEAT_TOLERANCE = 0.07
EMBEDDING_DIM = 160


# ---------------------------------------------------------------------------
# Beat alignment
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BeatScores:
    """Rhythm agreement between a generated track and its reference.

    ``coverage`` is the ratio of generated to reference beat counts (it can
    exceed 1 when the generator over-produces beats); ``hit`` is the
    fraction of reference beats matched one-to-one within the tolerance.
    """

    coverage: float
    hit: float


def match_beats(generated: np.ndarray, reference: np.ndarray,
                tolerance: float = BEAT_TOLERANCE) -> list:
    """Greedy one-to-one matching, closest pairs first.

    Returns ``(generated_index, reference_index)`` pairs with
    ``|t_g - t_r| <= tolerance``; each beat participates at most once.
    """
    candidates = []
    for i, tg in enumerate(generated):
        for j, tr in enumerate(reference):
            gap = abs(float(tg) - float(tr))
            if gap <= tolerance + 1e-12:
                candidates.append((gap, i, j))
    candidates.sort()
    used_g, used_r, pairs = set(), set(), []
    for _, i, j in candidates:
        if i in used_g or j in used_r:
            continue
        used_g.add(i)
        used_r.add(j)
        pairs.append((i, j))
    return pairs


def beat_scores(generated: audio_mod.BeatList, reference: audio_mod.BeatList,
                tolerance: float = BEAT_TOLERANCE) -> BeatScores:
    """Coverage and hit scores for one clip; the reference must have beats."""
    if len(reference) == 0:
        raise DataError("reference track has no beats to score against")
    coverage = len(generated) / len(reference)
    pairs = match_beats(generated.times, reference.times, tolerance)
    return BeatScores(coverage=coverage, hit=len(pairs) / len(reference))


def detect_track_beats(wave: audio_mod.Waveform) -> audio_mod.BeatList:
    """Beats of a waveform via the onset-strength picker."""
    envelope = audio_mod.onset_strength(audio_mod.mel_spectrogram(wave))
    return audio_mod.detect_beats(envelope)


# ---------------------------------------------------------------------------
# Audio embedding and genre retrieval
# ---------------------------------------------------------------------------


def embed_audio(wave: audio_mod.Waveform) -> np.ndarray:
    """A fixed 160-dim timbre embedding: log-mel band means and deviations.

    The waveform is peak-normalized first, so the embedding ignores overall
    level; bands 0..79 hold per-band means, 80..159 per-band standard
    deviations.
    """
    samples = wave.samples
    peak = np.max(np.abs(samples))
    if peak > 0:
        samples = samples / peak
    mel = audio_mod.mel_spectrogram(audio_mod.Waveform(samples.astype(np.float32),
                                                       wave.sample_rate))
    return np.concatenate([mel.frames.mean(axis=1),
                           mel.frames.std(axis=1)]).astype(np.float64)


class RandomEmbedder:
    """A content-blind control embedder: a hash-seeded Gaussian per waveform.

    Identical audio always maps to the same vector, but the vector carries
    no information about the content, so retrieval through it performs at
    chance level.
    """

    def __init__(self, dim: int = EMBEDDING_DIM, seed: int = 0):
        self.dim = dim
        self.seed = seed

    def __call__(self, wave: audio_mod.Waveform) -> np.ndarray:
        digest = hashlib.sha256(np.ascontiguousarray(wave.samples).tobytes()
                                + self.seed.to_bytes(8, "little")).digest()
        rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
        return rng.standard_normal(self.dim)


@dataclass
class EmbeddedClip:
    """A reference database entry: one clip's embedding plus its labels."""

    clip_id: str
    genre: str
    embedding: np.ndarray


def genre_accuracy(queries, database) -> float:
    """Fraction of queries whose nearest database clip shares their genre.

    ``queries`` are ``(embedding, true_genre)`` pairs; Euclidean distance,
    with exact ties resolved toward the lowest clip id.
    """
    if not queries or not database:
        raise DataError("genre retrieval needs at least one query and one database clip")
    ordered = sorted(database, key=lambda e: e.clip_id)
    matrix = np.stack([e.embedding for e in ordered])
    correct = 0
    for embedding, true_genre in queries:
        embedding = np.asarray(embedding)
        if embedding.shape != matrix[0].shape:
            raise DataError(
                f"query embedding has shape {embedding.shape}; database "
                f"entries have {matrix[0].shape}"
            )
        distances = np.linalg.norm(matrix - embedding[None, :], axis=1)
        nearest = ordered[int(np.argmin(distances))]
        correct += nearest.genre == true_genre
    return correct / len(queries)


# ---------------------------------------------------------------------------
# Run-level evaluation
# ---------------------------------------------------------------------------


def evaluate_run(generator, codec, manifest, out_path=None, denoise: bool = False,
                 embedder=None, tolerance: float = BEAT_TOLERANCE) -> dict:
    """Generate from every test clip and score rhythm and genre consistency.

    The retrieval database is built from the *reference* audio of the same
    split. Returns (and optionally writes as JSON) a report with per-clip
    beat scores and the aggregate metrics.
    """
    if not manifest.records:
        raise DataError(f"split {manifest.split!r} has no clips to evaluate")
    embedder = embedder if embedder is not None else embed_audio
    database, queries, per_clip = [], [], []
    coverages, hits = [], []
    for record in manifest.records:
        clip = data_mod.load_clip(manifest, record, allow_missing_visual=True)
        generated = generate_music(generator, codec, clip.motion, clip.visual,
                                   denoise=denoise)
        reference_beats = detect_track_beats(clip.audio)
        generated_beats = detect_track_beats(generated)
        scores = beat_scores(generated_beats, reference_beats, tolerance)
        coverages.append(scores.coverage)
        hits.append(scores.hit)
        database.append(EmbeddedClip(record.clip_id, record.genre,
                                     embedder(clip.audio)))
        queries.append((embedder(generated), record.genre))
        per_clip.append({"clip_id": record.clip_id, "genre": record.genre,
                         "coverage": scores.coverage, "hit": scores.hit})
    report = {
        "n_clips": len(manifest.records),
        "clip_seconds": manifest.metadata.get("clip_seconds"),
        "beat_coverage": float(np.mean(coverages)),
        "beat_hit": float(np.mean(hits)),
        "genre_accuracy": genre_accuracy(queries, database),
        "per_clip": per_clip,
    }
    if out_path is not None:
        Path(out_path).write_text(json.dumps(report, indent=2))
    return report

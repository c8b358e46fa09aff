"""Tests for the vector-quantized codec: quantization against a brute-force
oracle, shape laws, EMA codebook updates against a scalar recomputation,
dead-entry resets, checkpointing, and the training entry points."""

import numpy as np
import pytest
import torch

from groovegan import archive, codec
from groovegan.audio import Waveform
from groovegan.errors import ConfigError, DataError, NumericsError

TINY_HIGH = codec.CodecConfig.for_level(
    "high", channels=(4, 8, 8, 8), codebook_size=16)
TINY_LOW = codec.CodecConfig.for_level(
    "low", channels=(4, 8, 8), codebook_size=16)


def sine_clip(freq=220.0, seconds=1.0, sr=22050, amp=0.5, phase=0.0):
    t = np.arange(int(seconds * sr)) / sr
    return Waveform((amp * np.sin(2 * np.pi * freq * t + phase)).astype(np.float32), sr)


# ---------------------------------------------------------------------------
# Quantization
# ---------------------------------------------------------------------------


def test_quantize_matches_brute_force():
    rng = np.random.default_rng(42)
    features = rng.standard_normal((4, 1000))
    entries = rng.standard_normal((64, 4))
    indices, quantized = codec.quantize_features(features, entries)
    for t in range(features.shape[1]):
        best = np.argmin([np.linalg.norm(features[:, t] - e) for e in entries])
        assert indices[t] == best
        np.testing.assert_array_equal(quantized[:, t], entries[best])


def test_quantize_tie_takes_lowest_index():
    entries = np.array([[1.0, 0.0], [5.0, 5.0], [1.0, 0.0]])
    features = np.array([[1.0], [0.0]])
    indices, _ = codec.quantize_features(features, entries)
    assert indices[0] == 0


def test_quantize_dimension_mismatch():
    with pytest.raises(DataError):
        codec.quantize_features(np.zeros((3, 5)), np.zeros((4, 2)))


def test_straight_through_gradient():
    torch.manual_seed(0)
    vq = codec.VectorQuantizer(TINY_HIGH)
    vq.eval()
    features = torch.randn(2, 64, 7, requires_grad=True)
    quantized, commitment, indices = vq(features)
    quantized.sum().backward()
    # Straight-through: gradient w.r.t. features is exactly the upstream ones.
    np.testing.assert_array_equal(features.grad.numpy(), np.ones((2, 64, 7), dtype=np.float32))
    assert indices.shape == (2, 7)
    assert commitment.item() >= 0


# ---------------------------------------------------------------------------
# EMA updates and dead-code resets
# ---------------------------------------------------------------------------


def test_ema_update_matches_scalar_recompute():
    cfg = codec.CodecConfig.for_level("high", channels=(4, 8, 8, 8),
                                      codebook_size=4, embed_dim=2,
                                      ema_decay=0.9)
    torch.manual_seed(1)
    vq = codec.VectorQuantizer(cfg)
    vq.train()
    before_embed = vq.embedding.clone().numpy()
    before_size = vq.ema_cluster_size.clone().numpy()
    before_sum = vq.ema_embed_sum.clone().numpy()

    features = torch.randn(1, 2, 6, dtype=torch.float32)
    flat = features[0].T.numpy().astype(np.float64)
    _, _, indices = vq(features)
    idx = indices[0].numpy()

    decay, eps, k = 0.9, 1e-5, 4
    counts = np.array([(idx == i).sum() for i in range(k)], dtype=np.float64)
    sums = np.stack([flat[idx == i].sum(axis=0) if (idx == i).any() else np.zeros(2)
                     for i in range(k)])
    new_size = decay * before_size + (1 - decay) * counts
    new_sum = decay * before_sum + (1 - decay) * sums
    total = new_size.sum()
    smoothed = (new_size + eps) / (total + k * eps) * total
    expected = new_sum / smoothed[:, None]

    np.testing.assert_allclose(vq.ema_cluster_size.numpy(), new_size, rtol=1e-5)
    np.testing.assert_allclose(vq.ema_embed_sum.numpy(), new_sum, rtol=1e-5)
    np.testing.assert_allclose(vq.embedding.numpy(), expected, rtol=1e-5)
    # And the chosen indices are true nearest neighbours of the old table.
    for t in range(6):
        dists = [np.linalg.norm(flat[t] - e) for e in before_embed]
        assert idx[t] == int(np.argmin(dists))


def test_dead_codes_get_reseeded():
    cfg = codec.CodecConfig.for_level("high", channels=(4, 8, 8, 8),
                                      codebook_size=4, embed_dim=2,
                                      dead_code_steps=3)
    torch.manual_seed(2)
    vq = codec.VectorQuantizer(cfg)
    vq.generator = torch.Generator().manual_seed(0)
    vq.train()
    with torch.no_grad():
        vq.embedding.copy_(torch.tensor([[0.0, 0.0], [50.0, 50.0],
                                         [60.0, 60.0], [70.0, 70.0]]))
        vq.ema_embed_sum.copy_(vq.embedding)
        vq.ema_cluster_size.fill_(1.0)
    batch = torch.zeros(1, 2, 5) + 0.1  # always nearest to entry 0
    for _ in range(3):
        vq(batch)
    # Entries 1..3 went unused for dead_code_steps steps -> reseeded near 0.1.
    far = vq.embedding.numpy()[1:]
    assert np.all(np.abs(far - 0.1) < 1.0)
    assert np.all(vq.steps_unused.numpy() == 0)


def test_seed_entries_cover_the_data():
    cfg = codec.CodecConfig.for_level("high", channels=(4, 8, 8, 8),
                                      codebook_size=8, embed_dim=2)
    torch.manual_seed(0)
    vq = codec.VectorQuantizer(cfg)
    # Eight well-separated clusters of feature columns.
    centers = torch.tensor([[float(i), float(-i)] for i in range(8)])
    columns = centers.repeat_interleave(20, dim=0)
    columns = columns + 0.01 * torch.randn_like(columns)
    features = columns.t()[None]  # [1, D, 160]
    vq.seed_entries(features, seed=0)
    vq.eval()
    with torch.no_grad():
        _, _, indices = vq(features)
    # Every entry wins some column: the codebook starts fully live.
    assert set(indices.flatten().tolist()) == set(range(8))
    again = codec.VectorQuantizer(cfg)
    again.seed_entries(features, seed=0)
    assert torch.equal(vq.embedding, again.embedding)
    # Fewer columns than entries: columns recycle, entries stay finite.
    small = codec.VectorQuantizer(cfg)
    small.seed_entries(features[:, :, :3], seed=0)
    assert torch.isfinite(small.embedding).all()


# ---------------------------------------------------------------------------
# Shape laws and public ops
# ---------------------------------------------------------------------------


def test_encode_shape_high_and_low():
    wave = sine_clip(seconds=2.0)
    high = codec.CodecLevel(TINY_HIGH)
    seq = high.encode(wave)
    assert seq.features.shape == (64, 344)
    assert seq.level == "high"
    low = codec.CodecLevel(TINY_LOW)
    assert low.encode(wave).features.shape == (64, 1378)


def test_encode_preconditions():
    high = codec.CodecLevel(TINY_HIGH)
    with pytest.raises(DataError):
        high.encode(Waveform(np.zeros(100, dtype=np.float32), 22050))
    with pytest.raises(DataError):
        high.encode(Waveform(np.zeros(5000, dtype=np.float32), 16000))


def test_decode_length_law():
    high = codec.CodecLevel(TINY_HIGH)
    seq = codec.VQSequence(np.random.default_rng(0).standard_normal((64, 344)).astype(np.float32), "high")
    wave = high.decode(seq)
    assert len(wave) == 344 * 128
    assert np.all(np.abs(wave.samples) <= 1.0)
    with pytest.raises(DataError):
        high.decode(codec.VQSequence(np.zeros((32, 10), dtype=np.float32), "high"))


def test_quantize_round_trip_indices_valid():
    high = codec.CodecLevel(TINY_HIGH)
    seq = high.encode(sine_clip(seconds=1.0))
    indices, quantized = high.quantize(seq)
    assert indices.shape == (seq.frames,)
    assert indices.min() >= 0 and indices.max() < TINY_HIGH.codebook_size
    entries = high.codebook.entries
    np.testing.assert_allclose(quantized.features, entries[indices].T, atol=1e-6)


def test_config_validation():
    with pytest.raises(ConfigError):
        codec.CodecConfig(strides=(4, 3), channels=(8, 8, 8))
    with pytest.raises(ConfigError):
        codec.CodecConfig(strides=(4, 4), channels=(8, 8))
    with pytest.raises(ConfigError):
        codec.CodecConfig(codebook_size=1)
    assert codec.CodecConfig.for_level("high").hop == 128
    assert codec.CodecConfig.for_level("low").hop == 32


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------


def test_checkpoint_round_trip_bit_exact(tmp_path):
    torch.manual_seed(3)
    original = codec.CodecLevel(TINY_HIGH)
    path = tmp_path / "codec.npz"
    original.save(path)
    restored = codec.CodecLevel.load(path)
    wave = sine_clip(seconds=1.0)
    np.testing.assert_array_equal(original.encode(wave).features,
                                  restored.encode(wave).features)
    np.testing.assert_array_equal(original.quantizer.embedding.numpy(),
                                  restored.quantizer.embedding.numpy())


def test_checkpoint_corruption_detected(tmp_path):
    path = tmp_path / "codec.npz"
    codec.CodecLevel(TINY_HIGH).save(path)
    data = dict(np.load(path))
    key = next(k for k in data if k.startswith("array/") and data[k].size > 10)
    tampered = data[key].copy()
    tampered.flat[0] += 1.0
    data[key] = tampered
    np.savez(path, **data)
    with pytest.raises(NumericsError):
        codec.CodecLevel.load(path)


def test_archive_rejects_foreign_file(tmp_path):
    path = tmp_path / "other.npz"
    np.savez(path, stuff=np.zeros(3))
    with pytest.raises(NumericsError):
        archive.load_archive(path)


# ---------------------------------------------------------------------------
# Training entry points
# ---------------------------------------------------------------------------


def test_pretrain_runs_and_reports():
    clips = [sine_clip(freq, seconds=0.75, phase=p)
             for freq, p in [(220, 0.0), (330, 1.0), (440, 2.0)]]
    trained, history = codec.pretrain_codec(
        clips, TINY_HIGH, steps=20, batch_size=2, crop_samples=2048, seed=0)
    assert len(history) == 20
    assert all(np.isfinite(h["total"]) for h in history)
    seq = trained.encode(clips[0])
    assert seq.features.shape[0] == 64
    usage = codec.codebook_usage(trained, clips)
    assert 0.0 <= usage <= 1.0


def test_pretrain_is_seed_deterministic():
    clips = [sine_clip(220, seconds=0.75), sine_clip(440, seconds=0.75)]
    _, h1 = codec.pretrain_codec(clips, TINY_HIGH, steps=8, batch_size=2,
                                 crop_samples=1024, seed=7)
    _, h2 = codec.pretrain_codec(clips, TINY_HIGH, steps=8, batch_size=2,
                                 crop_samples=1024, seed=7)
    assert h1 == h2


def test_pretrain_divergence_aborts():
    huge = Waveform(np.full(4096, 1e30, dtype=np.float32), 22050)
    with pytest.raises(NumericsError):
        codec.pretrain_codec([huge], TINY_HIGH, steps=5, batch_size=1,
                             crop_samples=1024, seed=0)


def test_pretrain_rejects_bad_clips():
    with pytest.raises(DataError):
        codec.pretrain_codec([], TINY_HIGH, steps=1)
    with pytest.raises(DataError):
        codec.pretrain_codec([sine_clip(sr=16000)], TINY_HIGH, steps=1)


def test_finetune_zero_steps_is_identity():
    clips = [sine_clip(220, seconds=0.75)]
    trained = codec.CodecLevel(TINY_HIGH)
    before = {k: v.clone() for k, v in trained.decoder.state_dict().items()}
    out, history = codec.finetune_decoder(trained, clips, steps=0)
    assert out is trained and history == []
    for key, value in out.decoder.state_dict().items():
        np.testing.assert_array_equal(value.numpy(), before[key].numpy())


def test_finetune_updates_decoder_only():
    torch.manual_seed(0)
    clips = [sine_clip(220, seconds=0.75), sine_clip(330, seconds=0.75)]
    trained, _ = codec.pretrain_codec(clips, TINY_HIGH, steps=5, batch_size=2,
                                      crop_samples=2048, seed=0)
    enc_before = {k: v.clone() for k, v in trained.encoder.state_dict().items()}
    emb_before = trained.quantizer.embedding.clone()
    dec_before = {k: v.clone() for k, v in trained.decoder.state_dict().items()}
    tuned, history = codec.finetune_decoder(
        trained, clips, steps=3, batch_size=2, crop_samples=2048,
        width_divisor=16, seed=0, lr=1e-3)
    assert len(history) == 3
    for key, value in tuned.encoder.state_dict().items():
        np.testing.assert_array_equal(value.numpy(), enc_before[key].numpy())
    np.testing.assert_array_equal(tuned.quantizer.embedding.numpy(), emb_before.numpy())
    changed = any(
        not np.array_equal(value.numpy(), dec_before[key].numpy())
        for key, value in tuned.decoder.state_dict().items()
    )
    assert changed

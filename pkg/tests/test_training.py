"""Tests for the adversarial training loop and generation path."""

import json

import numpy as np
import pytest
import torch

from groovegan import data, training
from groovegan.codec import CodecConfig, CodecLevel
from groovegan.errors import ConfigError, DataError, NumericsError

TINY_CODEC = CodecConfig(level="high", strides=(4, 4, 8), channels=(4, 8, 8, 8),
                         codebook_size=16)


def tiny_train_config(**overrides):
    base = dict(level="high", max_steps=3, batch_size=2, d_layers=2,
                width_divisor=16, log_every=1, seed=0)
    base.update(overrides)
    return training.TrainConfig(**base)


@pytest.fixture(scope="module")
def toy_clips(tmp_path_factory):
    out = tmp_path_factory.mktemp("train_toy")
    path = data.synth_toy_dataset(out, n_songs=4, clips_per_song=2, seed=0,
                                  ratios={"train": 0.5, "test": 0.5})
    manifest = data.load_manifest(path)["train"]
    return data.load_split(manifest)


@pytest.fixture(scope="module")
def frozen_codec():
    torch.manual_seed(0)
    return CodecLevel(TINY_CODEC)


def test_train_smoke_and_history(toy_clips, frozen_codec):
    checkpoint, history = training.train_level(
        toy_clips, frozen_codec, tiny_train_config())
    assert len(history) == 3
    for record in history:
        assert set(record) >= {"step", "d_loss", "adversarial", "feature_matching",
                               "code", "waveform", "mel", "total"}
        assert all(np.isfinite(v) for v in record.values())
    assert checkpoint.step == 3
    assert checkpoint.metric_tail == history[-training.METRIC_TAIL:]
    assert checkpoint.opt_g_state is not None
    assert not checkpoint.build_generator().training


def test_zero_steps_returns_initial_state(toy_clips, frozen_codec, tmp_path):
    checkpoint, history = training.train_level(
        toy_clips, frozen_codec, tiny_train_config(max_steps=0),
        checkpoint_path=tmp_path / "init.npz")
    assert history == [] and checkpoint.step == 0
    loaded = training.load_checkpoint(tmp_path / "init.npz")
    assert loaded.step == 0
    torch.manual_seed(tiny_train_config().seed)
    # A checkpoint written without any optimizer step holds untrained weights.
    fresh = training.MusicGenerator(tiny_train_config().generator_config())
    for name, tensor in fresh.state_dict().items():
        assert torch.equal(tensor, loaded.generator_state[name]), name


def test_metrics_log_byte_identical_per_seed(toy_clips, frozen_codec, tmp_path):
    paths = [tmp_path / f"m{i}.jsonl" for i in range(3)]
    training.train_level(toy_clips, frozen_codec, tiny_train_config(seed=1),
                         metrics_path=paths[0])
    training.train_level(toy_clips, frozen_codec, tiny_train_config(seed=1),
                         metrics_path=paths[1])
    training.train_level(toy_clips, frozen_codec, tiny_train_config(seed=2),
                         metrics_path=paths[2])
    first, second, third = (p.read_bytes() for p in paths)
    assert first == second
    assert first != third
    lines = first.decode().strip().split("\n")
    assert len(lines) == 3
    assert json.loads(lines[0])["step"] == 1


def test_codec_untouched_by_training(toy_clips, frozen_codec):
    before = {
        name: tensor.detach().clone()
        for module in frozen_codec.modules().values()
        for name, tensor in module.state_dict().items()
    }
    training.train_level(toy_clips, frozen_codec, tiny_train_config())
    after = {
        name: tensor.detach()
        for module in frozen_codec.modules().values()
        for name, tensor in module.state_dict().items()
    }
    for name, tensor in before.items():
        assert torch.equal(tensor, after[name]), name


def test_generator_weights_actually_update(toy_clips, frozen_codec, tmp_path):
    p1, p3 = tmp_path / "s1.npz", tmp_path / "s3.npz"
    training.train_level(toy_clips, frozen_codec, tiny_train_config(max_steps=1),
                         checkpoint_path=p1)
    training.train_level(toy_clips, frozen_codec, tiny_train_config(max_steps=3),
                         checkpoint_path=p3)
    c1 = training.load_checkpoint(p1)
    c3 = training.load_checkpoint(p3)
    assert c1.step == 1 and c3.step == 3
    changed = [name for name, tensor in c1.generator_state.items()
               if tensor.dtype.is_floating_point
               and not torch.equal(tensor, c3.generator_state[name])]
    assert changed


def test_generate_music_shape_and_range(toy_clips, frozen_codec):
    checkpoint, _ = training.train_level(toy_clips, frozen_codec,
                                         tiny_train_config(max_steps=1))
    clip = toy_clips[0]
    wave = training.generate_music(checkpoint, frozen_codec, clip.motion,
                                   clip.visual)
    # Two seconds at hop 128: int(2 * 22050) // 128 = 344 frames, 344 * 128 samples.
    assert len(wave.samples) == 344 * 128 == 44032
    assert wave.sample_rate == 22050
    assert np.all(np.abs(wave.samples) <= 1.0)
    denoised = training.generate_music(checkpoint, frozen_codec, clip.motion,
                                       clip.visual, denoise=True)
    assert len(denoised.samples) == 44032


def test_generate_music_explicit_frames_and_validation(toy_clips, frozen_codec):
    checkpoint, _ = training.train_level(toy_clips, frozen_codec,
                                         tiny_train_config(max_steps=1))
    generator = checkpoint.build_generator()
    clip = toy_clips[0]
    wave = training.generate_music(generator, frozen_codec, clip.motion,
                                   clip.visual, target_frames=100)
    assert len(wave.samples) == 100 * 128
    with pytest.raises(DataError):
        training.generate_music(generator, frozen_codec, clip.motion[0],
                                clip.visual)
    with pytest.raises(DataError):
        training.generate_music(generator, frozen_codec, clip.motion,
                                clip.visual, target_frames=0)
    with pytest.raises(ConfigError):
        training.generate_music("nonsense", frozen_codec, clip.motion, clip.visual)


def test_checkpoint_round_trip_bit_exact(toy_clips, frozen_codec, tmp_path):
    config = tiny_train_config(max_steps=2)
    checkpoint, _ = training.train_level(toy_clips, frozen_codec, config,
                                         checkpoint_path=tmp_path / "g.npz")
    loaded = training.load_checkpoint(tmp_path / "g.npz")
    assert loaded.step == 2
    assert loaded.config == config
    assert loaded.metric_tail == checkpoint.metric_tail
    for name, tensor in checkpoint.generator_state.items():
        assert torch.equal(tensor, loaded.generator_state[name]), name
    for name, tensor in checkpoint.discriminator_state.items():
        assert torch.equal(tensor, loaded.discriminator_state[name]), name
    for idx, slot in checkpoint.opt_g_state["state"].items():
        for key, value in slot.items():
            assert torch.equal(value, loaded.opt_g_state["state"][idx][key])
    assert (checkpoint.opt_g_state["param_groups"]
            == loaded.opt_g_state["param_groups"])
    clip = toy_clips[0]
    a = training.generate_music(checkpoint, frozen_codec, clip.motion, clip.visual)
    b = training.generate_music(loaded, frozen_codec, clip.motion, clip.visual)
    assert np.array_equal(a.samples, b.samples)


def test_load_checkpoint_rejects_foreign_archives(frozen_codec, tmp_path):
    frozen_codec.save(tmp_path / "codec.npz")
    with pytest.raises(DataError, match="checkpoint"):
        training.load_checkpoint(tmp_path / "codec.npz")


def test_divergence_aborts_with_snapshot(toy_clips, frozen_codec, tmp_path):
    config = tiny_train_config(max_steps=20, g_lr=1e18, d_lr=1e18)
    with pytest.raises(NumericsError, match="diverged"):
        training.train_level(toy_clips, frozen_codec, config,
                             checkpoint_path=tmp_path / "last.npz")
    loaded = training.load_checkpoint(tmp_path / "last.npz")
    assert loaded.step >= 0
    for p in loaded.build_generator().parameters():
        assert torch.isfinite(p).all()


def test_ablation_paths_run(toy_clips, frozen_codec):
    for flags in ({"no_reshape": True}, {"no_motion": True}, {"no_visual": True},
                  {"no_scaling": True}, {"d_layers": 1}):
        _, history = training.train_level(
            toy_clips, frozen_codec, tiny_train_config(max_steps=1, **flags))
        assert len(history) == 1


def test_disabled_loss_terms_zero_in_log(toy_clips, frozen_codec):
    from groovegan.losses import LossWeights
    config = tiny_train_config(max_steps=1, weights=LossWeights(mel=0.0, waveform=0.0))
    _, history = training.train_level(toy_clips, frozen_codec, config)
    record = history[0]
    # The raw terms are still reported; the total excludes them.
    expected = (record["adversarial"] + 3.0 * record["feature_matching"]
                + 15.0 * record["code"])
    assert record["total"] == pytest.approx(expected, rel=1e-5)


def test_train_input_validation(toy_clips, frozen_codec):
    with pytest.raises(DataError):
        training.train_level([], frozen_codec, tiny_train_config())
    low_codec = CodecLevel(CodecConfig(level="low", strides=(4, 8),
                                       channels=(4, 8, 8), codebook_size=16))
    with pytest.raises(ConfigError, match="level"):
        training.train_level(toy_clips, low_codec, tiny_train_config())
    short = [toy_clips[0], toy_clips[1]]
    short[1] = data.LoadedClip(short[1].record,
                               type(short[1].audio)(short[1].audio.samples[:22050], 22050),
                               short[1].motion, short[1].visual)
    with pytest.raises(DataError, match="same length"):
        training.train_level(short, frozen_codec, tiny_train_config())
    with pytest.raises(DataError, match="configured for"):
        training.train_level(toy_clips, frozen_codec,
                             tiny_train_config(clip_seconds=3.0))


def test_train_config_validation():
    with pytest.raises(ConfigError):
        training.TrainConfig(batch_size=0)
    with pytest.raises(ConfigError):
        training.TrainConfig(g_lr=-1.0)
    with pytest.raises(ConfigError):
        training.TrainConfig(d_layers=4)
    with pytest.raises(ConfigError):
        training.TrainConfig(log_every=0)

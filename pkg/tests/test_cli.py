"""End-to-end tests of the command-line interface."""

import json

import numpy as np
import pytest

from groovegan import audio, cli
from groovegan.errors import ConfigError


# ---------------------------------------------------------------------------
# Config plumbing
# ---------------------------------------------------------------------------


def test_parse_value_types():
    assert cli.parse_value("3") == 3
    assert cli.parse_value("0.5") == 0.5
    assert cli.parse_value("true") is True
    assert cli.parse_value("false") is False
    assert cli.parse_value("high") == "high"
    assert cli.parse_value('"high"') == "high"


def test_config_file_parsing(tmp_path):
    path = tmp_path / "c.cfg"
    path.write_text("steps = 7\n# a comment\nlr = 0.01  # inline\n\nlevel = low\n")
    values = cli.read_config_file(path)
    assert values == {"steps": 7, "lr": 0.01, "level": "low"}
    path.write_text("steps 7\n")
    with pytest.raises(ConfigError, match="key = value"):
        cli.read_config_file(path)


def test_resolve_config_precedence(tmp_path):
    defaults = {"steps": 10, "lr": 0.1, "level": "high"}
    path = tmp_path / "c.cfg"
    path.write_text("steps = 5\nlr = 0.2\n")
    resolved = cli.resolve_config(defaults, path, ["steps=2"])
    assert resolved == {"steps": 2, "lr": 0.2, "level": "high"}


def test_resolve_config_rejects_unknown_keys(tmp_path):
    defaults = {"steps": 10}
    path = tmp_path / "c.cfg"
    path.write_text("step = 5\n")
    with pytest.raises(ConfigError, match="unknown config key"):
        cli.resolve_config(defaults, path, None)
    with pytest.raises(ConfigError, match="unknown config key"):
        cli.resolve_config(defaults, None, ["lr=0.1"])
    with pytest.raises(ConfigError, match="key=value"):
        cli.resolve_config(defaults, None, ["steps"])


# ---------------------------------------------------------------------------
# Full pipeline through main()
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """Run the whole toy workflow once; commands under test share its outputs."""
    root = tmp_path_factory.mktemp("cli")
    corpus = root / "corpus"
    assert cli.main(["make-toy-data", "--out", str(corpus),
                     "--songs", "4", "--clips-per-song", "2",
                     "--train-ratio", "0.5", "--val-ratio", "0.0"]) == 0
    codec_dir = root / "codec"
    assert cli.main(["pretrain-codec", "--data", str(corpus / "manifest.json"),
                     "--out", str(codec_dir),
                     "--set", "steps=3", "--set", "codebook_size=16",
                     "--set", "log_every=1"]) == 0
    train_dir = root / "train"
    assert cli.main(["train", "--data", str(corpus / "manifest.json"),
                     "--codec", str(codec_dir / "codec.npz"),
                     "--out", str(train_dir),
                     "--set", "max_steps=2", "--set", "width_divisor=16",
                     "--set", "d_layers=2", "--set", "batch_size=2",
                     "--set", "log_every=1"]) == 0
    return root, corpus, codec_dir, train_dir


def test_make_toy_data_outputs(pipeline):
    _, corpus, _, _ = pipeline
    manifest = json.loads((corpus / "manifest.json").read_text())
    assert set(manifest["splits"]) == {"train", "val", "test"}
    n = sum(len(v) for v in manifest["splits"].values())
    assert n == 8
    assert (corpus / "config.txt").exists()


def test_make_toy_data_genre_and_clip_counts(tmp_path):
    corpus = tmp_path / "four"
    assert cli.main(["make-toy-data", "--out", str(corpus),
                     "--songs", "8", "--genres", "4", "--clips", "20",
                     "--train-ratio", "0.5", "--val-ratio", "0.0"]) == 0
    manifest = json.loads((corpus / "manifest.json").read_text())
    records = [r for split in manifest["splits"].values() for r in split]
    assert len(records) == 20
    assert len({r["genre"] for r in records}) == 4


def test_pretrain_outputs(pipeline):
    _, _, codec_dir, _ = pipeline
    assert (codec_dir / "codec.npz").exists()
    config = (codec_dir / "config.txt").read_text()
    assert "steps = 3" in config
    assert "codebook_size = 16" in config
    lines = (codec_dir / "metrics.jsonl").read_text().strip().split("\n")
    assert len(lines) == 3
    assert json.loads(lines[0])["step"] == 1


def test_train_outputs(pipeline):
    _, _, _, train_dir = pipeline
    assert (train_dir / "generator.npz").exists()
    lines = (train_dir / "metrics.jsonl").read_text().strip().split("\n")
    assert len(lines) == 2
    assert "width_divisor = 16" in (train_dir / "config.txt").read_text()


def test_train_zero_steps_writes_initial_checkpoint(pipeline, tmp_path):
    from groovegan import training
    _, corpus, codec_dir, _ = pipeline
    out = tmp_path / "zero"
    assert cli.main(["train", "--data", str(corpus / "manifest.json"),
                     "--codec", str(codec_dir / "codec.npz"),
                     "--out", str(out),
                     "--set", "max_steps=0", "--set", "width_divisor=16",
                     "--set", "d_layers=2", "--set", "batch_size=2"]) == 0
    checkpoint = training.load_checkpoint(out / "generator.npz")
    assert checkpoint.step == 0
    assert (out / "metrics.jsonl").read_text() == ""


def test_default_output_root_env(pipeline, tmp_path, monkeypatch):
    monkeypatch.setenv(cli.OUT_ROOT_VAR, str(tmp_path / "runs"))
    assert cli.main(["make-toy-data", "--songs", "2", "--clips-per-song", "1",
                     "--train-ratio", "0.5", "--val-ratio", "0.0"]) == 0
    assert (tmp_path / "runs" / "make-toy-data" / "manifest.json").exists()
    monkeypatch.delenv(cli.OUT_ROOT_VAR)
    assert cli.main(["make-toy-data", "--songs", "2", "--clips-per-song", "1",
                     "--train-ratio", "0.5", "--val-ratio", "0.0"]) == 1


def test_generate_command(pipeline, tmp_path):
    _, corpus, codec_dir, train_dir = pipeline
    manifest = json.loads((corpus / "manifest.json").read_text())
    record = manifest["splits"]["train"][0]
    out = tmp_path / "gen"
    assert cli.main(["generate",
                     "--codec", str(codec_dir / "codec.npz"),
                     "--generator", str(train_dir / "generator.npz"),
                     "--motion", str(corpus / record["motion"]),
                     "--visual", str(corpus / record["visual"]),
                     "--out", str(out)]) == 0
    wave = audio.load_wav(out / "generated.wav")
    assert len(wave.samples) == 44032
    assert wave.sample_rate == 22050
    assert (out / "config.txt").exists()
    # Without visual features, zeros are substituted.
    assert cli.main(["generate",
                     "--codec", str(codec_dir / "codec.npz"),
                     "--generator", str(train_dir / "generator.npz"),
                     "--motion", str(corpus / record["motion"]),
                     "--out", str(tmp_path / "gen2"), "--denoise"]) == 0


def test_evaluate_command(pipeline, tmp_path):
    _, corpus, codec_dir, train_dir = pipeline
    out = tmp_path / "eval"
    assert cli.main(["evaluate", "--data", str(corpus / "manifest.json"),
                     "--codec", str(codec_dir / "codec.npz"),
                     "--generator", str(train_dir / "generator.npz"),
                     "--out", str(out)]) == 0
    report = json.loads((out / "report.json").read_text())
    assert report["n_clips"] == 4
    assert 0.0 <= report["genre_accuracy"] <= 1.0
    assert cli.main(["evaluate", "--data", str(corpus / "manifest.json"),
                     "--codec", str(codec_dir / "codec.npz"),
                     "--generator", str(train_dir / "generator.npz"),
                     "--out", str(tmp_path / "eval2"), "--random-embedder"]) == 0


def test_denoise_command(tmp_path):
    rng = np.random.default_rng(0)
    t = np.arange(22050) / 22050
    noisy = (0.5 * np.sin(2 * np.pi * 440 * t)
             + 0.01 * rng.standard_normal(len(t))).astype(np.float32)
    audio.save_wav(audio.Waveform(noisy, 22050), tmp_path / "in.wav")
    assert cli.main(["denoise", "--input", str(tmp_path / "in.wav"),
                     "--out", str(tmp_path / "out")]) == 0
    cleaned = audio.load_wav(tmp_path / "out" / "denoised.wav")
    assert len(cleaned.samples) == 22050


def test_exit_code_config_error(tmp_path, capsys):
    assert cli.main(["pretrain-codec", "--data", "x.json",
                     "--out", str(tmp_path), "--set", "nonsense=1"]) == 1
    assert "unknown config key" in capsys.readouterr().err
    assert cli.main(["no-such-command"]) == 1
    assert cli.main(["train", "--data", "x.json", "--out", str(tmp_path)]) == 1


def test_exit_code_data_error(pipeline, tmp_path, capsys):
    _, corpus, codec_dir, train_dir = pipeline
    assert cli.main(["pretrain-codec", "--data", str(tmp_path / "absent.json"),
                     "--out", str(tmp_path / "o")]) == 2
    assert "data error" in capsys.readouterr().err
    assert cli.main(["evaluate", "--data", str(corpus / "manifest.json"),
                     "--codec", str(codec_dir / "codec.npz"),
                     "--generator", str(train_dir / "generator.npz"),
                     "--out", str(tmp_path / "r"), "--split", "nope"]) == 2


def test_exit_code_numerics_error(pipeline, tmp_path):
    _, corpus, codec_dir, _ = pipeline
    assert cli.main(["train", "--data", str(corpus / "manifest.json"),
                     "--codec", str(codec_dir / "codec.npz"),
                     "--out", str(tmp_path / "t"),
                     "--set", "max_steps=5", "--set", "g_lr=1e18",
                     "--set", "d_lr=1e18",
                     "--set", "width_divisor=16", "--set", "d_layers=2",
                     "--set", "batch_size=2"]) == 3


def test_train_ablation_flags(pipeline, tmp_path):
    _, corpus, codec_dir, _ = pipeline
    for flag in ("no_motion", "no_visual", "no_scaling", "no_reshape", "no_mel"):
        out = tmp_path / flag
        assert cli.main(["train", "--data", str(corpus / "manifest.json"),
                         "--codec", str(codec_dir / "codec.npz"),
                         "--out", str(out),
                         "--set", "max_steps=1", "--set", f"{flag}=true",
                         "--set", "width_divisor=16", "--set", "d_layers=2",
                         "--set", "batch_size=2"]) == 0
        assert f"{flag} = true" in (out / "config.txt").read_text()

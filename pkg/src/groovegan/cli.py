"""Command-line interface.

Subcommands cover the whole desk-scale workflow::

    groovegan make-toy-data   --out corpus/
    groovegan pretrain-codec  --data corpus/manifest.json --out run/codec/
    groovegan train           --data corpus/manifest.json --codec run/codec/codec.npz --out run/gen/
    groovegan generate        --codec ... --generator ... --motion m.json --out out/
    groovegan evaluate        --data ... --codec ... --generator ... --out out/
    groovegan denoise         --input in.wav --out out/

Numeric settings come from flat ``key = value`` config files plus
``--set key=value`` overrides; unknown keys are rejected. Every run
writes the resolved configuration to ``config.txt`` in its output
directory; progress goes to stderr and metrics go to files, so runs with
the same seed produce byte-identical logs. ``--out`` may be omitted when
``GROOVEGAN_OUT`` names a default output root. Exit codes: 0 success,
1 configuration errors, 2 data/file errors, 3 numerical failures.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import audio as audio_mod
from . import data as data_mod
from . import evaluation, training
from .codec import CodecConfig, CodecLevel, finetune_decoder, pretrain_codec
from .errors import ConfigError, DataError, NumericsError
from .losses import LossWeights

OUT_ROOT_VAR = "GROOVEGAN_OUT"

CODEC_PRESETS = {
    "full": {},
    "tiny": {"high": {"strides": (4, 4, 8), "channels": (16, 32, 32, 32)},
             "low": {"strides": (4, 8), "channels": (16, 32, 32)}},
}


def _log(message: str) -> None:
    print(message, file=sys.stderr)


# ---------------------------------------------------------------------------
# Flat key=value configuration
# ---------------------------------------------------------------------------


def parse_value(text: str):
    """Interpret a config value: JSON scalars first, bare strings otherwise."""
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def read_config_file(path) -> dict:
    """Read ``key = value`` lines; ``#`` starts a comment."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    values = {}
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        values[key.strip()] = parse_value(value.strip())
    return values


def resolve_config(defaults: dict, config_path, sets) -> dict:
    """Layer defaults, a config file, and ``--set`` overrides; reject unknowns."""
    resolved = dict(defaults)

    def apply(key, value, source):
        if key not in defaults:
            raise ConfigError(f"unknown config key {key!r} (from {source}); "
                              f"valid keys: {', '.join(sorted(defaults))}")
        resolved[key] = value

    if config_path is not None:
        for key, value in read_config_file(config_path).items():
            apply(key, value, config_path)
    for item in sets or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, _, value = item.partition("=")
        apply(key.strip(), parse_value(value.strip()), "--set")
    return resolved


def echo_config(out_dir: Path, config: dict) -> Path:
    """Write the resolved configuration next to the run outputs."""
    lines = [f"{key} = {json.dumps(config[key])}" for key in sorted(config)]
    path = out_dir / "config.txt"
    path.write_text("\n".join(lines) + "\n")
    return path


def _require_bool(config: dict, key: str) -> bool:
    value = config[key]
    if not isinstance(value, bool):
        raise ConfigError(f"config key {key!r} must be true or false, got {value!r}")
    return value


def _out_dir(args) -> Path:
    if args.out is not None:
        out = Path(args.out)
    else:
        root = os.environ.get(OUT_ROOT_VAR)
        if not root:
            raise ConfigError(
                f"--out is required unless {OUT_ROOT_VAR} names an output root")
        out = Path(root) / args.command
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_split(manifests: dict, split: str):
    if split not in manifests:
        raise DataError(f"manifest has no split {split!r}; "
                        f"available: {', '.join(sorted(manifests))}")
    return manifests[split]


# ---------------------------------------------------------------------------
# Subcommand handlers
# ---------------------------------------------------------------------------


def cmd_make_toy_data(args) -> int:
    out = _out_dir(args)
    ratios = {"train": args.train_ratio,
              "val": args.val_ratio,
              "test": 1.0 - args.train_ratio - args.val_ratio}
    if ratios["test"] < -1e-9:
        raise ConfigError("train and val ratios exceed 1")
    ratios = {k: max(v, 0.0) for k, v in ratios.items()}
    echo_config(out, {
        "songs": args.songs, "clips_per_song": args.clips_per_song,
        "clips": args.clips, "genres": args.genres,
        "clip_seconds": args.clip_seconds, "train_ratio": args.train_ratio,
        "val_ratio": args.val_ratio, "seed": args.seed,
    })
    manifest = data_mod.synth_toy_dataset(
        out, n_songs=args.songs, clips_per_song=args.clips_per_song,
        clip_seconds=args.clip_seconds, seed=args.seed, ratios=ratios,
        genres=args.genres, total_clips=args.clips)
    _log(f"wrote {manifest}")
    return 0


PRETRAIN_DEFAULTS = {
    "level": "high", "preset": "tiny", "codebook_size": 64,
    "steps": 500, "batch_size": 8, "crop_samples": 8192,
    "lr": 1e-3, "seed": 0, "log_every": 50, "split": "train",
    "finetune_steps": 0, "finetune_lr": 1e-5, "no_finetune": False,
}


def cmd_pretrain_codec(args) -> int:
    config = resolve_config(PRETRAIN_DEFAULTS, args.config, args.set)
    if config["preset"] not in CODEC_PRESETS:
        raise ConfigError(f"unknown preset {config['preset']!r}; "
                          f"choose from {', '.join(sorted(CODEC_PRESETS))}")
    out = _out_dir(args)
    echo_config(out, config)
    manifests = data_mod.load_manifest(args.data)
    manifest = _load_split(manifests, config["split"])
    clips = [audio_mod.load_wav(manifest.path(r.audio)) for r in manifest.records]
    overrides = dict(CODEC_PRESETS[config["preset"]].get(config["level"], {}))
    overrides["codebook_size"] = config["codebook_size"]
    codec_config = CodecConfig.for_level(config["level"], **overrides)
    codec, history = pretrain_codec(
        clips, codec_config, steps=config["steps"], batch_size=config["batch_size"],
        crop_samples=config["crop_samples"], lr=config["lr"], seed=config["seed"],
        log_every=config["log_every"],
        logger=lambda r: _log(f"step {r['step']}: recon_l1={r['recon_l1']:.4f}"))
    finetune_steps = 0 if _require_bool(config, "no_finetune") else config["finetune_steps"]
    if finetune_steps:
        codec, _ = finetune_decoder(codec, clips, finetune_steps,
                                    lr=config["finetune_lr"], seed=config["seed"])
    codec.save(out / "codec.npz")
    (out / "metrics.jsonl").write_text(
        "".join(json.dumps(record) + "\n" for record in history))
    _log(f"wrote {out / 'codec.npz'}")
    return 0


TRAIN_DEFAULTS = {
    "level": "high", "clip_seconds": 2.0, "max_steps": 500, "batch_size": 16,
    "g_lr": 1e-4, "d_lr": 1e-4, "grad_clip": 10.0, "seed": 0,
    "d_layers": 3, "width_divisor": 1, "log_every": 10, "split": "train",
    "no_motion": False, "no_visual": False, "no_scaling": False,
    "no_reshape": False, "no_adversarial": False, "no_feature_matching": False,
    "no_code": False, "no_waveform": False, "no_mel": False,
}


def _train_config_from(config: dict) -> training.TrainConfig:
    base = LossWeights()
    weights = LossWeights(
        adversarial=0.0 if _require_bool(config, "no_adversarial") else base.adversarial,
        feature_matching=(0.0 if _require_bool(config, "no_feature_matching")
                          else base.feature_matching),
        code=0.0 if _require_bool(config, "no_code") else base.code,
        waveform=0.0 if _require_bool(config, "no_waveform") else base.waveform,
        mel=0.0 if _require_bool(config, "no_mel") else base.mel,
    )
    return training.TrainConfig(
        level=config["level"], clip_seconds=config["clip_seconds"],
        max_steps=config["max_steps"], batch_size=config["batch_size"],
        g_lr=config["g_lr"], d_lr=config["d_lr"], grad_clip=config["grad_clip"],
        seed=config["seed"], d_layers=config["d_layers"],
        width_divisor=config["width_divisor"], log_every=config["log_every"],
        no_motion=_require_bool(config, "no_motion"),
        no_visual=_require_bool(config, "no_visual"),
        no_scaling=_require_bool(config, "no_scaling"),
        no_reshape=_require_bool(config, "no_reshape"),
        weights=weights,
    )


def cmd_train(args) -> int:
    config = resolve_config(TRAIN_DEFAULTS, args.config, args.set)
    out = _out_dir(args)
    echo_config(out, config)
    manifests = data_mod.load_manifest(args.data)
    manifest = _load_split(manifests, config["split"])
    clips = data_mod.load_split(manifest, allow_missing_visual=True)
    codec = CodecLevel.load(args.codec)
    train_config = _train_config_from(config)
    checkpoint, history = training.train_level(
        clips, codec, train_config,
        metrics_path=out / "metrics.jsonl",
        checkpoint_path=out / "generator.npz",
        logger=lambda r: (_log(f"step {r['step']}: d={r['d_loss']:.4f} "
                               f"g={r['total']:.4f}")
                          if r["step"] % train_config.log_every == 0 else None))
    _log(f"wrote {out / 'generator.npz'} at step {checkpoint.step}")
    return 0


def cmd_generate(args) -> int:
    out = _out_dir(args)
    echo_config(out, {
        "codec": str(args.codec), "generator": str(args.generator),
        "motion": str(args.motion), "visual": args.visual and str(args.visual),
        "denoise": args.denoise,
    })
    codec = CodecLevel.load(args.codec)
    checkpoint = training.load_checkpoint(args.generator)
    motion = data_mod.load_motion(args.motion)
    if motion.shape[0] != checkpoint.config.motion_channels:
        raise DataError(
            f"motion has {motion.shape[0]} channels; the generator was trained "
            f"with {checkpoint.config.motion_channels}")
    if args.visual is not None:
        visual = data_mod.load_visual_features(args.visual)
    else:
        windows = max(1, int(round(motion.shape[1] / data_mod.MOTION_FPS
                                   / data_mod.VISUAL_WINDOW_SECONDS)))
        visual = np.zeros((data_mod.VISUAL_DIM, windows), dtype=np.float32)
    wave = training.generate_music(checkpoint, codec, motion, visual,
                                   denoise=args.denoise)
    target = out / "generated.wav"
    audio_mod.save_wav(wave, target)
    _log(f"wrote {target} ({len(wave.samples)} samples at {wave.sample_rate} Hz)")
    return 0


def cmd_evaluate(args) -> int:
    out = _out_dir(args)
    echo_config(out, {
        "data": str(args.data), "codec": str(args.codec),
        "generator": str(args.generator), "split": args.split,
        "denoise": args.denoise, "random_embedder": args.random_embedder,
    })
    codec = CodecLevel.load(args.codec)
    checkpoint = training.load_checkpoint(args.generator)
    manifests = data_mod.load_manifest(args.data)
    manifest = _load_split(manifests, args.split)
    embedder = evaluation.RandomEmbedder() if args.random_embedder else None
    report = evaluation.evaluate_run(checkpoint, codec, manifest,
                                     out_path=out / "report.json",
                                     denoise=args.denoise, embedder=embedder)
    _log(f"clips={report['n_clips']} beat_coverage={report['beat_coverage']:.3f} "
         f"beat_hit={report['beat_hit']:.3f} "
         f"genre_accuracy={report['genre_accuracy']:.3f}")
    return 0


def cmd_denoise(args) -> int:
    out = _out_dir(args)
    echo_config(out, {"input": str(args.input)})
    wave = audio_mod.load_wav(args.input)
    cleaned = audio_mod.spectral_denoise(wave)
    target = out / "denoised.wav"
    audio_mod.save_wav(cleaned, target)
    _log(f"wrote {target}")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="groovegan",
                     description="Generate music from dance motion and video features.")
    sub = parser.add_subparsers(dest="command", required=True)

    toy = sub.add_parser("make-toy-data", help="synthesize a toy corpus")
    toy.add_argument("--out", default=None)
    toy.add_argument("--songs", type=int, default=10)
    toy.add_argument("--clips-per-song", type=int, default=4)
    toy.add_argument("--clips", type=int, default=None,
                     help="total clip count, spread across songs")
    toy.add_argument("--genres", type=int, default=2)
    toy.add_argument("--clip-seconds", type=float, default=2.0)
    toy.add_argument("--train-ratio", type=float, default=0.7)
    toy.add_argument("--val-ratio", type=float, default=0.15)
    toy.add_argument("--seed", type=int, default=0)
    toy.set_defaults(func=cmd_make_toy_data)

    def run_command(name, help_text, handler, needs_codec=False):
        cmd = sub.add_parser(name, help=help_text)
        cmd.add_argument("--data", required=True)
        cmd.add_argument("--out", default=None)
        cmd.add_argument("--config", default=None)
        cmd.add_argument("--set", action="append", metavar="KEY=VALUE")
        if needs_codec:
            cmd.add_argument("--codec", required=True)
        cmd.set_defaults(func=handler)
        return cmd

    run_command("pretrain-codec", "train the feature codec", cmd_pretrain_codec)
    run_command("train", "train the feature generator", cmd_train, needs_codec=True)

    gen = sub.add_parser("generate", help="generate a waveform from one clip's inputs")
    gen.add_argument("--codec", required=True)
    gen.add_argument("--generator", required=True)
    gen.add_argument("--motion", required=True)
    gen.add_argument("--visual", default=None)
    gen.add_argument("--out", default=None)
    gen.add_argument("--denoise", action="store_true")
    gen.set_defaults(func=cmd_generate)

    ev = sub.add_parser("evaluate", help="score generations against a test split")
    ev.add_argument("--data", required=True)
    ev.add_argument("--codec", required=True)
    ev.add_argument("--generator", required=True)
    ev.add_argument("--out", default=None)
    ev.add_argument("--split", default="test")
    ev.add_argument("--denoise", action="store_true")
    ev.add_argument("--random-embedder", action="store_true",
                    help="score with a content-blind embedder (chance baseline)")
    ev.set_defaults(func=cmd_evaluate)

    dn = sub.add_parser("denoise", help="spectrally denoise a WAV file")
    dn.add_argument("--input", required=True)
    dn.add_argument("--out", default=None)
    dn.set_defaults(func=cmd_denoise)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 1
    except (DataError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NumericsError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())

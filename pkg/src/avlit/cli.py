"""``avlit`` command line: corpus synthesis, training, separation and profiling.

Settings come from an optional ``key = value`` run file (``--config``) and are then
overridden by flags. Run-file keys are sectioned: ``model.*`` (ModelConfig),
``train.*`` (TrainConfig), ``synth.*`` (MixSpec) plus a few top-level keys, e.g.::

    model.n_audio = 4
    model.fusion = 0,2
    train.lr = 0.002
    synth.speech_snr = -5.0,5.0
    val_fraction = 0.1
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional, Sequence

import numpy as np

from . import kvfile
from .afrcnn import ConfigError
from .datagen import MixSpec, frames_read, load_corpus, wav_read, wav_write, write_corpus
from .model import (
    AVLIT,
    FUSION_PRESETS,
    PRESETS,
    CheckpointError,
    ModelConfig,
    load_model,
    pretrain_video_encoder,
    save_model,
)
from .objectives import SeparationData, TrainConfig, TrainingDiverged, si_sdr_improvement, train
from .profiler import cost_report, time_inference

log = logging.getLogger("avlit")

SECTIONS = {"model": ModelConfig, "train": TrainConfig, "synth": MixSpec}


class UsageError(Exception):
    """Bad flags or inputs; reported on stderr with exit status 2."""


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    synth: MixSpec = field(default_factory=MixSpec)
    data: str = ""
    val_data: str = ""
    out: str = ""
    val_fraction: float = 0.1
    pretrain_steps: int = 300

    def to_text(self) -> str:
        lines = []
        for section in SECTIONS:
            values = kvfile.dataclass_to_dict(getattr(self, section))
            lines.append(kvfile.dump({f"{section}.{k}": v for k, v in values.items()}))
        top = {f.name: getattr(self, f.name) for f in dataclasses.fields(self) if f.name not in SECTIONS}
        lines.append(kvfile.dump(top))
        return "".join(lines)

    @classmethod
    def from_text(cls, text: str, source: str = "<run config>") -> "RunConfig":
        grouped: Dict[str, list] = {s: [] for s in SECTIONS}
        top = []
        for key, raw, lineno in kvfile.parse(text, source):
            section, dot, name = key.partition(".")
            if dot and section in SECTIONS:
                grouped[section].append((name, raw, lineno))
            elif dot:
                raise kvfile.ConfigFileError(f"unknown section {section!r} in key {key!r}", lineno, source)
            else:
                top.append((key, raw, lineno))
        return build_run_config(grouped, top, source)


def build_run_config(grouped, top, source="<run config>", base: Optional[RunConfig] = None) -> RunConfig:
    """Apply parsed ``(key, raw, line)`` items onto ``base``; errors carry the line number."""
    base = base or RunConfig()
    parts = {}
    for section, cls in SECTIONS.items():
        items = grouped.get(section, [])
        if section == "synth":
            # an empty noise range means "no noise"
            none_noise = [it for it in items if it[0] == "noise_snr" and not it[1].strip()]
            items = [it for it in items if it not in none_noise]
        try:
            obj = kvfile.dataclass_from_items(cls, items, source, getattr(base, section))
            if section == "synth" and none_noise:
                obj = dataclasses.replace(obj, noise_snr=None)
        except (ValueError, ConfigError) as exc:
            if isinstance(exc, kvfile.ConfigFileError):
                raise
            line = items[0][2] if items else 0
            raise kvfile.ConfigFileError(str(exc), line, source) from None
        parts[section] = obj
    top_fields = {f.name: f for f in dataclasses.fields(RunConfig) if f.name not in SECTIONS}
    updates = {}
    for key, raw, lineno in top:
        if key not in top_fields:
            raise kvfile.ConfigFileError(f"unknown key {key!r}", lineno, source)
        try:
            updates[key] = kvfile.parse_value(raw, getattr(base, key), key)
        except ValueError as exc:
            raise kvfile.ConfigFileError(str(exc), lineno, source) from None
    return dataclasses.replace(base, **parts, **updates)


def load_run_config(path: Optional[str]) -> RunConfig:
    if not path:
        return RunConfig()
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config file not found: {path}")
    return RunConfig.from_text(p.read_text(encoding="utf-8"), str(p))


def parse_range(text: str, name: str):
    if text.strip().lower() == "none":
        return None
    try:
        lo, hi = (float(v) for v in text.split(":"))
    except ValueError:
        raise UsageError(f"{name}: expected lo:hi, got {text!r}") from None
    if lo > hi:
        raise UsageError(f"{name}: lower bound {lo} exceeds upper bound {hi}")
    return (lo, hi)


def parse_fusion(text: str, n_audio: int):
    if text.lower() in FUSION_PRESETS:
        return FUSION_PRESETS[text.lower()](n_audio)
    try:
        return tuple(int(p) for p in text.split(",") if p.strip())
    except ValueError:
        raise UsageError(f"--fusion: expected early|middle|late|all or a list like 0,2, got {text!r}") from None


def _atomic_write(path: Path, write) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    os.close(fd)
    try:
        write(tmp)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def apply_model_flags(cfg: ModelConfig, args) -> ModelConfig:
    changes = {}
    if getattr(args, "preset", None):
        changes.update(PRESETS[args.preset])
    if getattr(args, "n_audio", None) is not None:
        changes["n_audio"] = args.n_audio
        changes.setdefault("n_video", args.n_audio // 2)
        changes.setdefault("fusion", tuple(p for p in cfg.fusion if p < args.n_audio) or (0,))
    if getattr(args, "n_video", None) is not None:
        changes["n_video"] = args.n_video
    if getattr(args, "ca", None) is not None:
        changes["audio_channels"] = args.ca
    if getattr(args, "cv", None) is not None:
        changes["video_channels"] = args.cv
    if getattr(args, "fusion", None) is not None:
        changes["fusion"] = parse_fusion(args.fusion, changes.get("n_audio", cfg.n_audio))
    return cfg.replace(**changes)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    run = load_run_config(args.config)
    spec = run.synth
    changes = {}
    if args.duration is not None:
        changes["duration"] = args.duration
    if args.speakers is not None:
        changes["n_speakers"] = args.speakers
    if args.speech_snr is not None:
        rng = parse_range(args.speech_snr, "--speech-snr")
        if rng is None:
            raise UsageError("--speech-snr cannot be 'none'")
        changes["speech_snr"] = rng
    if args.noise_snr is not None:
        changes["noise_snr"] = parse_range(args.noise_snr, "--noise-snr")
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.sample_rate is not None:
        changes["sample_rate"] = args.sample_rate
    try:
        spec = dataclasses.replace(spec, **changes)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    out = args.out or run.out
    if not out:
        raise UsageError("--out is required")
    if args.items < 1:
        raise UsageError("--items must be >= 1")
    manifest = write_corpus(out, spec, args.items)
    hours = args.items * spec.duration / 3600.0
    noise = "none" if spec.noise_snr is None else f"{spec.noise_snr[0]:g}:{spec.noise_snr[1]:g} dB"
    print(f"wrote {args.items} items ({hours:.4f} h, {spec.n_speakers} speakers, {spec.sample_rate} Hz) to {manifest}")
    print(f"speech SNR {spec.speech_snr[0]:g}:{spec.speech_snr[1]:g} dB, noise SNR {noise}, seed {spec.seed}")
    return 0


def _load_split(manifest: str, n_speakers: int):
    if not Path(manifest).is_file():
        raise UsageError(f"manifest not found: {manifest}")
    return load_corpus(manifest, n_speakers)


def train_from_corpora(run: RunConfig, train_set, val_set, out=None, progress=None):
    """Build the model for ``run``, fit the frame autoencoder, embed the video and train.

    ``train_set`` and ``val_set`` are :class:`~avlit.datagen.Corpus` tuples (or anything
    with ``mixtures``, ``sources`` and ``frames``). Returns ``(model, TrainResult)``.
    """
    cfg, tcfg = run.model, run.train
    model = AVLIT(cfg, seed=tcfg.seed)
    if tcfg.pit:
        train_data = SeparationData(train_set.mixtures, train_set.sources, None)
        val_data = SeparationData(val_set.mixtures, val_set.sources, None)
    else:
        if run.pretrain_steps > 0:
            frames = train_set.frames[:, :, ::5].reshape(-1, cfg.frame_size, cfg.frame_size)
            trace = pretrain_video_encoder(model, frames, steps=run.pretrain_steps, seed=tcfg.seed)
            log.info("frame autoencoder: reconstruction MSE %.4f -> %.4f", trace[0], trace[-1])
        train_data = SeparationData(train_set.mixtures, train_set.sources, model.encode_video(train_set.frames))
        val_data = SeparationData(val_set.mixtures, val_set.sources, model.encode_video(val_set.frames))
    result = train(model, train_data, val_data, tcfg, out_dir=out, progress=progress)
    return model, result


def _print_epoch(tr_row, va_row):
    print(
        f"epoch {tr_row['epoch']:3d}  lr {tr_row['lr']:.2e}  train loss {tr_row['loss']:8.3f}"
        f"  SI-SDRi train {tr_row['si_sdri']:6.2f} dB  val {va_row['si_sdri']:6.2f} dB",
        flush=True,
    )


def cmd_train(args) -> int:
    run = load_run_config(args.config)
    model_cfg = apply_model_flags(run.model, args)
    tcfg = run.train
    if args.epochs is not None:
        tcfg = dataclasses.replace(tcfg, epochs=args.epochs)
    if args.audio_only:
        tcfg = dataclasses.replace(tcfg, pit=True)
    if args.seed is not None:
        tcfg = dataclasses.replace(tcfg, seed=args.seed)
    data = args.data or run.data
    out = args.out or run.out
    if not data:
        raise UsageError("--data is required")
    if not out:
        raise UsageError("--out is required")
    out = Path(out)
    corpus = _load_split(data, model_cfg.n_speakers)
    if corpus.sample_rate != model_cfg.sample_rate:
        print(f"using the corpus sample rate {corpus.sample_rate} Hz", file=sys.stderr)
        model_cfg = model_cfg.replace(sample_rate=corpus.sample_rate)
    run = dataclasses.replace(run, model=model_cfg, train=tcfg, data=str(data), out=str(out))
    if run.val_data:
        tr, val = corpus, _load_split(run.val_data, model_cfg.n_speakers)
    else:
        n_val = int(round(len(corpus.mixtures) * run.val_fraction))
        if not 0 < n_val < len(corpus.mixtures):
            raise UsageError(f"val_fraction {run.val_fraction} leaves no training or no validation items")
        cut = len(corpus.mixtures) - n_val
        tr = corpus._replace(mixtures=corpus.mixtures[:cut], sources=corpus.sources[:cut], frames=corpus.frames[:cut])
        val = corpus._replace(mixtures=corpus.mixtures[cut:], sources=corpus.sources[cut:], frames=corpus.frames[cut:])
    out.mkdir(parents=True, exist_ok=True)
    (out / "run.cfg").write_text(run.to_text(), encoding="utf-8")
    try:
        model, result = train_from_corpora(run, tr, val, out, progress=_print_epoch)
    except TrainingDiverged as exc:
        print(f"error: {exc}; state saved to {out / 'diverged.avlt'}", file=sys.stderr)
        return 1
    _atomic_write(out / "last.avlt", lambda p: save_model(model, p, extra=f"epoch={tcfg.epochs - 1}\n"))
    if result.best_epoch >= 0:
        print(f"best val SI-SDRi {result.best_si_sdri:.2f} dB at epoch {result.best_epoch}; checkpoint {out / 'best.avlt'}")
    return 0


def cmd_separate(args) -> int:
    try:
        model = load_model(args.model)
    except FileNotFoundError:
        raise UsageError(f"model not found: {args.model}") from None
    cfg = model.config
    mix, sr = wav_read(args.mix)
    if mix.ndim != 1:
        raise UsageError(f"{args.mix}: expected a mono mixture")
    if sr != cfg.sample_rate:
        raise UsageError(f"{args.mix}: sample rate {sr} Hz, model expects {cfg.sample_rate} Hz")
    frames = None
    if args.video:
        if len(args.video) != cfg.n_speakers:
            raise UsageError(f"model separates {cfg.n_speakers} speakers, got {len(args.video)} --video files")
        clips = [frames_read(p, (cfg.frame_size, cfg.frame_size)) for p in args.video]
        if len({len(c) for c in clips}) != 1:
            raise UsageError("video files have different frame counts")
        frames = np.stack(clips)
    try:
        est = model.separate(mix, frames)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    out = Path(args.out)
    paths = []
    for i, e in enumerate(est, 1):
        path = out / f"s{i}.wav"
        _atomic_write(path, lambda p, e=e: wav_write(p, e, sr))
        paths.append(path)
    print("wrote " + " ".join(str(p) for p in paths))
    if args.refs:
        if len(args.refs) != len(est):
            raise UsageError(f"expected {len(est)} --refs files, got {len(args.refs)}")
        refs = np.stack([wav_read(p)[0] for p in args.refs])
        if refs.shape[-1] != mix.shape[-1]:
            raise UsageError("reference length differs from the mixture")
        # score what was written, so the number matches a later re-read of the files
        written = np.stack([wav_read(p)[0] for p in paths])
        for i in range(len(est)):
            gain = si_sdr_improvement(written[i : i + 1], refs[i : i + 1], mix)
            print(f"s{i + 1}: SI-SDRi {gain:.4f} dB")
        print(f"mean SI-SDRi {si_sdr_improvement(written, refs, mix):.4f} dB")
    return 0


def cmd_profile(args) -> int:
    run = load_run_config(args.config)
    base = apply_model_flags(run.model, args)
    if args.seconds <= 0:
        raise UsageError("--seconds must be positive")
    report = cost_report(base, args.seconds)
    print(report.format_table())
    if args.csv:
        _atomic_write(Path(args.csv), lambda p: Path(p).write_text(report.to_csv(), encoding="utf-8"))
    # weight sharing and linear cost across the presets
    totals = {}
    for name, preset in PRESETS.items():
        r = cost_report(base.replace(**preset), args.seconds)
        totals[name] = (r.total_params, r.total_macs)
        print(f"{name}: {r.total_params:,} params, {r.total_macs / 1e9:.3f} GMACs")
    params = {p for p, _ in totals.values()}
    m2, m4, m8 = (totals[k][1] for k in ("avlit-2", "avlit-4", "avlit-8"))
    affine = (m8 - m4) == 2 * (m4 - m2)
    print(f"shared weights: {'ok' if len(params) == 1 else 'FAILED'}; "
          f"MACs affine in N_A: {'ok' if affine else 'FAILED'} ({(m4 - m2) / 1e9:.3f} / {(m8 - m4) / 1e9:.3f} G)")
    if args.trials > 0:
        model = AVLIT(base)
        mean, std = time_inference(model, args.seconds, args.trials)
        print(f"inference: {mean * 1000:.1f} ms +- {std * 1000:.1f} ms over {args.trials} trials (1 thread)")
    return 0 if affine and len(params) == 1 else 1


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def _model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--preset", choices=sorted(PRESETS), help="sets N_A, N_V and fusion positions")
    p.add_argument("--n-audio", type=int, help="audio-branch iterations N_A")
    p.add_argument("--n-video", type=int, help="video-branch iterations N_V")
    p.add_argument("--fusion", help="early|middle|late|all or explicit positions such as 0,2")
    p.add_argument("--ca", type=int, help="audio block channels C_A")
    p.add_argument("--cv", type=int, help="video block channels C_V")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="avlit", description=__doc__.split("\n\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic audio-visual corpus")
    p.add_argument("--config")
    p.add_argument("--out")
    p.add_argument("--items", type=int, default=100)
    p.add_argument("--duration", type=float)
    p.add_argument("--speakers", type=int)
    p.add_argument("--speech-snr", help="lo:hi in dB (default -5:5)")
    p.add_argument("--noise-snr", help="lo:hi in dB, or none (default -6:3)")
    p.add_argument("--sample-rate", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model on a corpus manifest")
    p.add_argument("--config")
    p.add_argument("--data", help="manifest.tsv of the training corpus")
    p.add_argument("--out")
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--audio-only", action="store_true", help="no video input, permutation-invariant loss")
    _model_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("separate", help="separate one mixture with a trained checkpoint")
    p.add_argument("--model", required=True)
    p.add_argument("--mix", required=True)
    p.add_argument("--video", nargs="+", help="one AVFR file per speaker, in output order")
    p.add_argument("--refs", nargs="+", help="reference WAVs for an SI-SDRi printout")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_separate)

    p = sub.add_parser("profile", help="MACs, parameters, activation sizes and timing")
    p.add_argument("--config")
    p.add_argument("--seconds", type=float, default=2.0)
    p.add_argument("--trials", type=int, default=10, help="timed inference runs (0 skips timing)")
    p.add_argument("--csv", help="also write the per-layer CostReport CSV here")
    _model_flags(p)
    p.set_defaults(func=cmd_profile)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError, kvfile.ConfigFileError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())

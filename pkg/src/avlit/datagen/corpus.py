"""Corpus generation to memory or disk, and loading a corpus back from its manifest."""

from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import List, NamedTuple, Optional

import numpy as np

from .fileio import (
    FLOAT32,
    ManifestEntry,
    format_manifest_line,
    frames_read,
    frames_write,
    read_manifest,
    wav_read,
    wav_write,
)
from .synth import Mixture, MixSpec, synth_mixture


def worker_count(default: int = 1) -> int:
    """Worker cap from ``AVLIT_THREADS`` (at least 1)."""
    try:
        return max(1, int(os.environ.get("AVLIT_THREADS", default)))
    except ValueError:
        return default


def generate(spec: MixSpec, n_items: int, start: int = 0, workers: Optional[int] = None) -> List[Mixture]:
    """Items ``start .. start + n_items - 1``; each item has its own derived seed, so the
    result does not depend on ``workers``."""
    workers = worker_count() if workers is None else workers
    items = range(start, start + n_items)
    if workers <= 1:
        return [synth_mixture(spec, i) for i in items]
    with ThreadPoolExecutor(workers) as pool:
        return list(pool.map(lambda i: synth_mixture(spec, i), items))


class Corpus(NamedTuple):
    mixtures: np.ndarray  # (N, T)
    sources: np.ndarray  # (N, M, T)
    noise: np.ndarray  # (N, T)
    frames: np.ndarray  # (N, M, F, 64, 64)
    sample_rate: int


def stack(items: List[Mixture]) -> Corpus:
    return Corpus(
        np.stack([m.mixture for m in items]),
        np.stack([m.sources.sources for m in items]),
        np.stack([m.sources.noise for m in items]),
        np.stack([m.video.frames for m in items]),
        items[0].sources.sample_rate,
    )


def write_item(out_dir: Path, index: int, mix: Mixture, fmt: str = FLOAT32) -> ManifestEntry:
    name = f"item{index:05d}"
    d = out_dir / name
    d.mkdir(parents=True, exist_ok=True)
    sr = mix.sources.sample_rate
    wav_write(d / "mixture.wav", mix.mixture, sr, fmt)
    srcs = []
    for i, s in enumerate(mix.sources.sources, 1):
        wav_write(d / f"s{i}.wav", s, sr, fmt)
        srcs.append(f"{name}/s{i}.wav")
    wav_write(d / "noise.wav", mix.sources.noise, sr, fmt)
    vids = []
    for i, fr in enumerate(mix.video.frames, 1):
        frames_write(d / f"v{i}.avfr", fr)
        vids.append(f"{name}/v{i}.avfr")
    return ManifestEntry(f"{name}/mixture.wav", tuple(srcs), f"{name}/noise.wav", tuple(vids))


def write_corpus(out_dir, spec: MixSpec, n_items: int, workers: Optional[int] = None) -> Path:
    """Write WAV/AVFR files, ``manifest.tsv`` and ``metadata.jsonl``; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    items = generate(spec, n_items, workers=workers)
    entries = [write_item(out, i, m) for i, m in enumerate(items)]
    manifest = out / "manifest.tsv"
    manifest.write_text("".join(format_manifest_line(e) + "\n" for e in entries), encoding="utf-8")
    with open(out / "metadata.jsonl", "w", encoding="utf-8") as fh:
        for m in items:
            fh.write(json.dumps(m.metadata, sort_keys=True) + "\n")
    return manifest


def load_corpus(manifest, n_speakers: Optional[int] = None) -> Corpus:
    manifest = Path(manifest)
    root = manifest.parent
    entries = read_manifest(manifest, n_speakers)
    if not entries:
        raise ValueError(f"{manifest} lists no items")
    mixes, srcs, noises, frames = [], [], [], []
    rate = None
    for e in entries:
        x, sr = wav_read(root / e.mixture)
        if rate is not None and sr != rate:
            raise ValueError(f"{e.mixture}: sample rate {sr} differs from {rate}")
        rate = sr
        mixes.append(x)
        srcs.append(np.stack([wav_read(root / p)[0] for p in e.sources]))
        noises.append(wav_read(root / e.noise)[0])
        frames.append(np.stack([frames_read(root / p, (64, 64)) for p in e.videos]))
    return Corpus(np.stack(mixes), np.stack(srcs), np.stack(noises), np.stack(frames), rate)

"""Synthetic audio-visual corpora and their file formats."""

from .corpus import Corpus, generate, load_corpus, stack, worker_count, write_corpus
from .fileio import (
    FLOAT32,
    PCM16,
    FramesError,
    ManifestEntry,
    WavError,
    frames_read,
    frames_write,
    parse_manifest,
    read_manifest,
    wav_read,
    wav_write,
)
from .synth import (
    MixSpec,
    Mixture,
    SourceSet,
    VideoClip,
    measure_mouth_height,
    measured_snrs,
    scale_to_snr,
    snr_db,
    synth_mixture,
    synth_speaker,
)

__all__ = [
    "FLOAT32",
    "PCM16",
    "Corpus",
    "FramesError",
    "ManifestEntry",
    "MixSpec",
    "Mixture",
    "SourceSet",
    "VideoClip",
    "WavError",
    "frames_read",
    "frames_write",
    "generate",
    "load_corpus",
    "measure_mouth_height",
    "measured_snrs",
    "parse_manifest",
    "read_manifest",
    "scale_to_snr",
    "snr_db",
    "stack",
    "synth_mixture",
    "synth_speaker",
    "wav_read",
    "wav_write",
    "worker_count",
    "write_corpus",
]

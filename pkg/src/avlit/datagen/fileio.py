"""WAV (16-bit PCM / 32-bit float), AVFR frame containers and corpus manifests."""

from __future__ import annotations

import struct
from pathlib import Path
from typing import List, NamedTuple, Sequence, Tuple

import numpy as np

PCM16 = "pcm16"
FLOAT32 = "float32"

_FORMAT_PCM = 1
_FORMAT_FLOAT = 3
_FORMAT_EXTENSIBLE = 0xFFFE


class WavError(ValueError):
    """Malformed RIFF/WAVE data; ``offset`` is the byte position where parsing failed."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


def wav_bytes(waveform, sample_rate: int, fmt: str = FLOAT32) -> bytes:
    data = np.asarray(waveform)
    if data.ndim == 1:
        data = data[None]
    channels = data.shape[0]
    interleaved = data.T
    if fmt == FLOAT32:
        payload = np.ascontiguousarray(interleaved, dtype="<f4").tobytes()
        code, bits = _FORMAT_FLOAT, 32
    elif fmt == PCM16:
        q = np.clip(np.round(np.asarray(interleaved, dtype=np.float64) * 32768.0), -32768, 32767)
        payload = q.astype("<i2").tobytes()
        code, bits = _FORMAT_PCM, 16
    else:
        raise ValueError(f"unknown sample format {fmt!r}")
    block = channels * bits // 8
    fmt_chunk = struct.pack("<HHIIHH", code, channels, sample_rate, sample_rate * block, block, bits)
    body = b"WAVE" + b"fmt " + struct.pack("<I", len(fmt_chunk)) + fmt_chunk
    body += b"data" + struct.pack("<I", len(payload)) + payload
    if len(payload) % 2:
        body += b"\x00"
    return b"RIFF" + struct.pack("<I", len(body)) + body


def wav_write(path, waveform, sample_rate: int, fmt: str = FLOAT32) -> None:
    Path(path).write_bytes(wav_bytes(waveform, sample_rate, fmt))


def parse_wav(buf: bytes) -> Tuple[np.ndarray, int]:
    if len(buf) < 12:
        raise WavError("file too short for a RIFF header", len(buf))
    if buf[:4] != b"RIFF":
        raise WavError("missing RIFF tag", 0)
    if buf[8:12] != b"WAVE":
        raise WavError("missing WAVE tag", 8)
    pos = 12
    fmt = None
    while pos + 8 <= len(buf):
        tag = buf[pos : pos + 4]
        (size,) = struct.unpack_from("<I", buf, pos + 4)
        start = pos + 8
        if start + size > len(buf):
            raise WavError(f"chunk {tag!r} declares {size} bytes past end of file", pos + 4)
        if tag == b"fmt ":
            if size < 16:
                raise WavError("fmt chunk shorter than 16 bytes", pos + 4)
            code, channels, rate, _, block, bits = struct.unpack_from("<HHIIHH", buf, start)
            if code == _FORMAT_EXTENSIBLE and size >= 40:
                (code,) = struct.unpack_from("<H", buf, start + 24)
            if channels < 1:
                raise WavError("zero channels", start + 2)
            fmt = (code, channels, rate, block, bits, start)
        elif tag == b"data":
            if fmt is None:
                raise WavError("data chunk before fmt chunk", pos)
            code, channels, rate, block, bits, fstart = fmt
            raw = buf[start : start + size]
            if code == _FORMAT_FLOAT and bits == 32:
                samples = np.frombuffer(raw, dtype="<f4").astype(np.float32)
            elif code == _FORMAT_PCM and bits == 16:
                samples = np.frombuffer(raw, dtype="<i2").astype(np.float32) / np.float32(32768.0)
            else:
                raise WavError(f"unsupported sample format code={code} bits={bits}", fstart)
            if samples.size % channels:
                raise WavError("data size is not a whole number of frames", pos + 4)
            data = samples.reshape(-1, channels).T
            return (data[0].copy() if channels == 1 else data.copy()), rate
        pos = start + size + (size % 2)
    raise WavError("no data chunk", pos)


def wav_read(path) -> Tuple[np.ndarray, int]:
    """Returns ``(samples, sample_rate)``; mono files give a 1-D array, others ``(channels, T)``."""
    return parse_wav(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# AVFR frame containers
# ---------------------------------------------------------------------------

AVFR_MAGIC = b"AVFR"


class FramesError(ValueError):
    pass


def frames_to_bytes(frames) -> bytes:
    frames = np.asarray(frames)
    if frames.ndim != 3:
        raise FramesError(f"expected (F, H, W) frames, got shape {frames.shape}")
    F, H, W = frames.shape
    if F == 0:
        raise FramesError("refusing to write an empty (F=0) frame sequence")
    if frames.dtype != np.uint8:
        frames = np.clip(np.round(np.asarray(frames, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    return AVFR_MAGIC + struct.pack("<III", F, H, W) + frames.tobytes()


def frames_write(path, frames) -> None:
    """Write one speaker's ``(F, H, W)`` grayscale frames (values in [0, 1] or uint8)."""
    Path(path).write_bytes(frames_to_bytes(frames))


def frames_from_bytes(buf: bytes, expect_hw: Tuple[int, int] = None) -> np.ndarray:
    if buf[:4] != AVFR_MAGIC:
        raise FramesError("bad magic, not an AVFR file")
    if len(buf) < 16:
        raise FramesError("truncated AVFR header")
    F, H, W = struct.unpack_from("<III", buf, 4)
    if F == 0:
        raise FramesError("AVFR file declares zero frames")
    if expect_hw is not None and (H, W) != tuple(expect_hw):
        raise FramesError(f"frame size {H}x{W} != expected {expect_hw[0]}x{expect_hw[1]}")
    if len(buf) != 16 + F * H * W:
        raise FramesError(f"payload is {len(buf) - 16} bytes, header implies {F * H * W}")
    return np.frombuffer(buf, dtype=np.uint8, offset=16).reshape(F, H, W).astype(np.float32) / np.float32(255.0)


def frames_read(path, expect_hw: Tuple[int, int] = None) -> np.ndarray:
    """Returns ``(F, H, W)`` float32 frames in [0, 1]."""
    return frames_from_bytes(Path(path).read_bytes(), expect_hw)


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------


class ManifestEntry(NamedTuple):
    mixture: str
    sources: Tuple[str, ...]
    noise: str
    videos: Tuple[str, ...]


def format_manifest_line(entry: ManifestEntry) -> str:
    return "\t".join([entry.mixture, *entry.sources, entry.noise, *entry.videos])


def parse_manifest(text: str, n_speakers: int = None) -> List[ManifestEntry]:
    entries = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        fields = line.split("\t")
        if len(fields) < 4 or len(fields) % 2:
            raise ValueError(f"manifest line {lineno}: expected 2M+2 tab-separated fields, got {len(fields)}")
        M = (len(fields) - 2) // 2
        if n_speakers is not None and M != n_speakers:
            raise ValueError(f"manifest line {lineno}: {M} speakers, expected {n_speakers}")
        entries.append(ManifestEntry(fields[0], tuple(fields[1 : 1 + M]), fields[1 + M], tuple(fields[2 + M :])))
    return entries


def read_manifest(path, n_speakers: int = None) -> List[ManifestEntry]:
    return parse_manifest(Path(path).read_text(encoding="utf-8"), n_speakers)

"""Synthetic audio-visual speakers and additive mixtures.

Each synthetic speaker is a harmonic stack whose fundamental is drawn from a
range owned by its ``speaker_id``; the ranges never overlap. A slowly varying
envelope in [0, 1] gates the audio and sets the height of a bright rectangle
("mouth opening") in the matching 64x64 frames. The rectangle width is fixed per
speaker id, so the frames identify the voice as well as its timing.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, NamedTuple, Optional, Tuple

import numpy as np
from scipy import signal as sps

FRAME_SIZE = 64
MIN_HEIGHT = 2
MAX_HEIGHT = 40
BACKGROUND = 51 / 255
F0_BASE = 100.0
F0_RATIO = 1.4  # spacing between consecutive speaker ranges
F0_SPAN = 1.2  # width of one range; < F0_RATIO keeps ranges disjoint
N_SPEAKER_IDS = 6


def f0_range(speaker_id: int) -> Tuple[float, float]:
    lo = F0_BASE * F0_RATIO**speaker_id
    return lo, lo * F0_SPAN


def mouth_width(speaker_id: int) -> int:
    return 12 + 6 * speaker_id


def power(x) -> float:
    x = np.asarray(x, dtype=np.float64)
    return float(np.mean(x * x))


def snr_db(reference, signal) -> float:
    """``10*log10(P_reference / P_signal)`` with mean-square powers."""
    return 10.0 * math.log10(power(reference) / power(signal))


def scale_to_snr(signal, reference, target_snr_db: float) -> np.ndarray:
    """Scale ``signal`` so that ``10*log10(P_ref / P_scaled) == target_snr_db``."""
    p_sig, p_ref = power(signal), power(reference)
    if p_sig == 0 or p_ref == 0:
        raise ValueError("cannot scale against a zero-power signal")
    gain = math.sqrt(p_ref / (p_sig * 10.0 ** (target_snr_db / 10.0)))
    return np.asarray(signal, dtype=np.float64) * gain


def random_envelope(rng: np.random.Generator, n: int, sample_rate: int) -> np.ndarray:
    """Piecewise-smooth envelope in [0, 1]: raised-cosine moves between random levels, with pauses."""
    t_end = n / sample_rate
    knots_t = [0.0]
    while knots_t[-1] < t_end:
        knots_t.append(knots_t[-1] + rng.uniform(0.12, 0.3))
    levels = np.where(rng.random(len(knots_t)) < 0.25, 0.0, rng.uniform(0.3, 1.0, len(knots_t)))
    t = np.arange(n) / sample_rate
    seg = np.searchsorted(knots_t, t, side="right") - 1
    t0 = np.asarray(knots_t)[seg]
    t1 = np.asarray(knots_t)[seg + 1]
    frac = (t - t0) / (t1 - t0)
    w = 0.5 - 0.5 * np.cos(np.pi * frac)
    return (1 - w) * levels[seg] + w * levels[seg + 1]


def harmonic_stack(rng: np.random.Generator, f0: float, n: int, sample_rate: int) -> np.ndarray:
    """Unit-RMS sum of harmonics (1/h amplitudes) with a gentle pitch glide."""
    t = np.arange(n) / sample_rate
    glide = 1.0 + 0.03 * np.sin(2 * np.pi * rng.uniform(0.5, 2.0) * t + rng.uniform(0, 2 * np.pi))
    phase = 2 * np.pi * np.cumsum(f0 * glide) / sample_rate
    n_harm = int((0.45 * sample_rate) // (f0 * 1.03))
    out = np.zeros(n)
    for h in range(1, n_harm + 1):
        out += np.sin(h * phase + rng.uniform(0, 2 * np.pi)) / h
    return out / math.sqrt(power(out))


def render_frames(envelope_at_frames: np.ndarray, speaker_id: int) -> np.ndarray:
    """``(F, 64, 64)`` frames; values are multiples of 1/255 so 8-bit storage is lossless."""
    F = len(envelope_at_frames)
    frames = np.full((F, FRAME_SIZE, FRAME_SIZE), BACKGROUND, dtype=np.float32)
    width = mouth_width(speaker_id)
    c0 = (FRAME_SIZE - width) // 2
    for f, e in enumerate(envelope_at_frames):
        h = mouth_height(e)
        r0 = (FRAME_SIZE - h) // 2
        frames[f, r0 : r0 + h, c0 : c0 + width] = 1.0
    return frames


def mouth_height(e: float) -> int:
    return MIN_HEIGHT + int(round((MAX_HEIGHT - MIN_HEIGHT) * float(e)))


def measure_mouth_height(frames: np.ndarray) -> np.ndarray:
    """Rectangle height per frame, read back from the pixels (bright rows in the center column)."""
    center = frames[:, :, FRAME_SIZE // 2]
    return (center > 0.5).sum(axis=1)


def frame_count(n_samples: int, sample_rate: int, fps: float) -> int:
    return int(round(n_samples / sample_rate * fps))


class Speaker(NamedTuple):
    waveform: np.ndarray  # (T,) float64
    frames: np.ndarray  # (F, 64, 64) float32
    envelope: np.ndarray  # (T,)
    f0: float


def synth_speaker(
    seed,
    duration: float,
    speaker_id: int,
    sample_rate: int = 16000,
    fps: float = 25.0,
    envelope: Optional[np.ndarray] = None,
) -> Speaker:
    if duration < 0.5:
        raise ValueError("duration must be at least 0.5 s")
    if not 0 <= speaker_id < N_SPEAKER_IDS:
        raise ValueError(f"speaker_id must be in 0..{N_SPEAKER_IDS - 1}")
    rng = np.random.default_rng(seed)
    n = int(round(duration * sample_rate))
    lo, hi = f0_range(speaker_id)
    f0 = rng.uniform(lo, hi)
    carrier = harmonic_stack(rng, f0, n, sample_rate)
    env = random_envelope(rng, n, sample_rate) if envelope is None else np.asarray(envelope, dtype=np.float64)
    F = frame_count(n, sample_rate, fps)
    frame_idx = np.minimum((np.arange(F) * sample_rate / fps).astype(np.int64), n - 1)
    frames = render_frames(env[frame_idx], speaker_id)
    return Speaker(carrier * env, frames, env, f0)


# ---------------------------------------------------------------------------
# mixtures
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MixSpec:
    speech_snr: Tuple[float, float] = (-5.0, 5.0)
    noise_snr: Optional[Tuple[float, float]] = (-6.0, 3.0)
    duration: float = 2.0
    n_speakers: int = 2
    seed: int = 0
    sample_rate: int = 16000
    fps: float = 25.0

    def __post_init__(self):
        for name in ("speech_snr", "noise_snr"):
            rng = getattr(self, name)
            if rng is not None and rng[0] > rng[1]:
                raise ValueError(f"{name}: lower bound {rng[0]} exceeds upper bound {rng[1]}")
        if self.duration <= 0:
            raise ValueError("duration must be positive")
        if not 1 <= self.n_speakers <= N_SPEAKER_IDS:
            raise ValueError(f"n_speakers must be in 1..{N_SPEAKER_IDS}")


class SourceSet(NamedTuple):
    sources: np.ndarray  # (M, T) float32
    noise: np.ndarray  # (T,) float32
    sample_rate: int


class VideoClip(NamedTuple):
    frames: np.ndarray  # (M, F, 64, 64) float32 in [0, 1]
    fps: float


class Mixture(NamedTuple):
    mixture: np.ndarray  # (T,) float32
    sources: SourceSet
    video: VideoClip
    metadata: dict


def item_seed(seed: int, item: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed), int(item)])


def _quantum(n_components: int, peak: float) -> float:
    # grid on which every partial sum of the components is exact in float32
    bound = n_components * peak
    return 2.0 ** (math.floor(math.log2(bound)) + 1 - 24)


def synth_mixture(spec: MixSpec, item: int = 0) -> Mixture:
    """Draw ``M`` speakers plus band-limited noise and sum them.

    Speaker 1 anchors the levels: speakers ``2..M`` sit at the drawn speech SNRs below
    it and the noise at the drawn noise SNR. All components are snapped to a power-of-two
    grid fine enough that the float32 sum is exact, so ``mixture == sum(sources) + noise``
    holds bit for bit.
    """
    ss = item_seed(spec.seed, item)
    rng = np.random.default_rng(ss)
    M = spec.n_speakers
    n = int(round(spec.duration * spec.sample_rate))
    ids = rng.choice(N_SPEAKER_IDS, size=M, replace=False)
    child_seeds = ss.spawn(M + 1)
    speakers = [
        synth_speaker(child_seeds[i], spec.duration, int(ids[i]), spec.sample_rate, spec.fps) for i in range(M)
    ]
    comps = [speakers[0].waveform]
    speech_snrs = []
    for spk in speakers[1:]:
        snr = float(rng.uniform(*spec.speech_snr))
        speech_snrs.append(snr)
        comps.append(scale_to_snr(spk.waveform, comps[0], snr))
    noise_snr = None
    if spec.noise_snr is not None:
        noise_snr = float(rng.uniform(*spec.noise_snr))
        nrng = np.random.default_rng(child_seeds[M])
        b, a = sps.butter(4, 0.25)
        noise = sps.lfilter(b, a, nrng.standard_normal(n))
        comps.append(scale_to_snr(noise, comps[0], noise_snr))
    else:
        comps.append(np.zeros(n))

    peak_comp, peak_mix = 0.5, 0.9
    gain = min(peak_comp / max(np.abs(c).max() for c in comps), peak_mix / np.abs(np.sum(comps, axis=0)).max())
    q = _quantum(len(comps), peak_comp)
    comps = [np.round(c * gain / q) * q for c in comps]
    mixture = np.zeros(n)
    for c in comps:
        mixture = mixture + c
    sources = np.stack(comps[:M]).astype(np.float32)
    noise = comps[M].astype(np.float32)
    frames = np.stack([s.frames for s in speakers])
    metadata = dict(
        seed=spec.seed,
        item=item,
        speaker_ids=[int(i) for i in ids],
        f0=[float(s.f0) for s in speakers],
        speech_snr=speech_snrs,
        noise_snr=noise_snr,
        gain=float(gain),
        sample_rate=spec.sample_rate,
        fps=spec.fps,
    )
    return Mixture(
        mixture.astype(np.float32),
        SourceSet(sources, noise, spec.sample_rate),
        VideoClip(frames, spec.fps),
        metadata,
    )


def measured_snrs(mix: Mixture) -> Tuple[List[float], Optional[float]]:
    """Re-measure speaker and noise SNRs (relative to speaker 1) from the stored components."""
    s = mix.sources.sources
    speech = [snr_db(s[0], s[i]) for i in range(1, len(s))]
    noise = None if power(mix.sources.noise) == 0 else snr_db(s[0], mix.sources.noise)
    return speech, noise

"""Analytical cost model (MACs, parameters, activation elements) and inference timing.

Counting convention: a convolution costs ``K * (C_in / groups) * C_out * T_out`` MACs
(the 2-D analogue for the frame encoder; transposed convolutions count per input
position), a normalization costs two multiplies per element, and element-wise
additions, activations, interpolation and the mask product are free. Layers inside an
iterated block are charged once per iteration, while their parameters are counted once.
"""

from __future__ import annotations

import csv
import io
import statistics
import time
from dataclasses import dataclass, field
from typing import List, NamedTuple, Optional, Tuple

import numpy as np

from . import numerics as nx
from .afrcnn import block_layer_specs, block_param_count, layer_macs, layer_params
from .model import AVLIT, ENCODER_CHANNELS, ModelConfig

# published figures for the default configuration at 2 s / 16 kHz
PUBLISHED_PARAMS_M = 5.75
PUBLISHED_AUDIO_BLOCK_PARAMS_M = 4.9
PUBLISHED_VIDEO_BLOCK_PARAMS_M = 0.35
PUBLISHED_MACS_G = {"avlit-2": 10.37, "avlit-4": 19.03, "avlit-8": 36.35}


class LayerCost(NamedTuple):
    name: str
    macs: int
    params: int
    act_elems: int


@dataclass
class CostReport:
    rows: List[LayerCost]
    seconds: float
    n_audio: int
    n_video: int
    notes: List[str] = field(default_factory=list)

    @property
    def total_macs(self) -> int:
        return sum(r.macs for r in self.rows)

    @property
    def total_params(self) -> int:
        return sum(r.params for r in self.rows)

    @property
    def total_act_elems(self) -> int:
        return sum(r.act_elems for r in self.rows)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layer", "macs", "params", "act_elems"])
        for r in self.rows:
            w.writerow(list(r))
        w.writerow(["total", self.total_macs, self.total_params, self.total_act_elems])
        return buf.getvalue()

    def format_table(self, max_rows: Optional[int] = None) -> str:
        rows = self.rows if max_rows is None else self.rows[:max_rows]
        width = max([len(r.name) for r in rows] + [5])
        lines = [f"{'layer':<{width}}  {'MACs':>15}  {'params':>10}  {'act elems':>12}"]
        for r in rows:
            lines.append(f"{r.name:<{width}}  {r.macs:>15,}  {r.params:>10,}  {r.act_elems:>12,}")
        if max_rows is not None and len(self.rows) > max_rows:
            lines.append(f"... {len(self.rows) - max_rows} more rows")
        lines.append(
            f"{'total':<{width}}  {self.total_macs:>15,}  {self.total_params:>10,}  {self.total_act_elems:>12,}"
        )
        lines.append(
            f"{self.seconds:g} s input, N_A={self.n_audio}, N_V={self.n_video}: "
            f"{self.total_macs / 1e9:.2f} GMACs, {self.total_params / 1e6:.3f} M params"
        )
        lines.extend(self.notes)
        return "\n".join(lines)


def _block_rows(prefix: str, cfg, length: int, batch: int, repeats: int) -> List[LayerCost]:
    rows = []
    for spec in block_layer_specs(cfg, length):
        act = spec.cout * spec.length_out if spec.kind in ("conv", "norm") else 0
        rows.append(
            LayerCost(f"{prefix}.{spec.name}", layer_macs(spec) * batch * repeats, layer_params(spec), act * batch * repeats)
        )
    return rows


def cost_report(config: ModelConfig, seconds: float = 2.0) -> CostReport:
    if seconds <= 0:
        raise ValueError("input_seconds must be positive")
    T = int(round(seconds * config.sample_rate))
    Tp = config.latent_length(T)
    F = config.n_frames(T)
    M, C, K = config.n_speakers, config.enc_channels, config.enc_kernel
    Bv, Cp = config.video_bottleneck, config.video_embed
    rows = [LayerCost("audio_encoder", K * C * Tp, C * K + C, C * Tp)]
    side = config.frame_size
    for i, (cin, cout) in enumerate(zip(ENCODER_CHANNELS, ENCODER_CHANNELS[1:])):
        side //= 2
        rows.append(LayerCost(f"video_encoder.conv{i}", 4 * cin * cout * side * side * M * F, 4 * cin * cout, cout * side * side * M * F))
    rows.append(LayerCost("video_in", Cp * Bv * F * M, Cp * Bv + Bv, Bv * F * M))
    rows += _block_rows("video_block", config.video_block, F, M, config.n_video)
    rows.append(LayerCost("video_out", M * Bv * C * F, M * Bv * C + C, C * F))
    rows += _block_rows("audio_block", config.audio_block, Tp, 1, config.n_audio)
    full = (Tp - 1) * config.enc_stride + K
    rows.append(LayerCost("decoder", K * C * M * Tp, C * M * K + M, M * full))
    notes = []
    audio_block_m = block_param_count(config.audio_block) / 1e6
    video_block_m = block_param_count(config.video_block) / 1e6
    for label, value, ref in (
        ("audio block", audio_block_m, PUBLISHED_AUDIO_BLOCK_PARAMS_M),
        ("video block", video_block_m, PUBLISHED_VIDEO_BLOCK_PARAMS_M),
    ):
        dev = (value - ref) / ref
        if abs(dev) > 0.2 and config.enc_channels == 512:
            notes.append(f"note: {label} has {value:.3f} M params, {dev:+.0%} from the published {ref} M")
    return CostReport(rows, seconds, config.n_audio, config.n_video, notes)


def count_params(config: ModelConfig) -> int:
    """Exact parameter count of the model built from ``config`` (frozen frame encoder included)."""
    return cost_report(config, 1.0 if config.sample_rate * 1.0 >= config.enc_kernel else 10.0).total_params


def count_macs(config: ModelConfig, input_seconds: float = 2.0) -> int:
    return cost_report(config, input_seconds).total_macs


def macs_decomposition(config: ModelConfig, input_seconds: float = 2.0) -> Tuple[int, int, int]:
    """``(base, per_audio_iteration, per_video_iteration)`` with
    ``MACs = base + n_audio * per_audio + n_video * per_video``."""
    zero = count_macs(config.replace(n_audio=1, n_video=0, fusion=()), input_seconds)
    a = count_macs(config.replace(n_audio=2, n_video=0, fusion=()), input_seconds) - zero
    v = count_macs(config.replace(n_audio=1, n_video=1, fusion=()), input_seconds) - zero
    return zero - a, a, v


def instrumented_macs(model: AVLIT, input_seconds: float = 2.0) -> int:
    """MACs tallied by the primitives during one real forward pass."""
    cfg = model.config
    T = int(round(input_seconds * cfg.sample_rate))
    F = cfg.n_frames(T)
    x = np.zeros((1, 1, T), dtype=nx.get_dtype())
    frames = np.zeros((1, cfg.n_speakers, F, cfg.frame_size, cfg.frame_size), dtype=nx.get_dtype())
    with nx.no_grad(), nx.count_macs() as records:
        model.forward(x, frames)
    return sum(m for _, m in records)


def _single_thread():
    try:
        from threadpoolctl import threadpool_limits

        return threadpool_limits(limits=1)
    except ImportError:  # pragma: no cover
        import contextlib

        return contextlib.nullcontext()


def time_inference(model: AVLIT, input_seconds: float = 2.0, trials: int = 100, with_video: bool = True):
    """Mean and standard deviation (seconds) of ``separate()`` wall-clock latency.

    One warm-up call runs first and is not timed.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    cfg = model.config
    T = int(round(input_seconds * cfg.sample_rate))
    rng = np.random.default_rng(0)
    x = rng.standard_normal(T).astype(np.float32) * 0.1
    frames = rng.random((cfg.n_speakers, cfg.n_frames(T), cfg.frame_size, cfg.frame_size)).astype(np.float32)
    frames = frames if with_video else None
    times = []
    with _single_thread():
        model.separate(x, frames)
        for _ in range(trials):
            t0 = time.perf_counter()
            model.separate(x, frames)
            times.append(time.perf_counter() - t0)
    std = statistics.pstdev(times) if len(times) > 1 else 0.0
    return statistics.fmean(times), std

"""AVLIT: iterative audio branch with shared A-FRCNN weights, guided by a video branch.

Shapes used throughout (batch first):

* mixture ``x``: ``(N, 1, T)``
* frames: ``(N, M, F, 64, 64)`` grayscale in ``[0, 1]``
* video embeddings ``f_V``: ``(N, M, C', F)``
* encoded audio ``f_A`` and adapted video ``f'_V``: ``(N, C, T')``
"""

from __future__ import annotations

import dataclasses
import io
import struct
from dataclasses import dataclass, field
from typing import BinaryIO, Dict, Optional, Sequence, Tuple, Union

import numpy as np

from . import kvfile
from . import numerics as nx
from .afrcnn import Block, BlockConfig, ConfigError
from .numerics import Module, Tensor, uniform_init

PRESETS = {
    "avlit-2": dict(n_audio=2, n_video=1, fusion=(0,)),
    "avlit-4": dict(n_audio=4, n_video=2, fusion=(0,)),
    "avlit-8": dict(n_audio=8, n_video=4, fusion=(0,)),
}

FUSION_PRESETS = {"early": lambda n: (0,), "middle": lambda n: (n // 2,), "late": lambda n: (n - 1,), "all": lambda n: tuple(range(n))}

ENCODER_CHANNELS = (1, 4, 8, 16, 64)


@dataclass(frozen=True)
class ModelConfig:
    n_speakers: int = 2
    n_audio: int = 4
    n_video: int = 2
    fusion: Tuple[int, ...] = (0,)
    enc_channels: int = 512
    enc_kernel: int = 40
    enc_stride: int = 20
    audio_channels: int = 512
    audio_bottleneck: int = 128
    audio_stages: int = 5
    video_channels: int = 128
    video_bottleneck: int = 128
    video_stages: int = 5
    video_embed: int = 1024
    frame_size: int = 64
    fps: float = 25.0
    sample_rate: int = 16000

    def __post_init__(self):
        if self.n_speakers < 1:
            raise ConfigError("n_speakers must be >= 1")
        if self.n_audio < 1:
            raise ConfigError("n_audio must be >= 1")
        if self.n_video < 0:
            raise ConfigError("n_video must be >= 0")
        object.__setattr__(self, "fusion", tuple(sorted(set(int(p) for p in self.fusion))))
        bad = [p for p in self.fusion if not 0 <= p < self.n_audio]
        if bad:
            raise ConfigError(f"fusion positions {bad} outside 0..{self.n_audio - 1}")
        if self.frame_size != 64:
            raise ConfigError("the frame encoder expects 64x64 frames")
        if self.enc_kernel < 1 or self.enc_stride < 1:
            raise ConfigError("encoder kernel and stride must be positive")
        self.audio_block
        self.video_block

    @classmethod
    def preset(cls, name: str, **overrides) -> "ModelConfig":
        try:
            base = PRESETS[name.lower()]
        except KeyError:
            raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
        return cls(**{**base, **overrides})

    @property
    def audio_block(self) -> BlockConfig:
        return BlockConfig(self.enc_channels, self.audio_bottleneck, self.audio_channels, self.audio_stages)

    @property
    def video_block(self) -> BlockConfig:
        return BlockConfig(self.video_bottleneck, self.video_bottleneck, self.video_channels, self.video_stages)

    def latent_length(self, n_samples: int) -> int:
        if n_samples < self.enc_kernel:
            raise ConfigError(f"waveform of {n_samples} samples is shorter than one kernel ({self.enc_kernel})")
        return (n_samples - self.enc_kernel) // self.enc_stride + 1

    def n_frames(self, n_samples: int) -> int:
        return int(round(n_samples / self.sample_rate * self.fps))

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        return kvfile.dump(kvfile.dataclass_to_dict(self))

    @classmethod
    def from_text(cls, text: str, source: str = "<model config>") -> "ModelConfig":
        return kvfile.dataclass_from_items(cls, kvfile.parse(text, source), source)


class VideoEncoder(Module):
    """Frame encoder: four stride-2 2x2 convolutions (no bias), LeakyReLU(0.3) after each.

    A 64x64 frame becomes a 64x4x4 map, flattened to a 1024-dim embedding.
    """

    def __init__(self, rng: np.random.Generator):
        self.weights = [
            uniform_init(rng, (cout, cin, 2, 2), cin * 4) for cin, cout in zip(ENCODER_CHANNELS, ENCODER_CHANNELS[1:])
        ]
        self.freeze()

    def freeze(self) -> None:
        for w in self.weights:
            w.requires_grad = False

    def __call__(self, frames: Tensor) -> Tensor:
        """``(B, 64, 64)`` frames -> ``(B, 1024)`` embeddings."""
        h = nx.reshape(frames, (frames.shape[0], 1) + frames.shape[1:])
        for w in self.weights:
            h = nx.leaky_relu(nx.conv2d(h, w, stride=2), 0.3)
        return nx.reshape(h, (h.shape[0], -1))


class VideoDecoder(Module):
    """Mirror of :class:`VideoEncoder` built from transposed convolutions; used only for pretraining."""

    def __init__(self, rng: np.random.Generator):
        chans = ENCODER_CHANNELS[::-1]
        self.weights = [uniform_init(rng, (cin, cout, 2, 2), cin * 4) for cin, cout in zip(chans, chans[1:])]
        self.bias = Tensor(np.zeros(1), requires_grad=True)

    def __call__(self, z: Tensor) -> Tensor:
        h = nx.reshape(z, (z.shape[0], ENCODER_CHANNELS[-1], 4, 4))
        for i, w in enumerate(self.weights):
            h = nx.conv_transpose2d(h, w, stride=2)
            if i < len(self.weights) - 1:
                h = nx.leaky_relu(h, 0.3)
        h = h + nx.reshape(self.bias, (1, 1, 1, 1))
        return nx.reshape(h, (h.shape[0],) + h.shape[2:])


class AVLIT(Module):
    def __init__(self, config: ModelConfig, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.config = config
        C, K, M = config.enc_channels, config.enc_kernel, config.n_speakers
        self.enc_weight = uniform_init(rng, (C, 1, K), K)
        self.enc_bias = uniform_init(rng, (C,), K)
        self.audio_block = Block(config.audio_block, rng)
        self.video_encoder = VideoEncoder(rng)
        self.video_in_weight = uniform_init(rng, (config.video_bottleneck, config.video_embed, 1), config.video_embed)
        self.video_in_bias = uniform_init(rng, (config.video_bottleneck,), config.video_embed)
        self.video_block = Block(config.video_block, rng)
        merged = M * config.video_bottleneck
        self.video_out_weight = uniform_init(rng, (C, merged, 1), merged)
        self.video_out_bias = uniform_init(rng, (C,), merged)
        self.dec_weight = uniform_init(rng, (C, M, K), C * K)
        self.dec_bias = uniform_init(rng, (M,), C * K)

    # -- audio -------------------------------------------------------------------------

    def encode_audio(self, x: Tensor) -> Tensor:
        """``(N, 1, T)`` waveform -> ``f_A`` of shape ``(N, C, T')``."""
        self.config.latent_length(x.shape[-1])
        return nx.conv1d(x, self.enc_weight, self.enc_bias, stride=self.config.enc_stride)

    def audio_branch(self, f_a: Tensor, f_v: Optional[Tensor]) -> Tensor:
        """Run the shared audio block ``n_audio`` times; video is added at the fusion positions.

        ``f_v=None`` is treated as all-zero video features.
        """
        fusion = set(self.config.fusion)
        r = None
        for i in range(self.config.n_audio):
            inp = f_a if r is None else r + f_a
            if f_v is not None and i in fusion:
                inp = inp + f_v
            r = self.audio_block(inp)
        return r

    # -- video -------------------------------------------------------------------------

    def encode_video(self, frames) -> np.ndarray:
        """``(N, M, F, 64, 64)`` or ``(M, F, 64, 64)`` frames -> ``(N, M, C', F)`` embeddings (frozen)."""
        frames = np.asarray(frames.data if isinstance(frames, Tensor) else frames)
        if frames.ndim == 4:
            frames = frames[None]
        if frames.ndim != 5 or frames.shape[-2:] != (self.config.frame_size,) * 2:
            raise nx.ShapeError(f"frames must be (N, M, F, 64, 64), got {frames.shape}", axis="spatial")
        N, M, F = frames.shape[:3]
        with nx.no_grad():
            emb = self.video_encoder(Tensor(frames.reshape(N * M * F, *frames.shape[-2:])))
        return emb.data.reshape(N, M, F, -1).transpose(0, 1, 3, 2).copy()

    def video_branch(self, f_v: Tensor, target_len: int) -> Tensor:
        """``(N, M, C', F)`` embeddings -> ``(N, C, target_len)`` features aligned with the audio latent."""
        N, M, Cp, F = f_v.shape
        if M != self.config.n_speakers:
            raise nx.ShapeError(f"expected {self.config.n_speakers} speaker videos, got {M}", axis="speakers")
        v = nx.conv1d(nx.reshape(f_v, (N * M, Cp, F)), self.video_in_weight, self.video_in_bias)
        r = None
        for _ in range(self.config.n_video):
            r = self.video_block(v if r is None else r + v)
        h = v if r is None else r
        h = nx.reshape(h, (N, M * h.shape[1], F))
        h = nx.conv1d(h, self.video_out_weight, self.video_out_bias)
        return nx.nearest_interp1d(h, target_len)

    # -- full model --------------------------------------------------------------------

    def forward(self, x, video: Optional[np.ndarray] = None, embedded: bool = False) -> Tensor:
        """Separate a batch of mixtures.

        ``x`` is ``(N, 1, T)`` or ``(N, T)``; ``video`` holds raw frames, or embeddings when
        ``embedded`` is true. Without video the fusion adds nothing (audio-only mode).
        Returns ``(N, M, T)`` estimates ordered like the speaker videos.
        """
        x = nx.as_tensor(x)
        if x.ndim == 2:
            x = nx.reshape(x, (x.shape[0], 1, x.shape[1]))
        T = x.shape[-1]
        f_a = self.encode_audio(x)
        f_v = None
        if video is not None:
            emb = video if embedded else self.encode_video(video)
            emb = nx.as_tensor(emb)
            self._check_duration(T, emb.shape[-1])
            f_v = self.video_branch(emb, f_a.shape[-1])
        mask = nx.relu(self.audio_branch(f_a, f_v))
        out = nx.conv_transpose1d(f_a * mask, self.dec_weight, self.dec_bias, stride=self.config.enc_stride)
        return nx.fit_length(out, T)

    __call__ = forward

    def _check_duration(self, n_samples: int, n_frames: int) -> None:
        expected = n_samples / self.config.sample_rate * self.config.fps
        if abs(n_frames - expected) > 1.0:
            raise ValueError(f"video has {n_frames} frames but audio spans {expected:.2f} frames")

    def separate(self, x, frames=None) -> np.ndarray:
        """Inference on one mixture: ``(T,)`` or ``(1, T)`` waveform -> ``(M, T)`` estimates."""
        x = np.asarray(x, dtype=nx.get_dtype()).reshape(1, 1, -1)
        video = None if frames is None else np.asarray(frames)[None]
        with nx.no_grad():
            return self.forward(x, video).data[0]


def separate(x, frames, config: ModelConfig, weights: Union[AVLIT, Dict[str, np.ndarray]]) -> np.ndarray:
    """Functional form: build (or reuse) the model for ``config`` and separate one mixture."""
    if isinstance(weights, AVLIT):
        model = weights
    else:
        model = AVLIT(config)
        model.load_state_dict(weights)
    return model.separate(x, frames)


# ---------------------------------------------------------------------------
# video autoencoder pretraining
# ---------------------------------------------------------------------------


def pretrain_video_encoder(
    model: AVLIT, frames: np.ndarray, steps: int = 200, batch: int = 32, lr: float = 3e-3, seed: int = 0
) -> list:
    """Fit the frame autoencoder on single frames by mean squared reconstruction error.

    Only the encoder is kept (and re-frozen); returns the loss trace.
    """
    from .objectives import AdamW

    frames = np.asarray(frames, dtype=nx.get_dtype()).reshape(-1, 64, 64)
    rng = np.random.default_rng(seed)
    decoder = VideoDecoder(rng)
    enc = model.video_encoder
    for w in enc.weights:
        w.requires_grad = True
    params = enc.weights + decoder.parameters()
    opt = AdamW(params, lr=lr, weight_decay=0.0)
    losses = []
    for _ in range(steps):
        idx = rng.choice(len(frames), size=min(batch, len(frames)), replace=False)
        x = Tensor(frames[idx])
        diff = decoder(enc(x)) - x
        loss = (diff * diff).mean()
        for p in params:
            p.grad = None
        loss.backward()
        opt.step()
        losses.append(loss.item())
    enc.freeze()
    for p in params:
        p.grad = None
    return losses


# ---------------------------------------------------------------------------
# checkpoint container
# ---------------------------------------------------------------------------

MAGIC = b"AVLT"
FORMAT_VERSION = 1


def write_checkpoint(fh: BinaryIO, config: ModelConfig, state: Dict[str, np.ndarray], extra: str = "") -> None:
    """Little-endian layout: magic, u32 version, u32-length config text, u32-length
    extra text, u32 record count, then per record u16 name length, name, u8 rank,
    u32 dims, float32 values."""
    cfg = config.to_text().encode("utf-8")
    ext = extra.encode("utf-8")
    fh.write(MAGIC)
    fh.write(struct.pack("<III", FORMAT_VERSION, len(cfg), len(ext)))
    fh.write(cfg)
    fh.write(ext)
    fh.write(struct.pack("<I", len(state)))
    for name in sorted(state):
        arr = np.ascontiguousarray(state[name], dtype="<f4")
        raw = name.encode("utf-8")
        fh.write(struct.pack("<H", len(raw)))
        fh.write(raw)
        fh.write(struct.pack("<B", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(arr.tobytes())


class CheckpointError(ValueError):
    pass


def read_checkpoint(fh: BinaryIO) -> Tuple[ModelConfig, Dict[str, np.ndarray], str]:
    def take(n: int) -> bytes:
        buf = fh.read(n)
        if len(buf) != n:
            raise CheckpointError("truncated checkpoint")
        return buf

    if take(4) != MAGIC:
        raise CheckpointError("not an AVLT checkpoint (bad magic)")
    version, cfg_len, ext_len = struct.unpack("<III", take(12))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    config = ModelConfig.from_text(take(cfg_len).decode("utf-8"), "<checkpoint>")
    extra = take(ext_len).decode("utf-8")
    (count,) = struct.unpack("<I", take(4))
    state = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        size = int(np.prod(shape)) if ndim else 1
        state[name] = np.frombuffer(take(4 * size), dtype="<f4").reshape(shape).copy()
    return config, state, extra


def save_model(model: AVLIT, path, extra: str = "") -> None:
    with open(path, "wb") as fh:
        write_checkpoint(fh, model.config, model.state_dict(), extra)


def load_model(path) -> AVLIT:
    with open(path, "rb") as fh:
        config, state, _ = read_checkpoint(fh)
    model = AVLIT(config)
    model.load_state_dict(state)
    model.video_encoder.freeze()
    return model


def checkpoint_bytes(model: AVLIT, extra: str = "") -> bytes:
    buf = io.BytesIO()
    write_checkpoint(buf, model.config, model.state_dict(), extra)
    return buf.getvalue()

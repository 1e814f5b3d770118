"""The A-FRCNN block: a multi-scale U-Net-like unit with adjacent-level and delayed global fusion.

One :class:`Block` instance is shared by every iteration of a branch, so the
number of iterations never changes the parameter count.

Layout (``C`` stage channels, ``B`` bottleneck, ``S`` scales)::

    x --1x1--> B --1x1--> C, norm, PReLU                        -> X_0
    X_{s-1} --depthwise stride-2 conv, norm, PReLU               -> X_s
    [down(X_{s-1}), X_s, up(X_{s+1})] --concat, 1x1, norm, PReLU -> Y_s
    [up(Y_0), ..., up(Y_{S-1})] --concat, 1x1 (S*C->C), norm, PReLU
        --1x1 C->B, PReLU --1x1 B->io--> + x
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, NamedTuple, Optional

import numpy as np

from . import numerics as nx
from .numerics import Module, Tensor, uniform_init


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class BlockConfig:
    io_channels: int
    bottleneck: int
    stage_channels: int
    stages: int
    down_kernel: int = 5
    down_stride: int = 2

    def __post_init__(self):
        if self.stages < 1:
            raise ConfigError(f"stages must be >= 1, got {self.stages}")
        if self.bottleneck < 1 or self.io_channels < 1:
            raise ConfigError("channel counts must be positive")
        if self.stage_channels < self.bottleneck:
            raise ConfigError(f"stage_channels ({self.stage_channels}) must be >= bottleneck ({self.bottleneck})")
        if self.down_kernel < 1 or self.down_kernel % 2 == 0:
            raise ConfigError("down_kernel must be odd")
        if self.down_stride != 2:
            raise ConfigError("down_stride is fixed at 2")

    @property
    def down_padding(self) -> int:
        return (self.down_kernel - 1) // 2

    @property
    def min_length(self) -> int:
        return 2 ** (self.stages - 1)


def scale_lengths(length: int, stages: int) -> List[int]:
    """Temporal length at each scale; every halving rounds up."""
    lengths = [length]
    for _ in range(stages - 1):
        lengths.append(-(-lengths[-1] // 2))
    return lengths


def fusion_inputs(scale: int, stages: int) -> int:
    """Number of feature maps concatenated at one scale of the adjacent fusion."""
    return 1 + (scale > 0) + (scale < stages - 1)


class LayerSpec(NamedTuple):
    """One weighted layer as seen by the cost model."""

    name: str
    kind: str  # "conv" or "norm"
    cin: int
    cout: int
    kernel: int
    groups: int
    length_out: int
    bias: bool = True


def block_layer_specs(cfg: BlockConfig, length: int) -> List[LayerSpec]:
    """Every weighted layer of one block application on a ``length``-long input, in execution order.

    PReLU slopes are listed as ``kind="prelu"`` rows with one parameter each.
    """
    io, B, C, S, K = cfg.io_channels, cfg.bottleneck, cfg.stage_channels, cfg.stages, cfg.down_kernel
    L = scale_lengths(length, S)
    rows = [
        LayerSpec("entry", "conv", io, B, 1, 1, L[0]),
        LayerSpec("expand", "conv", B, C, 1, 1, L[0]),
        LayerSpec("expand.norm", "norm", C, C, 1, 1, L[0]),
        LayerSpec("expand.act", "prelu", 0, 0, 0, 0, 0),
    ]
    for s in range(1, S):
        rows += [
            LayerSpec(f"down{s}", "conv", C, C, K, C, L[s]),
            LayerSpec(f"down{s}.norm", "norm", C, C, 1, 1, L[s]),
            LayerSpec(f"down{s}.act", "prelu", 0, 0, 0, 0, 0),
        ]
    for s in range(S):
        if s > 0:
            rows += [
                LayerSpec(f"fuse{s}.down", "conv", C, C, K, C, L[s]),
                LayerSpec(f"fuse{s}.down.norm", "norm", C, C, 1, 1, L[s]),
            ]
        rows += [
            LayerSpec(f"fuse{s}.proj", "conv", fusion_inputs(s, S) * C, C, 1, 1, L[s]),
            LayerSpec(f"fuse{s}.proj.norm", "norm", C, C, 1, 1, L[s]),
            LayerSpec(f"fuse{s}.proj.act", "prelu", 0, 0, 0, 0, 0),
        ]
    rows += [
        LayerSpec("global", "conv", S * C, C, 1, 1, L[0]),
        LayerSpec("global.norm", "norm", C, C, 1, 1, L[0]),
        LayerSpec("global.act", "prelu", 0, 0, 0, 0, 0),
        LayerSpec("exit1", "conv", C, B, 1, 1, L[0]),
        LayerSpec("exit1.act", "prelu", 0, 0, 0, 0, 0),
        LayerSpec("exit2", "conv", B, io, 1, 1, L[0]),
    ]
    return rows


def layer_params(spec: LayerSpec) -> int:
    if spec.kind == "conv":
        return spec.cout * (spec.cin // spec.groups) * spec.kernel + (spec.cout if spec.bias else 0)
    if spec.kind == "norm":
        return 2 * spec.cout
    return 1


def layer_macs(spec: LayerSpec) -> int:
    if spec.kind == "conv":
        return spec.kernel * (spec.cin // spec.groups) * spec.cout * spec.length_out
    if spec.kind == "norm":
        return 2 * spec.cout * spec.length_out
    return 0


def block_param_count(cfg: BlockConfig) -> int:
    """Closed-form parameter count of one block (independent of input length)."""
    io, B, C, S, K = cfg.io_channels, cfg.bottleneck, cfg.stage_channels, cfg.stages, cfg.down_kernel
    conv1x1 = lambda cin, cout: cin * cout + cout  # noqa: E731
    depthwise = C * K + C
    norm = 2 * C
    total = conv1x1(io, B) + conv1x1(B, C) + norm + 1
    total += (S - 1) * (depthwise + norm + 1)  # bottom-up pyramid
    total += (S - 1) * (depthwise + norm)  # downsampling inside the adjacent fusion
    total += sum(conv1x1(fusion_inputs(s, S) * C, C) + norm + 1 for s in range(S))
    total += conv1x1(S * C, C) + norm + 1  # delayed global fusion
    total += conv1x1(C, B) + 1 + conv1x1(B, io)
    return total


class _Conv(Module):
    def __init__(self, rng, cin, cout, kernel=1, groups=1):
        fan_in = (cin // groups) * kernel
        self.weight = uniform_init(rng, (cout, cin // groups, kernel), fan_in)
        self.bias = uniform_init(rng, (cout,), fan_in)
        self.groups = groups

    def __call__(self, x: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
        return nx.conv1d(x, self.weight, self.bias, stride=stride, padding=padding, groups=self.groups)


class _Norm(Module):
    def __init__(self, channels):
        self.scale = Tensor(np.ones(channels), requires_grad=True)
        self.shift = Tensor(np.zeros(channels), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return nx.global_channel_norm(x, self.scale, self.shift)


def _slope() -> Tensor:
    return Tensor(np.array([0.25]), requires_grad=True)


class Block(Module):
    """Shared-weight A-FRCNN block operating on ``(N, io_channels, T)`` tensors."""

    def __init__(self, cfg: BlockConfig, rng: Optional[np.random.Generator] = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.cfg = cfg
        io, B, C, S, K = cfg.io_channels, cfg.bottleneck, cfg.stage_channels, cfg.stages, cfg.down_kernel
        self.entry = _Conv(rng, io, B)
        self.expand = _Conv(rng, B, C)
        self.expand_norm = _Norm(C)
        self.expand_act = _slope()
        self.down = [_Conv(rng, C, C, K, groups=C) for _ in range(S - 1)]
        self.down_norm = [_Norm(C) for _ in range(S - 1)]
        self.down_act = [_slope() for _ in range(S - 1)]
        self.fuse_down = [_Conv(rng, C, C, K, groups=C) for _ in range(S - 1)]
        self.fuse_down_norm = [_Norm(C) for _ in range(S - 1)]
        self.fuse_proj = [_Conv(rng, fusion_inputs(s, S) * C, C) for s in range(S)]
        self.fuse_norm = [_Norm(C) for _ in range(S)]
        self.fuse_act = [_slope() for _ in range(S)]
        self.glob = _Conv(rng, S * C, C)
        self.glob_norm = _Norm(C)
        self.glob_act = _slope()
        self.exit1 = _Conv(rng, C, B)
        self.exit1_act = _slope()
        self.exit2 = _Conv(rng, B, io)

    def pyramid(self, x: Tensor) -> List[Tensor]:
        """Bottom-up feature maps ``X_0 .. X_{S-1}``."""
        cfg = self.cfg
        if x.shape[-1] < cfg.min_length:
            raise ConfigError(f"input length {x.shape[-1]} too short for {cfg.stages} scales")
        h = self.entry(x)
        h = nx.prelu(self.expand_norm(self.expand(h)), self.expand_act)
        feats = [h]
        for conv, norm, act in zip(self.down, self.down_norm, self.down_act):
            h = nx.prelu(norm(conv(h, stride=2, padding=cfg.down_padding)), act)
            feats.append(h)
        return feats

    def __call__(self, x: Tensor) -> Tensor:
        cfg = self.cfg
        S = cfg.stages
        feats = self.pyramid(x)
        lengths = [f.shape[-1] for f in feats]
        fused = []
        for s in range(S):
            parts = []
            if s > 0:
                d = self.fuse_down[s - 1](feats[s - 1], stride=2, padding=cfg.down_padding)
                parts.append(self.fuse_down_norm[s - 1](d))
            parts.append(feats[s])
            if s < S - 1:
                parts.append(nx.nearest_interp1d(feats[s + 1], lengths[s]))
            h = parts[0] if len(parts) == 1 else nx.concat(parts, axis=-2)
            fused.append(nx.prelu(self.fuse_norm[s](self.fuse_proj[s](h)), self.fuse_act[s]))
        ups = [nx.nearest_interp1d(f, lengths[0]) for f in fused]
        g = ups[0] if S == 1 else nx.concat(ups, axis=-2)
        g = nx.prelu(self.glob_norm(self.glob(g)), self.glob_act)
        g = nx.prelu(self.exit1(g), self.exit1_act)
        return x + self.exit2(g)


def block_forward(x: Tensor, block: Block) -> Tensor:
    """Apply ``block`` to ``(io_channels, T)`` or ``(N, io_channels, T)`` input; output has the same shape."""
    if x.ndim == 2:
        return nx.reshape(block(nx.reshape(x, (1,) + x.shape)), x.shape)
    return block(x)

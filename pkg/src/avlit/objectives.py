"""SI-SDR metric and loss, permutation-invariant training, AdamW and the training loop."""

from __future__ import annotations

import csv
import itertools
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import numerics as nx
from .numerics import Tensor

log = logging.getLogger(__name__)

SDR_CLAMP = 60.0
MAX_PIT_SPEAKERS = 6
# keeps log() finite for silent estimates; far below any realistic signal energy
_TINY = 1e-20


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


def si_sdr(estimate, reference) -> float:
    """Scale-invariant SDR in dB, clamped to [-60, 60].

    The estimate is normalized to unit energy first and the result is rounded to
    float32 resolution (about 1e-6 dB), so rescaling the estimate by any positive
    gain returns the identical number.
    """
    est = np.asarray(estimate, dtype=np.float64).ravel()
    ref = np.asarray(reference, dtype=np.float64).ravel()
    if est.shape != ref.shape:
        raise ValueError(f"length mismatch: {est.size} vs {ref.size}")
    ref_energy = np.dot(ref, ref)
    if ref_energy == 0:
        raise ValueError("reference signal is identically zero")
    est_norm = math.sqrt(np.dot(est, est))
    if est_norm == 0:
        return -SDR_CLAMP
    est = est / est_norm
    alpha = np.dot(est, ref) / ref_energy
    target = alpha * ref
    resid = est - target
    t, r = np.dot(target, target), np.dot(resid, resid)
    if t == 0:
        return -SDR_CLAMP
    if r == 0:
        return SDR_CLAMP
    return float(np.float32(np.clip(10.0 * np.log10(t / r), -SDR_CLAMP, SDR_CLAMP)))


def si_sdr_improvement(estimates, references, mixture) -> float:
    """Mean over speakers of ``si_sdr(est_i, ref_i) - si_sdr(mixture, ref_i)``."""
    estimates = np.asarray(estimates)
    references = np.asarray(references)
    mixture = np.asarray(mixture).ravel()
    gains = [si_sdr(e, r) - si_sdr(mixture, r) for e, r in zip(estimates, references)]
    return float(np.mean(gains))


def best_permutation(estimates, references) -> Tuple[int, ...]:
    """Assignment maximizing mean SI-SDR; entry ``i`` is the estimate matched with reference ``i``."""
    M = len(references)
    scores = np.array([[si_sdr(e, r) for r in references] for e in estimates])
    best = max(itertools.permutations(range(M)), key=lambda p: sum(scores[p[i], i] for i in range(M)))
    return tuple(best)


# ---------------------------------------------------------------------------
# differentiable losses
# ---------------------------------------------------------------------------


def si_sdr_tensor(estimates: Tensor, references: np.ndarray) -> Tensor:
    """Differentiable SI-SDR along the last axis; leading axes broadcast."""
    ref = Tensor(np.asarray(references, dtype=estimates.dtype))
    ref_energy = (ref * ref).sum(axis=-1, keepdims=True)
    if np.any(ref_energy.data == 0):
        raise ValueError("reference signal is identically zero")
    alpha = nx.div((estimates * ref).sum(axis=-1, keepdims=True), ref_energy)
    target = alpha * ref
    resid = estimates - target
    t = (target * target).sum(axis=-1)
    r = (resid * resid).sum(axis=-1)
    ratio = nx.div(t + _TINY, r + _TINY)
    db = nx.log(ratio) * (10.0 / math.log(10.0))
    return nx.clip(db, -SDR_CLAMP, SDR_CLAMP)


def ordered_loss(estimates: Tensor, references: np.ndarray) -> Tensor:
    """Mean negative SI-SDR with the speaker order taken as given."""
    return -si_sdr_tensor(estimates, references).mean()


def pit_loss(estimates: Tensor, references: np.ndarray):
    """Permutation-invariant negative SI-SDR.

    ``estimates`` is ``(M, T)`` or ``(N, M, T)``. Returns ``(loss, permutation)``
    (a list of permutations for batched input). Only the chosen pairs carry gradient.
    """
    estimates = nx.as_tensor(estimates)
    references = np.asarray(references)
    single = estimates.ndim == 2
    if single:
        estimates = nx.reshape(estimates, (1,) + estimates.shape)
        references = references[None]
    N, M, T = estimates.shape
    if M > MAX_PIT_SPEAKERS:
        raise ValueError(f"PIT over {M} speakers is unsupported (max {MAX_PIT_SPEAKERS})")
    est = nx.reshape(estimates, (N, M, 1, T))
    pair = si_sdr_tensor(est, references[:, None, :, :])  # (N, est, ref)
    perms = list(itertools.permutations(range(M)))
    cols = np.arange(M)
    chosen = []
    for n in range(N):
        scores = [pair.data[n, list(p), cols].mean() for p in perms]
        chosen.append(perms[int(np.argmax(scores))])
    rows = np.repeat(np.arange(N), M)
    est_idx = np.concatenate([np.array(p) for p in chosen])
    ref_idx = np.tile(cols, N)
    loss = -nx.getitem(pair, (rows, est_idx, ref_idx)).mean()
    return (loss, chosen[0]) if single else (loss, chosen)


# ---------------------------------------------------------------------------
# optimizer and schedule
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 16
    lr: float = 1e-3
    weight_decay: float = 1e-1
    step_factor: float = 1.0 / 3.0
    schedule_period: int = 25
    seed: int = 0
    pit: bool = False
    clip_grad_norm: float = 0.0

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.schedule_period < 1:
            raise ValueError("schedule_period must be >= 1")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")


def lr_at(epoch: int, config: TrainConfig) -> float:
    """Step schedule: multiply by ``step_factor`` every ``schedule_period`` epochs."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return config.lr * config.step_factor ** (epoch // config.schedule_period)


@dataclass
class AdamState:
    step: int = 0
    m: Dict[int, np.ndarray] = field(default_factory=dict)
    v: Dict[int, np.ndarray] = field(default_factory=dict)


def adamw_update(w, g, m, v, step, lr, weight_decay, beta1=0.9, beta2=0.999, eps=1e-8):
    """One AdamW update on arrays; returns ``(w, m, v)``. ``step`` counts from 1."""
    m = beta1 * m + (1 - beta1) * g
    v = beta2 * v + (1 - beta2) * g * g
    m_hat = m / (1 - beta1**step)
    v_hat = v / (1 - beta2**step)
    w = w * (1 - lr * weight_decay) - lr * (m_hat / (np.sqrt(v_hat) + eps))
    return w, m, v


class AdamW:
    """Adam with decoupled weight decay over a list of tensors."""

    def __init__(self, params: Sequence[Tensor], lr=1e-3, weight_decay=1e-1, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.betas = betas
        self.eps = eps
        self.state = AdamState()

    def step(self) -> None:
        self.state.step += 1
        t = self.state.step
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            m = self.state.m.get(i)
            if m is None:
                m = np.zeros_like(p.data)
                v = np.zeros_like(p.data)
            else:
                v = self.state.v[i]
            w, m, v = adamw_update(
                p.data, p.grad.astype(p.dtype, copy=False), m, v, t, self.lr, self.weight_decay, *self.betas, self.eps
            )
            p.data = w.astype(p.dtype, copy=False)
            self.state.m[i], self.state.v[i] = m, v

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def optimizer_step(weights: Sequence[Tensor], config: TrainConfig, state: AdamState, lr: Optional[float] = None) -> None:
    """Functional AdamW step using each tensor's ``.grad`` and the moments held in ``state``."""
    opt = AdamW(weights, lr=config.lr if lr is None else lr, weight_decay=config.weight_decay)
    opt.state = state
    opt.step()


def clip_grad_norm(params: Sequence[Tensor], max_norm: float) -> float:
    total = math.sqrt(sum(float(np.sum(p.grad.astype(np.float64) ** 2)) for p in params if p.grad is not None))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return total


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


@dataclass
class SeparationData:
    """In-memory corpus: mixtures ``(N, T)``, sources ``(N, M, T)`` and video embeddings ``(N, M, C', F)``."""

    mixtures: np.ndarray
    sources: np.ndarray
    video: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return len(self.mixtures)

    def subset(self, idx) -> "SeparationData":
        return SeparationData(self.mixtures[idx], self.sources[idx], None if self.video is None else self.video[idx])


class TrainingDiverged(RuntimeError):
    pass


LOG_HEADER = ["epoch", "split", "loss", "si_sdri", "lr"]


def evaluate(model, data: SeparationData, use_video: bool = True, pit: bool = False, batch_size: int = 8) -> float:
    """Mean per-utterance SI-SDRi (speakers averaged within each utterance)."""
    return evaluate_with_loss(model, data, use_video, pit, batch_size)[0]


def evaluate_with_loss(model, data, use_video=True, pit=False, batch_size=8) -> Tuple[float, float]:
    """``(mean SI-SDRi, mean negative SI-SDR)``; the second value is the training loss on ``data``."""
    scores, losses = [], []
    with nx.no_grad():
        for start in range(0, len(data), batch_size):
            part = data.subset(slice(start, start + batch_size))
            video = part.video if use_video else None
            est = model.forward(part.mixtures.astype(nx.get_dtype()), video, embedded=True).data
            for e, refs, mix in zip(est, part.sources, part.mixtures):
                if pit:
                    e = e[list(best_permutation(e, refs))]
                scores.append(si_sdr_improvement(e, refs, mix))
                losses.append(-float(np.mean([si_sdr(a, b) for a, b in zip(e, refs)])))
    return float(np.mean(scores)), float(np.mean(losses))


@dataclass
class TrainResult:
    history: List[dict]
    best_si_sdri: float
    best_state: Dict[str, np.ndarray]
    best_epoch: int


def train(
    model,
    train_data: SeparationData,
    val_data: SeparationData,
    config: TrainConfig,
    out_dir: Optional[os.PathLike] = None,
    progress=None,
) -> TrainResult:
    """Train ``model`` in place.

    Audio-visual models use the video-ordered assignment; ``config.pit`` (or a dataset
    without video) switches to permutation-invariant training and audio-only input.
    When ``out_dir`` is given, ``metrics.csv`` and ``best.avlt`` are written there.
    """
    from .model import save_model

    if len(train_data) == 0:
        raise ValueError("training set is empty")
    audio_only = config.pit or train_data.video is None
    rng = np.random.default_rng(config.seed)
    params = model.trainable_parameters()
    opt = AdamW(params, lr=config.lr, weight_decay=config.weight_decay)
    out = Path(out_dir) if out_dir is not None else None
    writer = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        fh = open(out / "metrics.csv", "w", newline="")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(LOG_HEADER)
    history: List[dict] = []
    best = (-math.inf, {}, -1)
    dtype = nx.get_dtype()
    try:
        for epoch in range(config.epochs):
            lr = lr_at(epoch, config)
            opt.lr = lr
            order = rng.permutation(len(train_data))
            losses, gains = [], []
            for start in range(0, len(order), config.batch_size):
                idx = np.sort(order[start : start + config.batch_size])
                batch = train_data.subset(idx)
                video = None if audio_only else batch.video
                est = model.forward(batch.mixtures.astype(dtype), video, embedded=True)
                if audio_only:
                    loss, perms = pit_loss(est, batch.sources)
                else:
                    loss, perms = ordered_loss(est, batch.sources), None
                value = loss.item()
                if not math.isfinite(value):
                    if out is not None:
                        save_model(model, out / "diverged.avlt", extra=f"epoch={epoch}\n")
                    raise TrainingDiverged(f"non-finite loss at epoch {epoch}")
                opt.zero_grad()
                loss.backward()
                if config.clip_grad_norm > 0:
                    clip_grad_norm(params, config.clip_grad_norm)
                opt.step()
                losses.append(value * len(idx))
                for j, (e, refs, mix) in enumerate(zip(est.data, batch.sources, batch.mixtures)):
                    if perms is not None:
                        e = e[list(perms[j])]
                    gains.append(si_sdr_improvement(e, refs, mix))
            train_row = dict(epoch=epoch, split="train", loss=sum(losses) / len(train_data), si_sdri=float(np.mean(gains)), lr=lr)
            if len(val_data):
                val_sdri, val_loss = evaluate_with_loss(model, val_data, use_video=not audio_only, pit=audio_only)
            else:
                val_sdri = val_loss = float("nan")
            val_row = dict(epoch=epoch, split="val", loss=val_loss, si_sdri=val_sdri, lr=lr)
            for row in (train_row, val_row):
                history.append(row)
                if writer is not None:
                    writer.writerow([row["epoch"], row["split"], repr(row["loss"]), repr(row["si_sdri"]), repr(row["lr"])])
            if progress is not None:
                progress(train_row, val_row)
            log.info("epoch %d train loss %.3f val SI-SDRi %.2f dB", epoch, train_row["loss"], val_sdri)
            if val_sdri > best[0] or best[2] < 0:
                best = (val_sdri, {k: v.copy() for k, v in model.state_dict().items()}, epoch)
                if out is not None:
                    save_model(model, out / "best.avlt", extra=f"epoch={epoch}\nval_si_sdri={val_sdri!r}\n")
    finally:
        if writer is not None:
            fh.close()
    return TrainResult(history, best[0], best[1], best[2])

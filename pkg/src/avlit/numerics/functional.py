"""Differentiable primitives.

Every function takes and returns :class:`Tensor` objects. Convolutions accept
either batched ``(N, C, ...)`` or unbatched ``(C, ...)`` inputs; weights follow
the usual layout ``(C_out, C_in / groups, K)`` for convolutions and
``(C_in, C_out, K)`` for transposed convolutions.
"""

from __future__ import annotations

from typing import Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ShapeError, Tensor, as_tensor, record_macs

NORM_EPS = 1e-8


def _const(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype), dtype=like.dtype)


def _broadcast_shape(a: Tuple[int, ...], b: Tuple[int, ...]) -> Tuple[int, ...]:
    n = max(len(a), len(b))
    pa = (1,) * (n - len(a)) + tuple(a)
    pb = (1,) * (n - len(b)) + tuple(b)
    out = []
    for i, (x, y) in enumerate(zip(pa, pb)):
        if x == y or y == 1:
            out.append(x)
        elif x == 1:
            out.append(y)
        else:
            raise ShapeError(f"shapes {a} and {b} are not broadcastable", axis=str(i - n))
    return tuple(out)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = (a, _const(b, a)) if isinstance(a, Tensor) else (_const(a, b), b)
    _broadcast_shape(a.shape, b.shape)
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return Tensor._from_op(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = (a, _const(b, a)) if isinstance(a, Tensor) else (_const(a, b), b)
    _broadcast_shape(a.shape, b.shape)
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return Tensor._from_op(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    """Hadamard product with limited broadcasting."""
    a, b = (a, _const(b, a)) if isinstance(a, Tensor) else (_const(a, b), b)
    _broadcast_shape(a.shape, b.shape)
    ad, bd = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._from_op(ad * bd, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = (a, _const(b, a)) if isinstance(a, Tensor) else (_const(a, b), b)
    _broadcast_shape(a.shape, b.shape)
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        ga = _unbroadcast(g / bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._from_op(out, (a, b), backward, "div")


def log(x: Tensor) -> Tensor:
    xd = x.data

    def backward(g):
        return (g / xd,)

    return Tensor._from_op(np.log(xd), (x,), backward, "log")


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp values; the gradient is zero outside ``[lo, hi]``."""
    xd = x.data
    inside = (xd >= lo) & (xd <= hi)

    def backward(g):
        return (g * inside,)

    return Tensor._from_op(np.clip(xd, lo, hi), (x,), backward, "clip")


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0

    def backward(g):
        return (g * pos,)

    return Tensor._from_op(x.data * pos, (x,), backward, "relu")


def leaky_relu(x: Tensor, slope: float = 0.3) -> Tensor:
    xd = x.data
    scale = np.where(xd > 0, 1.0, slope).astype(xd.dtype)

    def backward(g):
        return (g * scale,)

    return Tensor._from_op(xd * scale, (x,), backward, "leaky_relu")


def prelu(x: Tensor, slope: Tensor) -> Tensor:
    """Parametric ReLU. ``slope`` has shape ``(1,)`` or ``(C,)`` for channel axis 1 (or 0 when unbatched)."""
    xd, a = x.data, slope.data
    if a.size == 1:
        ab = a.reshape(())
    else:
        axis = 1 if xd.ndim >= 3 else 0
        if xd.shape[axis] != a.size:
            raise ShapeError(f"prelu slope has {a.size} entries for {xd.shape[axis]} channels", axis="channels")
        ab = a.reshape((a.size,) + (1,) * (xd.ndim - axis - 1))
    neg = xd <= 0
    out = np.where(neg, ab * xd, xd)

    def backward(g):
        gx = np.where(neg, ab * g, g) if x.requires_grad else None
        ga = None
        if slope.requires_grad:
            contrib = g * xd * neg
            if a.size == 1:
                ga = np.asarray(contrib.sum(), dtype=a.dtype).reshape(a.shape)
            else:
                axes = tuple(i for i in range(xd.ndim) if i != axis)
                ga = contrib.sum(axis=axes).reshape(a.shape)
        return gx, ga

    return Tensor._from_op(out, (x, slope), backward, "prelu")


# ---------------------------------------------------------------------------
# reductions and reshaping
# ---------------------------------------------------------------------------


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = x.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).astype(x.dtype, copy=True),)

    return Tensor._from_op(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), backward, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = x.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([x.shape[a] for a in axes]))
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape

    def backward(g):
        return (g.reshape(src),)

    return Tensor._from_op(x.data.reshape(tuple(shape)), (x,), backward, "reshape")


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        return (np.ascontiguousarray(g.transpose(inverse)),)

    return Tensor._from_op(np.ascontiguousarray(x.data.transpose(axes)), (x,), backward, "transpose")


def getitem(x: Tensor, index) -> Tensor:
    shape, dtype = x.shape, x.dtype

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, index, g)
        return (full,)

    return Tensor._from_op(np.array(x.data[index]), (x,), backward, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    data = np.concatenate([t.data for t in tensors], axis=axis)
    return Tensor._from_op(data, tensors, backward, "concat")


def fit_length(x: Tensor, length: int) -> Tensor:
    """Trim or zero-pad the last axis to exactly ``length`` samples."""
    cur = x.shape[-1]
    if cur == length:
        return x
    if cur > length:
        return getitem(x, (Ellipsis, slice(0, length)))
    pad = [(0, 0)] * (x.ndim - 1) + [(0, length - cur)]

    def backward(g):
        return (g[..., :cur],)

    return Tensor._from_op(np.pad(x.data, pad), (x,), backward, "fit_length")


# ---------------------------------------------------------------------------
# normalization and resampling
# ---------------------------------------------------------------------------


def global_channel_norm(x: Tensor, scale: Tensor, shift: Tensor, eps: float = NORM_EPS) -> Tensor:
    """Normalize every channel over time to zero mean / unit variance, then apply ``scale``/``shift``.

    Input is ``(N, C, T)`` or ``(C, T)``; ``scale`` and ``shift`` have shape ``(C,)``.
    """
    xd = x.data
    C = xd.shape[-2]
    if scale.shape != (C,) or shift.shape != (C,):
        raise ShapeError(f"norm parameters must have shape ({C},)", axis="channels")
    mu = xd.mean(axis=-1, keepdims=True)
    centered = xd - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    gam = scale.data[:, None]
    out = xhat * gam + shift.data[:, None]
    record_macs("global_channel_norm", 2 * xd.size)

    def backward(g):
        red = tuple(range(xd.ndim - 2)) + (xd.ndim - 1,)
        gs = (g * xhat).sum(axis=red) if scale.requires_grad else None
        gb = g.sum(axis=red) if shift.requires_grad else None
        gx = None
        if x.requires_grad:
            dxhat = g * gam
            gx = inv_std * (
                dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
            )
        return gx, gs, gb

    return Tensor._from_op(out.astype(xd.dtype, copy=False), (x, scale, shift), backward, "global_channel_norm")


def nearest_indices(src_len: int, dst_len: int) -> np.ndarray:
    """Source column for each output column: ``floor(t * src_len / dst_len)``."""
    return (np.arange(dst_len, dtype=np.int64) * src_len) // dst_len


def nearest_interp1d(x: Tensor, target_len: int) -> Tensor:
    F = x.shape[-1]
    if F < 1 or target_len < 1:
        raise ShapeError(f"cannot interpolate length {F} to {target_len}", axis="time")
    if F == target_len:
        return x
    idx = nearest_indices(F, target_len)
    covers = target_len >= F

    def backward(g):
        if covers:
            starts = np.searchsorted(idx, np.arange(F))
            return (np.add.reduceat(g, starts, axis=-1),)
        full = np.zeros(x.shape, dtype=g.dtype)
        np.add.at(np.moveaxis(full, -1, 0), idx, np.moveaxis(g, -1, 0))
        return (full,)

    return Tensor._from_op(x.data[..., idx], (x,), backward, "nearest_interp1d")


# ---------------------------------------------------------------------------
# convolutions
# ---------------------------------------------------------------------------


def _batched(x: Tensor, spatial: int) -> Tuple[Tensor, bool]:
    if x.ndim == spatial + 1:
        return reshape(x, (1,) + x.shape), True
    if x.ndim != spatial + 2:
        raise ShapeError(f"expected {spatial + 1}-D or {spatial + 2}-D input, got shape {x.shape}", axis="rank")
    return x, False


def _unbatch(out: Tensor, squeeze: bool) -> Tensor:
    return reshape(out, out.shape[1:]) if squeeze else out


def conv_output_length(length: int, kernel: int, stride: int = 1, padding: int = 0) -> int:
    return (length + 2 * padding - kernel) // stride + 1


def conv1d(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    padding: int = 0,
    groups: int = 1,
) -> Tensor:
    x, squeeze = _batched(as_tensor(x), 1)
    N, Cin, T = x.shape
    Cout, Cg, K = weight.shape
    if Cin % groups or Cout % groups:
        raise ShapeError(f"channels {Cin}->{Cout} not divisible by groups={groups}", axis="channels")
    if Cg * groups != Cin:
        raise ShapeError(f"weight expects {Cg * groups} input channels, input has {Cin}", axis="channels")
    if K > T + 2 * padding:
        raise ShapeError(f"kernel {K} longer than padded input {T + 2 * padding}", axis="time")
    Tout = conv_output_length(T, K, stride, padding)
    record_macs("conv1d", N * K * Cg * Cout * Tout)

    xd, w = x.data, weight.data
    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding))) if padding else xd
    span = stride * (Tout - 1) + 1
    depthwise = groups == Cin and Cg == 1 and Cout == Cin

    if K == 1 and groups == 1:
        xs = xp[:, :, :span:stride] if stride > 1 else xp
        out = np.matmul(w[:, :, 0], xs)
    elif depthwise:
        out = np.zeros((N, Cout, Tout), dtype=xd.dtype)
        for k in range(K):
            out += w[None, :, 0, k, None] * xp[:, :, k : k + span : stride]
    else:
        win = sliding_window_view(xp, K, axis=2)[:, :, ::stride, :]
        if groups == 1:
            out = np.tensordot(win, w, axes=([1, 3], [1, 2])).transpose(0, 2, 1)
        else:
            wg = w.reshape(groups, Cout // groups, Cg, K)
            wing = win.reshape(N, groups, Cg, Tout, K)
            out = np.einsum("ngitk,goik->ngot", wing, wg).reshape(N, Cout, Tout)
    if bias is not None:
        out = out + bias.data[None, :, None]
    out = np.ascontiguousarray(out, dtype=xd.dtype)

    def backward(g):
        gx = gw = gb = None
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2))
        if K == 1 and groups == 1:
            xs = xp[:, :, :span:stride] if stride > 1 else xp
            if weight.requires_grad:
                gw = np.tensordot(g, xs, axes=([0, 2], [0, 2]))[:, :, None]
            if x.requires_grad:
                gxs = np.matmul(w[:, :, 0].T, g)
                if stride > 1 or padding:
                    gxp = np.zeros(xp.shape, dtype=g.dtype)
                    gxp[:, :, :span:stride] = gxs
                    gx = gxp[:, :, padding : padding + T]
                else:
                    gx = gxs
            return gx, gw, gb
        if depthwise:
            if weight.requires_grad:
                gw = np.empty_like(w)
                for k in range(K):
                    gw[:, 0, k] = np.einsum("nct,nct->c", g, xp[:, :, k : k + span : stride])
            if x.requires_grad:
                gxp = np.zeros(xp.shape, dtype=g.dtype)
                for k in range(K):
                    gxp[:, :, k : k + span : stride] += w[None, :, 0, k, None] * g
                gx = gxp[:, :, padding : padding + T]
            return gx, gw, gb
        win = sliding_window_view(xp, K, axis=2)[:, :, ::stride, :]
        if groups == 1:
            if weight.requires_grad:
                gw = np.tensordot(g, win, axes=([0, 2], [0, 2]))
            gwin = np.tensordot(g, w, axes=([1], [0])).transpose(0, 2, 1, 3) if x.requires_grad else None
        else:
            wg = w.reshape(groups, Cout // groups, Cg, K)
            wing = win.reshape(N, groups, Cg, Tout, K)
            gg = g.reshape(N, groups, Cout // groups, Tout)
            if weight.requires_grad:
                gw = np.einsum("ngot,ngitk->goik", gg, wing).reshape(w.shape)
            gwin = np.einsum("ngot,goik->ngitk", gg, wg).reshape(N, Cin, Tout, K) if x.requires_grad else None
        if gwin is not None:
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            for k in range(K):
                gxp[:, :, k : k + span : stride] += gwin[:, :, :, k]
            gx = gxp[:, :, padding : padding + T]
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _unbatch(Tensor._from_op(out, parents, backward, "conv1d"), squeeze)


def conv_transpose1d(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    padding: int = 0,
) -> Tensor:
    """Transposed 1-D convolution, the adjoint of :func:`conv1d` with the same weight."""
    x, squeeze = _batched(as_tensor(x), 1)
    N, Cin, T = x.shape
    Cw, Cout, K = weight.shape
    if Cw != Cin:
        raise ShapeError(f"weight expects {Cw} input channels, input has {Cin}", axis="channels")
    full = (T - 1) * stride + K
    Tout = full - 2 * padding
    if Tout < 1:
        raise ShapeError(f"padding {padding} too large for output length {full}", axis="time")
    record_macs("conv_transpose1d", N * K * Cin * Cout * T)

    xd, w = x.data, weight.data
    span = stride * (T - 1) + 1
    cols = np.tensordot(xd, w, axes=([1], [0])).transpose(0, 2, 1, 3)  # N, Cout, T, K
    out = np.zeros((N, Cout, full), dtype=xd.dtype)
    for k in range(K):
        out[:, :, k : k + span : stride] += cols[:, :, :, k]
    out = out[:, :, padding : padding + Tout]
    if bias is not None:
        out = out + bias.data[None, :, None]
    out = np.ascontiguousarray(out, dtype=xd.dtype)

    def backward(g):
        gfull = np.pad(g, ((0, 0), (0, 0), (padding, padding))) if padding else g
        gwin = sliding_window_view(gfull, K, axis=2)[:, :, ::stride, :]  # N, Cout, T, K
        gx = np.tensordot(gwin, w, axes=([1, 3], [1, 2])).transpose(0, 2, 1) if x.requires_grad else None
        gw = np.tensordot(xd, gwin, axes=([0, 2], [0, 2])) if weight.requires_grad else None
        gb = g.sum(axis=(0, 2)) if bias is not None and bias.requires_grad else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _unbatch(Tensor._from_op(out, parents, backward, "conv_transpose1d"), squeeze)


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    padding: int = 0,
) -> Tensor:
    x, squeeze = _batched(as_tensor(x), 2)
    N, Cin, H, W = x.shape
    Cout, Cw, KH, KW = weight.shape
    if Cw != Cin:
        raise ShapeError(f"weight expects {Cw} input channels, input has {Cin}", axis="channels")
    if KH > H + 2 * padding:
        raise ShapeError(f"kernel height {KH} exceeds padded input {H + 2 * padding}", axis="height")
    if KW > W + 2 * padding:
        raise ShapeError(f"kernel width {KW} exceeds padded input {W + 2 * padding}", axis="width")
    Ho = conv_output_length(H, KH, stride, padding)
    Wo = conv_output_length(W, KW, stride, padding)
    record_macs("conv2d", N * KH * KW * Cin * Cout * Ho * Wo)

    xd, w = x.data, weight.data
    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
    win = sliding_window_view(xp, (KH, KW), axis=(2, 3))[:, :, ::stride, ::stride]  # N,Cin,Ho,Wo,KH,KW
    out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out, dtype=xd.dtype)

    def backward(g):
        gw = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3])) if weight.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gwin = np.tensordot(g, w, axes=([1], [0]))  # N,Ho,Wo,Cin,KH,KW
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            for i in range(KH):
                for j in range(KW):
                    gxp[:, :, i : i + stride * (Ho - 1) + 1 : stride, j : j + stride * (Wo - 1) + 1 : stride] += (
                        gwin[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                    )
            gx = gxp[:, :, padding : padding + H, padding : padding + W]
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _unbatch(Tensor._from_op(out, parents, backward, "conv2d"), squeeze)


def conv_transpose2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1) -> Tensor:
    x, squeeze = _batched(as_tensor(x), 2)
    N, Cin, H, W = x.shape
    Cw, Cout, KH, KW = weight.shape
    if Cw != Cin:
        raise ShapeError(f"weight expects {Cw} input channels, input has {Cin}", axis="channels")
    Ho, Wo = (H - 1) * stride + KH, (W - 1) * stride + KW
    record_macs("conv_transpose2d", N * KH * KW * Cin * Cout * H * W)

    xd, w = x.data, weight.data
    cols = np.tensordot(xd, w, axes=([1], [0]))  # N,H,W,Cout,KH,KW
    out = np.zeros((N, Cout, Ho, Wo), dtype=xd.dtype)
    for i in range(KH):
        for j in range(KW):
            out[:, :, i : i + stride * (H - 1) + 1 : stride, j : j + stride * (W - 1) + 1 : stride] += cols[
                :, :, :, :, i, j
            ].transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out, dtype=xd.dtype)

    def backward(g):
        gwin = sliding_window_view(g, (KH, KW), axis=(2, 3))[:, :, ::stride, ::stride]  # N,Cout,H,W,KH,KW
        gx = np.tensordot(gwin, w, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2) if x.requires_grad else None
        gw = np.tensordot(xd, gwin, axes=([0, 2, 3], [0, 2, 3])) if weight.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if bias is not None and bias.requires_grad else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _unbatch(Tensor._from_op(out, parents, backward, "conv_transpose2d"), squeeze)

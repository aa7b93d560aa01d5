"""Differentiable tensor kernels: convolution, activations, resampling, gather.

Kernels operate on :class:`~duodet.tensor.Tensor` and return new tensors
wired into the backward graph.  Shapes follow the (N, C, H, W) layout.
Broadcasting is deliberately restricted to the one case the detector
needs: a single-channel mask against a multi-channel feature map.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, grad_enabled

__all__ = [
    "ShapeError",
    "conv2d",
    "sigmoid",
    "exp",
    "leaky_relu",
    "add",
    "sub",
    "mul",
    "scale",
    "concat_channels",
    "maxpool2x2",
    "upsample_nearest2x",
    "gather_cells",
    "column",
    "stack_columns",
]


class ShapeError(ValueError):
    """Operand shapes do not satisfy an op's contract."""


_F8 = np.finfo(np.float64)
# Smallest/largest values sigmoid may return so the open interval (0, 1)
# holds for arbitrarily large finite logits.
_SIG_LO = _F8.tiny
_SIG_HI = 1.0 - _F8.epsneg


def _result(data: np.ndarray, parents: Sequence[Tensor],
            backward: Callable[[np.ndarray], None]) -> Tensor:
    out = Tensor(data)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def stable_sigmoid(x: np.ndarray) -> np.ndarray:
    """Numerically stable logistic function on a plain array."""
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation with square kernels.

    ``weight`` has shape (C_out, C_in, k, k); output spatial extents are
    ``floor((H + 2*padding - k) / stride) + 1``.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input/weight, got {x.shape} and {weight.shape}")
    stride = int(stride)
    padding = int(padding)
    if stride < 1 or padding < 0:
        raise ValueError(f"bad stride/padding: {stride}/{padding}")
    n, c, h, w = x.shape
    c_out, c_in, kh, kw = weight.shape
    if c_in != c:
        raise ShapeError(f"conv2d channel mismatch: input has {c}, weight expects {c_in}")
    if bias is not None and bias.shape != (c_out,):
        raise ShapeError(f"conv2d bias shape {bias.shape}, expected ({c_out},)")
    h_out = (h + 2 * padding - kh) // stride + 1
    w_out = (w + 2 * padding - kw) // stride + 1
    if h_out < 1 or w_out < 1:
        raise ShapeError(f"conv2d output collapses: input {h}x{w}, kernel {kh}, "
                         f"stride {stride}, padding {padding}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) \
        if padding else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(
        n * h_out * w_out, c * kh * kw)
    wmat = weight.data.reshape(c_out, -1)
    flat = cols @ wmat.T
    if bias is not None:
        flat = flat + bias.data
    out = np.ascontiguousarray(flat.reshape(n, h_out, w_out, c_out).transpose(0, 3, 1, 2))

    def backward(g: np.ndarray) -> None:
        gr = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * h_out * w_out, c_out)
        if weight.requires_grad:
            weight._accum((gr.T @ cols).reshape(weight.shape))
        if bias is not None and bias.requires_grad:
            bias._accum(g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            dcols = (gr @ wmat).reshape(n, h_out, w_out, c, kh, kw).transpose(0, 3, 1, 2, 4, 5)
            dxp = np.zeros((n, c, h + 2 * padding, w + 2 * padding))
            for ki in range(kh):
                for kj in range(kw):
                    dxp[:, :, ki:ki + stride * h_out:stride,
                        kj:kj + stride * w_out:stride] += dcols[:, :, :, :, ki, kj]
            x._accum(dxp[:, :, padding:padding + h, padding:padding + w] if padding else dxp)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, parents, backward)


def sigmoid(x: Tensor) -> Tensor:
    """Logistic activation, clamped to stay strictly inside (0, 1)."""
    out = np.clip(stable_sigmoid(x.data), _SIG_LO, _SIG_HI)

    def backward(g: np.ndarray) -> None:
        x._accum(g * out * (1.0 - out))

    return _result(out, (x,), backward)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)

    def backward(g: np.ndarray) -> None:
        x._accum(g * out)

    return _result(out, (x,), backward)


def leaky_relu(x: Tensor, slope: float = 0.1) -> Tensor:
    if not 0.0 <= slope < 1.0:
        raise ValueError(f"leaky slope must be in [0, 1), got {slope}")
    gate = np.where(x.data >= 0, 1.0, slope)
    out = x.data * gate

    def backward(g: np.ndarray) -> None:
        x._accum(g * gate)

    return _result(out, (x,), backward)


def _pair_mode(a: Tensor, b: Tensor) -> str:
    if a.shape == b.shape:
        return "equal"
    if (a.ndim == 4 and b.ndim == 4 and b.shape[1] == 1 and a.shape[1] != 1
            and a.shape[0] == b.shape[0] and a.shape[2:] == b.shape[2:]):
        return "mask"
    raise ShapeError(f"operands not aligned: {a.shape} vs {b.shape} "
                     "(only single-channel mask broadcast is supported)")


def _reduce_mask_grad(g: np.ndarray) -> np.ndarray:
    return g.sum(axis=1, keepdims=True)


def add(a: Tensor, b: Tensor | float) -> Tensor:
    if not isinstance(b, Tensor):
        bv = float(b)
        out = a.data + bv

        def backward_s(g: np.ndarray) -> None:
            a._accum(g)

        return _result(out, (a,), backward_s)

    mode = _pair_mode(a, b)
    out = a.data + b.data

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            a._accum(g)
        if b.requires_grad:
            b._accum(_reduce_mask_grad(g) if mode == "mask" else g)

    return _result(out, (a, b), backward)


def sub(a: Tensor, b: Tensor | float) -> Tensor:
    if not isinstance(b, Tensor):
        bv = float(b)
        out = a.data - bv

        def backward_s(g: np.ndarray) -> None:
            a._accum(g)

        return _result(out, (a,), backward_s)

    mode = _pair_mode(a, b)
    out = a.data - b.data

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            a._accum(g)
        if b.requires_grad:
            b._accum(-(_reduce_mask_grad(g) if mode == "mask" else g))

    return _result(out, (a, b), backward)


def mul(a: Tensor, b: Tensor | float) -> Tensor:
    if not isinstance(b, Tensor):
        return scale(a, float(b))

    mode = _pair_mode(a, b)
    out = a.data * b.data

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            a._accum(g * b.data)
        if b.requires_grad:
            gb = g * a.data
            b._accum(_reduce_mask_grad(gb) if mode == "mask" else gb)

    return _result(out, (a, b), backward)


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    out = a.data * s

    def backward(g: np.ndarray) -> None:
        a._accum(g * s)

    return _result(out, (a,), backward)


def concat_channels(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise ValueError("concat_channels needs at least one tensor")
    first = parts[0]
    for p in parts[1:]:
        if p.ndim != 4 or first.ndim != 4:
            raise ShapeError("concat_channels expects 4-D tensors")
        if (p.shape[0], p.shape[2], p.shape[3]) != (first.shape[0], first.shape[2], first.shape[3]):
            raise ShapeError(f"concat_channels spatial/batch mismatch: {first.shape} vs {p.shape}")
    out = np.concatenate([p.data for p in parts], axis=1)
    sizes = [p.shape[1] for p in parts]

    def backward(g: np.ndarray) -> None:
        offset = 0
        for p, c in zip(parts, sizes):
            if p.requires_grad:
                p._accum(g[:, offset:offset + c])
            offset += c

    return _result(out, tuple(parts), backward)


def maxpool2x2(x: Tensor) -> Tensor:
    """2x2 max-pool; even extents required."""
    if x.ndim != 4:
        raise ShapeError(f"maxpool2x2 expects 4-D input, got {x.shape}")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2x2 needs even extents, got {h}x{w}")
    blocks = x.data.reshape(n, c, h // 2, 2, w // 2, 2)
    flat = np.ascontiguousarray(blocks.transpose(0, 1, 2, 4, 3, 5)).reshape(n, c, h // 2, w // 2, 4)
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def backward(g: np.ndarray) -> None:
        dflat = np.zeros_like(flat)
        np.put_along_axis(dflat, idx[..., None], g[..., None], axis=-1)
        dx = dflat.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        x._accum(dx)

    return _result(out, (x,), backward)


def upsample_nearest2x(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"upsample expects 4-D input, got {x.shape}")
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)
    n, c, h, w = x.shape

    def backward(g: np.ndarray) -> None:
        x._accum(g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)))

    return _result(out, (x,), backward)


def gather_cells(x: Tensor, n_idx: np.ndarray, y_idx: np.ndarray, x_idx: np.ndarray) -> Tensor:
    """Select per-cell channel vectors: (N, C, H, W) -> (P, C)."""
    if x.ndim != 4:
        raise ShapeError(f"gather_cells expects 4-D input, got {x.shape}")
    n_idx = np.asarray(n_idx, dtype=np.intp)
    y_idx = np.asarray(y_idx, dtype=np.intp)
    x_idx = np.asarray(x_idx, dtype=np.intp)
    out = x.data[n_idx, :, y_idx, x_idx]
    n, c, h, w = x.shape

    def backward(g: np.ndarray) -> None:
        dxt = np.zeros((n, h, w, c))
        np.add.at(dxt, (n_idx, y_idx, x_idx), g)
        x._accum(dxt.transpose(0, 3, 1, 2))

    return _result(out, (x,), backward)


def column(x: Tensor, j: int) -> Tensor:
    """Column j of a (P, C) matrix as a (P,) vector."""
    if x.ndim != 2:
        raise ShapeError(f"column expects a 2-D tensor, got {x.shape}")
    out = x.data[:, j].copy()

    def backward(g: np.ndarray) -> None:
        dx = np.zeros(x.shape)
        dx[:, j] = g
        x._accum(dx)

    return _result(out, (x,), backward)


def stack_columns(cols: Sequence[Tensor]) -> Tensor:
    """Stack (P,) vectors into a (P, k) matrix."""
    if not cols:
        raise ValueError("stack_columns needs at least one column")
    for c in cols:
        if c.shape != cols[0].shape or c.ndim != 1:
            raise ShapeError("stack_columns expects equal-length 1-D tensors")
    out = np.stack([c.data for c in cols], axis=1)

    def backward(g: np.ndarray) -> None:
        for j, c in enumerate(cols):
            if c.requires_grad:
                c._accum(g[:, j])

    return _result(out, tuple(cols), backward)


# Operator sugar so arithmetic-heavy code (box decoding) stays readable.
Tensor.__add__ = lambda self, other: add(self, other)
Tensor.__sub__ = lambda self, other: sub(self, other)
Tensor.__mul__ = lambda self, other: mul(self, other)
Tensor.__rmul__ = lambda self, other: scale(self, other)
Tensor.__neg__ = lambda self: scale(self, -1.0)

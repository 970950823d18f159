"""Rank-4 feature-map primitives with hand-written backward passes.

Every feature map is a float64 ``numpy.ndarray`` in (batch, channel, height,
width) layout. Forward functions are pure; each has a matching ``*_backward``
that takes the upstream gradient plus whatever forward inputs it needs and
returns gradients in the same order as the forward arguments.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

ACTIVATIONS = ("sigmoid", "softplus", "silu")
REDUCTIONS = ("mean", "max")


class ShapeError(ValueError):
    """Extents of two operands do not agree."""


class DomainError(ValueError):
    """An argument lies outside the domain of an operation."""


def tensor4(data, dims: Sequence[int] | None = None) -> np.ndarray:
    """Build a validated float64 feature map.

    ``data`` may be any array-like; if ``dims`` is given it is reshaped
    (row-major) to those extents first.
    """
    arr = np.array(data, dtype=np.float64, copy=True)
    if dims is not None:
        dims = tuple(int(v) for v in dims)
        if arr.size != int(np.prod(dims)):
            raise ShapeError(f"{arr.size} values cannot fill extents {dims}")
        arr = arr.reshape(dims)
    check_tensor4(arr)
    return np.ascontiguousarray(arr)


def check_tensor4(x: np.ndarray, name: str = "x") -> None:
    if x.ndim != 4:
        raise ShapeError(f"{name} must be rank 4 (B, C, H, W), got shape {x.shape}")
    if min(x.shape) < 1:
        raise ShapeError(f"{name} has an empty extent: {x.shape}")


def _require_finite(x: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(x)):
        raise DomainError(f"{op}: non-finite input")


# ---------------------------------------------------------------- 1x1 conv


def pointwise_conv(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """out[b, co, h, w] = sum_ci W[co, ci] * x[b, ci, h, w] + bias[co]."""
    check_tensor4(x)
    cout = w.shape[0]
    if w.ndim != 4 or w.shape[2:] != (1, 1) or w.shape[1] != x.shape[1]:
        raise ShapeError(f"kernel {w.shape} does not fit input {x.shape}")
    if b.shape != (cout,):
        raise ShapeError(f"bias {b.shape} does not match kernel {w.shape}")
    B, C, H, W = x.shape
    out = np.matmul(w[:, :, 0, 0], x.reshape(B, C, H * W)).reshape(B, cout, H, W)
    return out + b[None, :, None, None]


def pointwise_conv_backward(dout, x, w):
    B, C, H, W = x.shape
    d2 = dout.reshape(B, -1, H * W)
    dx = np.matmul(w[:, :, 0, 0].T, d2).reshape(x.shape)
    dw = np.matmul(d2, x.reshape(B, C, H * W).transpose(0, 2, 1)).sum(axis=0)[:, :, None, None]
    db = dout.sum(axis=(0, 2, 3))
    return dx, dw, db


# ------------------------------------------------- 3x3 conv, same padding


_TAPS = [(i, j) for i in range(3) for j in range(3)]


def _im2col3x3(x: np.ndarray) -> np.ndarray:
    # (B, C*9, H*W); row index is c*9 + 3*i + j, matching w.reshape(O, C*9)
    B, C, H, W = x.shape
    xp = np.zeros((B, C, H + 2, W + 2))
    xp[:, :, 1:-1, 1:-1] = x
    win = sliding_window_view(xp, (3, 3), axis=(2, 3))  # (B, C, H, W, 3, 3)
    return np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(B, C * 9, H * W)


def conv3x3(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Stride-1 3x3 convolution (cross-correlation) with zero 'same' padding."""
    check_tensor4(x)
    if w.ndim != 4 or w.shape[2:] != (3, 3) or w.shape[1] != x.shape[1]:
        raise ShapeError(f"kernel {w.shape} does not fit input {x.shape}")
    if b.shape != (w.shape[0],):
        raise ShapeError(f"bias {b.shape} does not match kernel {w.shape}")
    B, C, H, W = x.shape
    out = np.matmul(w.reshape(w.shape[0], C * 9), _im2col3x3(x))
    return out.reshape(B, -1, H, W) + b[None, :, None, None]


def conv3x3_backward(dout, x, w):
    B, C, H, W = x.shape
    O = w.shape[0]
    d2 = dout.reshape(B, O, H * W)
    cols = _im2col3x3(x)
    dw = np.matmul(d2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
    db = dout.sum(axis=(0, 2, 3))
    dcols = np.matmul(w.reshape(O, C * 9).T, d2).reshape(B, C, 9, H, W)
    dxp = np.zeros((B, C, H + 2, W + 2))
    for t, (i, j) in enumerate(_TAPS):
        dxp[:, :, i : i + H, j : j + W] += dcols[:, :, t]
    return dxp[:, :, 1:-1, 1:-1].copy(), dw, db


# ------------------------------------------------------------ activations


def sigmoid(v):
    return expit(np.asarray(v, dtype=np.float64))


def softplus(v):
    v = np.asarray(v, dtype=np.float64)
    return np.logaddexp(0.0, v)


def activation(kind: str, x: np.ndarray) -> np.ndarray:
    if kind not in ACTIVATIONS:
        raise ValueError(f"unknown activation {kind!r}; expected one of {ACTIVATIONS}")
    _require_finite(x, kind)
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "softplus":
        return softplus(x)
    return x * sigmoid(x)


def activation_backward(kind: str, x: np.ndarray, dout: np.ndarray) -> np.ndarray:
    if kind not in ACTIVATIONS:
        raise ValueError(f"unknown activation {kind!r}")
    s = sigmoid(x)
    if kind == "sigmoid":
        return dout * s * (1.0 - s)
    if kind == "softplus":
        return dout * s
    return dout * (s + x * s * (1.0 - s))


# -------------------------------------------------------------- reductions


def reduce_spatial(kind: str, x: np.ndarray) -> np.ndarray:
    """Per-(batch, channel) spatial mean or max, kept as (B, C, 1, 1)."""
    check_tensor4(x)
    if kind == "mean":
        hw = x.shape[2] * x.shape[3]
        mean = x.sum(axis=(2, 3), keepdims=True) / hw
        # the rounded quotient can land an ulp outside [min, max] (for instance
        # on a constant channel); the exact mean never does
        return np.clip(mean, x.min(axis=(2, 3), keepdims=True), x.max(axis=(2, 3), keepdims=True))
    if kind == "max":
        return x.max(axis=(2, 3), keepdims=True)
    raise ValueError(f"unknown reduction {kind!r}; expected one of {REDUCTIONS}")


def reduce_spatial_backward(kind: str, x: np.ndarray, dout: np.ndarray) -> np.ndarray:
    B, C, H, W = x.shape
    if kind == "mean":
        return np.broadcast_to(dout / (H * W), x.shape).copy()
    if kind != "max":
        raise ValueError(f"unknown reduction {kind!r}")
    # argmax picks the first row-major position on ties
    flat = x.reshape(B, C, H * W)
    idx = flat.argmax(axis=2)
    dx = np.zeros_like(flat)
    np.put_along_axis(dx, idx[..., None], dout.reshape(B, C, 1), axis=2)
    return dx.reshape(x.shape)


# ------------------------------------------------------------------ softmax


def softmax_over_channels(z: np.ndarray, T: np.ndarray) -> np.ndarray:
    """Temperature softmax across the channel axis of (B, K, 1, 1) logits."""
    if z.shape != T.shape:
        raise ShapeError(f"logits {z.shape} and temperatures {T.shape} differ")
    if np.any(T <= 0):
        raise DomainError("temperatures must be strictly positive")
    u = z / T
    e = np.exp(u - u.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def softmax_backward(dout, w, z, T):
    """Gradients w.r.t. (z, T) given the forward output ``w``."""
    du = w * (dout - (dout * w).sum(axis=1, keepdims=True))
    dz = du / T
    dT = -du * z / (T * T)
    return dz, dT


# ------------------------------------------------------- concat and split


def concat_channels(parts: Sequence[np.ndarray]) -> np.ndarray:
    if not parts:
        raise ShapeError("concat_channels needs at least one part")
    ref = parts[0].shape
    for p in parts:
        check_tensor4(p)
        if (p.shape[0],) + p.shape[2:] != (ref[0],) + ref[2:]:
            raise ShapeError(f"cannot concatenate {ref} with {p.shape}")
    return np.concatenate(parts, axis=1)


def split_channels(x: np.ndarray, sizes: Sequence[int]) -> list[np.ndarray]:
    check_tensor4(x)
    if sum(sizes) != x.shape[1] or any(s < 1 for s in sizes):
        raise ShapeError(f"split sizes {list(sizes)} do not partition {x.shape[1]} channels")
    cuts = np.cumsum(sizes)[:-1]
    return [np.ascontiguousarray(p) for p in np.split(x, cuts, axis=1)]

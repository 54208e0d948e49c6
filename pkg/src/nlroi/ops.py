"""Primitive tensor operations for the inter-RoI attention block.

Every op validates its inputs, allocates a fresh output array, and returns
it marked read-only. Nothing here mutates or aliases an argument.

Determinism contract: identical inputs give bit-identical outputs across
runs and across machine thread counts. All contractions therefore go
through ``np.einsum`` with its default serial evaluation (no BLAS dispatch,
no optimized path), and every kernel accumulates in one fixed order.
"""

from __future__ import annotations

import numpy as np

from .validation import (
    as_tensor,
    check_feature_blob,
    check_rank,
    check_same_dtype,
    frozen,
)


def _contract_flat(w: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Apply a (D_out, D_in) channel map to a blob, returning (N, D_out, H, W).

    The blob is transposed so the contracted axis is the slowest-moving one
    and the N*H*W columns are contiguous; the 2-D einsum then runs a single
    dense pass per output channel. Equivalent to einsum('od,ndhw->nohw') but
    considerably faster, with the same fixed accumulation order over d.
    """
    n, d, h, w_ext = x.shape
    cols = np.ascontiguousarray(x.transpose(1, 0, 2, 3)).reshape(d, n * h * w_ext)
    out = np.einsum("od,dk->ok", w, cols)
    return np.ascontiguousarray(
        out.reshape(w.shape[0], n, h, w_ext).transpose(1, 0, 2, 3)
    )


def conv1x1(x, w, b=None) -> np.ndarray:
    """Pointwise convolution: ``out[n,o,h,w] = sum_d w[o,d]*x[n,d,h,w] + b[o]``.

    ``x`` is a feature blob (n_rois, d_in, height, width), ``w`` a channel
    map (d_out, d_in), ``b`` an optional per-channel bias (d_out,).
    """
    x = check_feature_blob(x, name="x")
    w = check_rank(as_tensor(w, name="w", dtype=x.dtype), 2, name="w")
    if w.shape[1] != x.shape[1]:
        raise ValueError(
            f"conv1x1: w has shape {w.shape} but x has shape {x.shape}; "
            f"w's second extent must equal x's channel extent"
        )
    out = _contract_flat(w, x)
    if b is not None:
        b = check_rank(as_tensor(b, name="b", dtype=x.dtype), 1, name="b")
        if b.shape[0] != w.shape[0]:
            raise ValueError(
                f"conv1x1: b has shape {b.shape}, expected ({w.shape[0]},)"
            )
        out += b[None, :, None, None]
    return frozen(out)


def conv3x3(x, w, b=None) -> np.ndarray:
    """3x3 convolution with stride 1 and zero padding 1 (same-size output).

    ``out[n,o,h,w] = sum_{d,dy,dx} w[o,d,dy,dx] * xpad[n,d,h+dy-1,w+dx-1] + b[o]``
    where ``xpad`` is ``x`` zero-extended by one pixel on each spatial border.
    The nine taps are accumulated in fixed row-major (dy, dx) order.
    """
    x = check_feature_blob(x, name="x")
    w = check_rank(as_tensor(w, name="w", dtype=x.dtype), 4, name="w")
    if w.shape[1] != x.shape[1] or w.shape[2:] != (3, 3):
        raise ValueError(
            f"conv3x3: w has shape {w.shape} but x has shape {x.shape}; "
            f"expected w of shape (d_out, {x.shape[1]}, 3, 3)"
        )
    n, d, h, wd = x.shape
    d_out = w.shape[0]
    pad = np.zeros((n, d, h + 2, wd + 2), dtype=x.dtype)
    pad[:, :, 1 : h + 1, 1 : wd + 1] = x
    out = np.zeros((n, d_out, h, wd), dtype=x.dtype)
    for dy in range(3):
        for dx in range(3):
            out += _contract_flat(w[:, :, dy, dx], pad[:, :, dy : dy + h, dx : dx + wd])
    if b is not None:
        b = check_rank(as_tensor(b, name="b", dtype=x.dtype), 1, name="b")
        if b.shape[0] != d_out:
            raise ValueError(
                f"conv3x3: b has shape {b.shape}, expected ({d_out},)"
            )
        out += b[None, :, None, None]
    return frozen(out)


def relu(x) -> np.ndarray:
    """Elementwise max(0, x)."""
    x = as_tensor(x, name="x")
    return frozen(np.maximum(x, x.dtype.type(0)))


def flatten_rois(x) -> np.ndarray:
    """Flatten each RoI's (C, H, W) block row-major into one row: (N, C*H*W)."""
    x = check_rank(as_tensor(x, name="x"), 4, name="x")
    return frozen(x.reshape(x.shape[0], -1).copy())


def matmul(a, b) -> np.ndarray:
    """Matrix product of (M, K) and (K, P), serial einsum (fixed order over k)."""
    a = check_rank(as_tensor(a, name="a"), 2, name="a")
    b = check_rank(as_tensor(b, name="b"), 2, name="b")
    check_same_dtype(("a", a), ("b", b))
    if a.shape[1] != b.shape[0]:
        raise ValueError(
            f"matmul: inner extents disagree, a is {a.shape} and b is {b.shape}"
        )
    return frozen(np.einsum("mk,kp->mp", a, b))


def row_softmax(s) -> np.ndarray:
    """Softmax over each row of a (N, M) matrix.

    Each row is shifted by its max before exponentiation, so any finite
    input is safe. Entries that underflow to zero after normalization are
    clamped to the smallest positive normal of the dtype: returned values
    are always strictly positive, and every row sums to 1 up to rounding.
    """
    s = check_rank(as_tensor(s, name="s"), 2, name="s")
    if not np.all(np.isfinite(s)):
        raise ValueError("s contains non-finite values")
    e = np.exp(s - np.max(s, axis=1, keepdims=True))
    p = e / np.sum(e, axis=1, keepdims=True)
    np.maximum(p, np.finfo(s.dtype).tiny, out=p)
    return frozen(p)


def global_avg_pool(x) -> np.ndarray:
    """Mean over the spatial axes of (N, C, H, W), giving (N, C)."""
    x = check_rank(as_tensor(x, name="x"), 4, name="x")
    n, c, h, w = x.shape
    if h * w < 1:
        raise ValueError(f"x spatial extents must be >= 1, got shape {x.shape}")
    return frozen(x.mean(axis=(2, 3)))


def tile_spatial(v, h: int, w: int) -> np.ndarray:
    """Broadcast per-RoI vectors (N, C) to constant maps (N, C, h, w)."""
    v = check_rank(as_tensor(v, name="v"), 2, name="v")
    if h < 1 or w < 1:
        raise ValueError(f"tile extents must be >= 1, got h={h}, w={w}")
    return frozen(np.ascontiguousarray(np.broadcast_to(v[:, :, None, None], v.shape + (h, w))))


def concat_channels(a, b) -> np.ndarray:
    """Stack two blobs along the channel axis; ``b`` may have zero channels."""
    a = check_rank(as_tensor(a, name="a"), 4, name="a")
    b = check_rank(as_tensor(b, name="b"), 4, name="b")
    check_same_dtype(("a", a), ("b", b))
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ValueError(
            f"concat_channels: non-channel axes disagree, a is {a.shape} and b is {b.shape}"
        )
    return frozen(np.concatenate([a, b], axis=1))

"""Convolution, padding, pixel shuffle, and the finite-difference oracle.

Everything spatial is lowered onto the two linear primitives in
:mod:`hetsr.tensor` (per-row gather/scatter) plus matmul: zero padding is
a scatter, im2col and replicate padding are gathers, pixel (un)shuffle is
a permutation gather.  Their adjoint pairing is what keeps conv2d fully
double-differentiable without hand-written backward kernels.
"""

from __future__ import annotations

import numpy as np

from .errors import HetSRError, ShapeError
from .tensor import (
    Tensor,
    add,
    as_tensor,
    gather_rows,
    matmul,
    no_grad,
    reshape,
    scatter_rows,
)

# index maps are pure functions of shape parameters; cache them
_IDX_CACHE: dict = {}
_IDX_CACHE_MAX = 128


def _cached(key, builder):
    idx = _IDX_CACHE.get(key)
    if idx is None:
        if len(_IDX_CACHE) >= _IDX_CACHE_MAX:
            _IDX_CACHE.pop(next(iter(_IDX_CACHE)))
        idx = builder()
        _IDX_CACHE[key] = idx
    return idx


def _zero_pad_index(c, h, w, p):
    def build():
        hp, wp = h + 2 * p, w + 2 * p
        ci, ii, ji = np.meshgrid(
            np.arange(c), np.arange(h), np.arange(w), indexing="ij"
        )
        return ((ci * hp + ii + p) * wp + ji + p).reshape(-1).astype(np.int64)

    return _cached(("zpad", c, h, w, p), build)


def _replicate_pad_index(c, h, w, p):
    def build():
        hp, wp = h + 2 * p, w + 2 * p
        ci, ii, ji = np.meshgrid(
            np.arange(c), np.arange(hp), np.arange(wp), indexing="ij"
        )
        src_i = np.clip(ii - p, 0, h - 1)
        src_j = np.clip(ji - p, 0, w - 1)
        return ((ci * h + src_i) * w + src_j).reshape(-1).astype(np.int64)

    return _cached(("rpad", c, h, w, p), build)


def _im2col_index(c, hp, wp, kh, kw, stride, ho, wo):
    def build():
        ci, kii, kji, ii, ji = np.meshgrid(
            np.arange(c),
            np.arange(kh),
            np.arange(kw),
            np.arange(ho),
            np.arange(wo),
            indexing="ij",
        )
        rows = ii * stride + kii
        cols = ji * stride + kji
        return ((ci * hp + rows) * wp + cols).reshape(-1).astype(np.int64)

    return _cached(("im2col", c, hp, wp, kh, kw, stride, ho, wo), build)


def _shuffle_index(c_in, h, w, r):
    def build():
        c_out = c_in // (r * r)
        co, io, jo = np.meshgrid(
            np.arange(c_out), np.arange(h * r), np.arange(w * r), indexing="ij"
        )
        ci = co * r * r + (io % r) * r + (jo % r)
        return ((ci * h + io // r) * w + jo // r).reshape(-1).astype(np.int64)

    return _cached(("shuffle", c_in, h, w, r), build)


def _unshuffle_index(c_in, h, w, r):
    def build():
        # output (c*r^2, h/r, w/r) reads input (c, h, w)
        co, io, jo = np.meshgrid(
            np.arange(c_in * r * r),
            np.arange(h // r),
            np.arange(w // r),
            indexing="ij",
        )
        ci = co // (r * r)
        rem = co % (r * r)
        return ((ci * h + io * r + rem // r) * w + jo * r + rem % r).reshape(
            -1
        ).astype(np.int64)

    return _cached(("unshuffle", c_in, h, w, r), build)


def zero_pad2d(x: Tensor, padding: int) -> Tensor:
    if padding == 0:
        return x
    n, c, h, w = x.shape
    idx = _zero_pad_index(c, h, w, padding)
    return scatter_rows(x, idx, (c, h + 2 * padding, w + 2 * padding))


def replicate_pad2d(x: Tensor, padding: int) -> Tensor:
    if padding == 0:
        return x
    n, c, h, w = x.shape
    idx = _replicate_pad_index(c, h, w, padding)
    return gather_rows(x, idx, (c, h + 2 * padding, w + 2 * padding))


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
    padding_mode: str = "zeros",
) -> Tensor:
    """Cross-correlation of NCHW input with FCKhKw filters.

    Output extents must come out integral: (H + 2p - Kh) and
    (W + 2p - Kw) have to be divisible by the stride.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(
            f"conv2d expects 4-D input/weight, got {x.shape} and {weight.shape}"
        )
    n, c, h, w = x.shape
    f, wc, kh, kw = weight.shape
    if wc != c:
        raise ShapeError(
            f"conv2d channel mismatch: input has {c}, weight expects {wc}"
        )
    if stride < 1 or padding < 0:
        raise ShapeError(f"conv2d needs stride>=1, padding>=0, got {stride}, {padding}")
    span_h = h + 2 * padding - kh
    span_w = w + 2 * padding - kw
    if span_h < 0 or span_w < 0 or span_h % stride or span_w % stride:
        raise ShapeError(
            f"conv2d output extent is not a positive integer for input {x.shape}, "
            f"kernel ({kh}, {kw}), stride {stride}, padding {padding}"
        )
    ho, wo = span_h // stride + 1, span_w // stride + 1

    if padding_mode == "zeros":
        padded = zero_pad2d(x, padding)
    elif padding_mode == "replicate":
        padded = replicate_pad2d(x, padding)
    else:
        raise ShapeError(f"unknown padding_mode {padding_mode!r}")

    hp, wp = h + 2 * padding, w + 2 * padding
    idx = _im2col_index(c, hp, wp, kh, kw, stride, ho, wo)
    cols = gather_rows(padded, idx, (c * kh * kw, ho * wo))
    out = matmul(reshape(weight, (f, c * kh * kw)), cols)
    out = reshape(out, (n, f, ho, wo))
    if bias is not None:
        if bias.shape != (f,):
            raise ShapeError(f"conv2d bias must have shape ({f},), got {bias.shape}")
        out = add(out, reshape(bias, (1, f, 1, 1)))
    return out


def pixel_shuffle(x: Tensor, r: int) -> Tensor:
    """Rearrange (N, C*r^2, H, W) into (N, C, rH, rW)."""
    if r == 1:
        return x
    n, c, h, w = x.shape
    if c % (r * r):
        raise ShapeError(
            f"pixel_shuffle needs channels divisible by r^2={r * r}, got {c}"
        )
    idx = _shuffle_index(c, h, w, r)
    return gather_rows(x, idx, (c // (r * r), h * r, w * r))


def pixel_unshuffle(x: Tensor, r: int) -> Tensor:
    """Inverse of :func:`pixel_shuffle`."""
    if r == 1:
        return x
    n, c, h, w = x.shape
    if h % r or w % r:
        raise ShapeError(
            f"pixel_unshuffle needs spatial extents divisible by {r}, got {x.shape}"
        )
    idx = _unshuffle_index(c, h, w, r)
    return gather_rows(x, idx, (c * r * r, h // r, w // r))


def select_channels(x: Tensor, channels) -> Tensor:
    """Differentiable channel subset/permutation of an NCHW tensor."""
    n, c, h, w = x.shape
    channels = np.asarray(channels, dtype=np.int64)
    key = ("chan", c, h, w, channels.tobytes())

    def build():
        ci, ii, ji = np.meshgrid(channels, np.arange(h), np.arange(w), indexing="ij")
        return ((ci * h + ii) * w + ji).reshape(-1).astype(np.int64)

    idx = _cached(key, build)
    return gather_rows(x, idx, (len(channels), h, w))


def check_gradients(f, x: Tensor, eps: float = 1e-6) -> float:
    """Max relative error between backprop and central finite differences.

    ``f`` must map a tensor to a scalar tensor and be evaluable at every
    coordinate perturbation x +/- eps.
    """
    leaf = Tensor(x.data.copy(), requires_grad=True)
    out = f(leaf)
    if not isinstance(out, Tensor) or out.size != 1:
        raise HetSRError("check_gradients needs a scalar-valued function")
    if not np.isfinite(out.data).all():
        raise HetSRError("check_gradients: function value is not finite")
    out.backward()
    analytic = leaf.grad.data.reshape(-1).copy()

    base = x.data.copy()
    numeric = np.empty_like(analytic)
    flat = base.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = f(Tensor(base)).item()
            flat[i] = orig - eps
            lo = f(Tensor(base)).item()
            flat[i] = orig
            if not (np.isfinite(hi) and np.isfinite(lo)):
                raise HetSRError("check_gradients: perturbed value is not finite")
            numeric[i] = (hi - lo) / (2.0 * eps)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-12)
    return float(np.max(np.abs(analytic - numeric) / denom))

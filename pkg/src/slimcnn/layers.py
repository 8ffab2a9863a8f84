"""Layer kernels for the slim CNN: Conv2D, MaxPooling2D, Flatten, Dense, ReLU.

All spatial tensors are channels-last. Every forward/backward accepts a single
image ``(h, w, c)`` or a batch ``(b, h, w, c)`` and returns the same rank it
was given. Functions keep the dtype of their input so gradient checks can run
in float64.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

# Upper bound on im2col buffer size per chunk (elements); larger batches are
# processed a few images at a time.
_COLS_BUDGET = 16 * 1024 * 1024


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (int, np.integer)):
        return int(v), int(v)
    a, b = v
    return int(a), int(b)


@dataclass
class ConvParams:
    kernels: np.ndarray  # (kh, kw, c_in, c_out)
    bias: np.ndarray  # (c_out,)
    stride: tuple[int, int] = (1, 1)
    padding: tuple[int, int] = (0, 0)

    def __post_init__(self):
        self.stride = _pair(self.stride)
        self.padding = _pair(self.padding)
        if self.kernels.ndim != 4:
            raise ValueError(f"kernels must be (kh, kw, c_in, c_out), got {self.kernels.shape}")
        if self.bias.shape != (self.kernels.shape[3],):
            raise ValueError(f"bias shape {self.bias.shape} does not match {self.kernels.shape[3]} filters")
        if min(self.stride) < 1 or min(self.padding) < 0:
            raise ValueError("stride must be >= 1 and padding >= 0")

    @property
    def n_params(self) -> int:
        kh, kw, c_in, c_out = self.kernels.shape
        return conv2d_params(kh, kw, c_in, c_out)


@dataclass
class PoolParams:
    pool: tuple[int, int] = (2, 2)
    stride: tuple[int, int] | None = None

    def __post_init__(self):
        self.pool = _pair(self.pool)
        # Keras semantics: stride None means stride == pool.
        self.stride = self.pool if self.stride is None else _pair(self.stride)
        if min(self.pool) < 1 or min(self.stride) < 1:
            raise ValueError("pool and stride dims must be >= 1")

    n_params = 0


@dataclass
class DenseParams:
    weights: np.ndarray  # (n_in, n_out)
    bias: np.ndarray = field(default=None)  # (n_out,)

    def __post_init__(self):
        if self.weights.ndim != 2:
            raise ValueError(f"weights must be (n_in, n_out), got {self.weights.shape}")
        if self.bias is None:
            self.bias = np.zeros(self.weights.shape[1], dtype=self.weights.dtype)
        if self.bias.shape != (self.weights.shape[1],):
            raise ValueError(f"bias shape {self.bias.shape} does not match {self.weights.shape[1]} outputs")

    @property
    def n_params(self) -> int:
        return dense_params(*self.weights.shape)


# ---------------------------------------------------------------- shapes


def conv2d_out_shape(in_hw, filter_hw, pad=(0, 0), stride=(1, 1)) -> tuple[int, int]:
    (h, w), (kh, kw) = _pair(in_hw), _pair(filter_hw)
    (ph, pw), (sh, sw) = _pair(pad), _pair(stride)
    if h + 2 * ph < kh or w + 2 * pw < kw:
        raise ValueError(f"filter {(kh, kw)} larger than padded input {(h + 2 * ph, w + 2 * pw)}")
    return (h + 2 * ph - kh) // sh + 1, (w + 2 * pw - kw) // sw + 1


def conv2d_params(kh: int, kw: int, c_in: int, c_out: int) -> int:
    return kh * kw * c_in * c_out + c_out


def maxpool_out_shape(in_hw, p: PoolParams) -> tuple[int, int]:
    h, w = _pair(in_hw)
    (ph, pw), (sh, sw) = p.pool, p.stride
    if ph > h or pw > w:
        raise ValueError(f"pool {p.pool} larger than input {(h, w)}")
    return (h - ph) // sh + 1, (w - pw) // sw + 1


def dense_params(n_in: int, n_out: int) -> int:
    return n_in * n_out + n_out


# ---------------------------------------------------------------- helpers


def _as_batch(x: np.ndarray) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ValueError(f"expected (h, w, c) or (b, h, w, c), got shape {x.shape}")


def _chunks(b: int, per_image: int):
    step = max(1, _COLS_BUDGET // max(per_image, 1))
    for start in range(0, b, step):
        yield slice(start, min(b, start + step))


def _im2col(xp: np.ndarray, kh: int, kw: int, sh: int, sw: int) -> np.ndarray:
    """Rows are output positions (b, i, j); columns run over (kh, kw, c_in)."""
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::sh, ::sw]
    # win: (b, oh, ow, c, kh, kw) -> (b, oh, ow, kh, kw, c)
    b, oh, ow, c = win.shape[:4]
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(b * oh * ow, kh * kw * c)


# ---------------------------------------------------------------- conv


def conv2d_forward(x: np.ndarray, p: ConvParams) -> np.ndarray:
    xb, single = _as_batch(x)
    kh, kw, c_in, c_out = p.kernels.shape
    if xb.shape[3] != c_in:
        raise ValueError(f"input has {xb.shape[3]} channels, kernels expect {c_in}")
    (ph, pw), (sh, sw) = p.padding, p.stride
    oh, ow = conv2d_out_shape(xb.shape[1:3], (kh, kw), p.padding, p.stride)
    if ph or pw:
        xb = np.pad(xb, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
    kmat = p.kernels.reshape(kh * kw * c_in, c_out).astype(xb.dtype, copy=False)
    out = np.empty((xb.shape[0], oh, ow, c_out), dtype=np.result_type(xb, p.kernels))
    for sl in _chunks(xb.shape[0], oh * ow * kh * kw * c_in):
        cols = _im2col(xb[sl], kh, kw, sh, sw)
        out[sl] = (cols @ kmat).reshape(-1, oh, ow, c_out)
    out += p.bias
    return out[0] if single else out


def conv2d_backward(x: np.ndarray, p: ConvParams, dy: np.ndarray, need_dx: bool = True):
    """Gradients of ``sum(dy * conv2d_forward(x, p))``.

    Returns ``(dx, dkernels, dbias)``; ``dx`` is None when ``need_dx`` is false.
    """
    xb, single = _as_batch(x)
    dyb, _ = _as_batch(dy)
    kh, kw, c_in, c_out = p.kernels.shape
    (ph, pw), (sh, sw) = p.padding, p.stride
    oh, ow = conv2d_out_shape(xb.shape[1:3], (kh, kw), p.padding, p.stride)
    if dyb.shape != (xb.shape[0], oh, ow, c_out):
        raise ValueError(f"dy shape {dy.shape} does not match conv output {(oh, ow, c_out)}")
    xp = np.pad(xb, ((0, 0), (ph, ph), (pw, pw), (0, 0))) if (ph or pw) else xb
    kmat = p.kernels.reshape(kh * kw * c_in, c_out).astype(xb.dtype, copy=False)
    dk = np.zeros((kh * kw * c_in, c_out), dtype=np.result_type(xb, dyb))
    dxp = np.zeros_like(xp) if need_dx else None
    for sl in _chunks(xb.shape[0], oh * ow * kh * kw * c_in):
        dy2 = dyb[sl].reshape(-1, c_out)
        cols = _im2col(xp[sl], kh, kw, sh, sw)
        dk += cols.T @ dy2
        if need_dx:
            dcols = (dy2 @ kmat.T).reshape(-1, oh, ow, kh, kw, c_in)
            for i in range(kh):
                for j in range(kw):
                    dxp[sl, i:i + sh * (oh - 1) + 1:sh, j:j + sw * (ow - 1) + 1:sw, :] += dcols[:, :, :, i, j, :]
    db = dyb.sum(axis=(0, 1, 2))
    dx = None
    if need_dx:
        dx = dxp[:, ph:ph + xb.shape[1], pw:pw + xb.shape[2], :]
        if single:
            dx = dx[0]
    return dx, dk.reshape(p.kernels.shape), db


# ---------------------------------------------------------------- pooling


def maxpool_forward(x: np.ndarray, p: PoolParams):
    """Window max per channel.

    Returns ``(y, argmax)`` where ``argmax`` holds, for each output entry, the
    flat row-major index of the winning input element within ``x``. Ties go to
    the first element in row-major window order.
    """
    xb, single = _as_batch(x)
    b, h, w, c = xb.shape
    (ph, pw), (sh, sw) = p.pool, p.stride
    oh, ow = maxpool_out_shape((h, w), p)
    win = sliding_window_view(xb, (ph, pw), axis=(1, 2))[:, ::sh, ::sw][:, :oh, :ow]
    flat = win.reshape(b, oh, ow, c, ph * pw)
    k = flat.argmax(axis=-1)
    y = np.take_along_axis(flat, k[..., None], axis=-1)[..., 0]

    bi, oi, oj, ci = np.ogrid[:b, :oh, :ow, :c]
    rows = oi * sh + k // pw
    cols = oj * sw + k % pw
    argmax = ((bi * h + rows) * w + cols) * c + ci
    if single:
        return y[0], argmax[0]
    return y, argmax


def maxpool_backward(argmax: np.ndarray, dy: np.ndarray, in_shape) -> np.ndarray:
    if argmax.shape != dy.shape:
        raise ValueError(f"argmax map {argmax.shape} does not match dy {dy.shape}")
    size = int(np.prod(in_shape))
    dx = np.bincount(argmax.ravel(), weights=dy.ravel().astype(np.float64), minlength=size)
    if dx.size != size:
        raise ValueError("argmax map points outside the input")
    return dx.astype(dy.dtype).reshape(in_shape)


# ---------------------------------------------------------------- elementwise / dense


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0).astype(x.dtype, copy=False)


def relu_grad(x: np.ndarray, dy: np.ndarray) -> np.ndarray:
    # subgradient at exactly 0 is 0
    if x.shape != dy.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {dy.shape}")
    return np.where(x > 0, dy, 0).astype(dy.dtype, copy=False)


def flatten(x: np.ndarray) -> np.ndarray:
    """(h, w, c) -> (h*w*c,), or (b, h, w, c) -> (b, h*w*c); row-major."""
    if x.ndim == 4:
        return np.ascontiguousarray(x).reshape(x.shape[0], -1)
    return np.ascontiguousarray(x).reshape(-1)


def dense_forward(x: np.ndarray, p: DenseParams) -> np.ndarray:
    n_in = p.weights.shape[0]
    if x.shape[-1] != n_in or x.ndim not in (1, 2):
        raise ValueError(f"dense expects (..., {n_in}), got {x.shape}")
    return x @ p.weights.astype(x.dtype, copy=False) + p.bias


def dense_backward(x: np.ndarray, p: DenseParams, dy: np.ndarray, need_dx: bool = True):
    """Returns ``(dx, dW, db)`` for ``y = x @ W + b`` (single vector or batch)."""
    if x.shape[:-1] != dy.shape[:-1] or dy.shape[-1] != p.weights.shape[1]:
        raise ValueError(f"dy shape {dy.shape} inconsistent with x {x.shape} and W {p.weights.shape}")
    if x.ndim == 1:
        dw = np.outer(x, dy)
        db = dy.copy()
    else:
        dw = x.T @ dy
        db = dy.sum(axis=0)
    dx = dy @ p.weights.T.astype(dy.dtype, copy=False) if need_dx else None
    return dx, dw, db

"""Dense-array primitives all layers are built from.

Arrays are plain numpy ndarrays (float64 by default, float32 for training
speed).  The 2-D correlation runs as im2col + one matrix product; with the
BLAS thread pool pinned to a fixed size (see cli module) repeated runs are
bit-identical.  Optional debug mode checks every public result for
non-finite values: set_debug(True) or env GERSEG_DEBUG=1.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError

_DEBUG = os.environ.get("GERSEG_DEBUG", "") not in ("", "0")


def set_debug(enabled: bool):
    global _DEBUG
    _DEBUG = bool(enabled)


def _finite(x: np.ndarray) -> np.ndarray:
    if _DEBUG and not np.all(np.isfinite(x)):
        raise FloatingPointError("non-finite values in operation result")
    return x


@dataclass(frozen=True)
class ConvSpec:
    """Stride / zero-padding / kernel-size triple for a 2-D correlation."""

    kernel_size: int
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.kernel_size <= 0 or self.kernel_size % 2 == 0:
            raise ShapeError(f"kernel_size must be odd positive, got {self.kernel_size}")
        if self.stride <= 0:
            raise ShapeError(f"stride must be positive, got {self.stride}")
        if self.padding < 0:
            raise ShapeError(f"padding must be non-negative, got {self.padding}")

    def out_size(self, size: int) -> int:
        out = (size + 2 * self.padding - self.kernel_size) // self.stride + 1
        if out < 1:
            raise ShapeError(
                f"non-positive output size for input {size} with {self}"
            )
        return out


def pad_zero(x: np.ndarray, width: int) -> np.ndarray:
    """Zero-pad the last two axes by `width` on every side."""
    if width < 0:
        raise ShapeError("pad width must be non-negative")
    if width == 0:
        return x.copy()
    pad = [(0, 0)] * (x.ndim - 2) + [(width, width), (width, width)]
    return _finite(np.pad(x, pad))


def _window_cols(x: np.ndarray, spec: ConvSpec):
    """im2col: [N,C,H,W] -> ([N*Ho*Wo, C*k*k], Ho, Wo). Copies into C order."""
    k, s = spec.kernel_size, spec.stride
    xp = pad_zero(x, spec.padding) if spec.padding else x
    n, c = xp.shape[0], xp.shape[1]
    ho, wo = spec.out_size(x.shape[2]), spec.out_size(x.shape[3])
    v = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s]
    cols = np.ascontiguousarray(v.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c * k * k)
    return cols, ho, wo


def correlate2d_with_cols(x: np.ndarray, w: np.ndarray, spec: ConvSpec):
    """Batched correlation that also returns the im2col matrix for reuse in
    the backward pass."""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"expected 4-D input and weights, got {x.shape}, {w.shape}")
    if w.shape[1] != x.shape[1]:
        raise ShapeError(f"channel mismatch: input {x.shape[1]}, weights {w.shape[1]}")
    if w.shape[2] != spec.kernel_size or w.shape[3] != spec.kernel_size:
        raise ShapeError(f"weights spatial dims {w.shape[2:]} != kernel_size {spec.kernel_size}")
    if x.dtype != w.dtype:
        raise ShapeError(f"dtype mismatch: input {x.dtype}, weights {w.dtype}")
    n = x.shape[0]
    cols, ho, wo = _window_cols(x, spec)
    out = cols @ w.reshape(w.shape[0], -1).T
    out = np.ascontiguousarray(out.reshape(n, ho, wo, w.shape[0]).transpose(0, 3, 1, 2))
    return _finite(out), cols


def correlate2d(x: np.ndarray, w: np.ndarray, spec: ConvSpec) -> np.ndarray:
    """Cross-correlate [C,H,W] (or [N,C,H,W]) input with a [Cout,C,k,k] bank.

    out(o, p) = sum_{c,u} x(c, p*stride + u - padding) * w(o, c, u).
    """
    single = x.ndim == 3
    out, _ = correlate2d_with_cols(x[None] if single else x, w, spec)
    return out[0] if single else out


def correlate2d_vjp_from_cols(cols: np.ndarray, x_shape, w: np.ndarray,
                              dout: np.ndarray, spec: ConvSpec):
    """Gradients of correlate2d given the cached im2col matrix of the input."""
    k, s, p = spec.kernel_size, spec.stride, spec.padding
    n, c, h, wd = x_shape
    co = w.shape[0]
    ho, wo = dout.shape[2], dout.shape[3]
    dout_mat = np.ascontiguousarray(dout.transpose(0, 2, 3, 1)).reshape(n * ho * wo, co)

    dw = (dout_mat.T @ cols).reshape(w.shape)

    dcols = dout_mat @ w.reshape(co, -1)
    dcols = dcols.reshape(n, ho, wo, c, k, k)
    dxp = np.zeros((n, c, h + 2 * p, wd + 2 * p), dtype=w.dtype)
    for u in range(k):
        for v in range(k):
            dxp[:, :, u : u + s * ho : s, v : v + s * wo : s] += dcols[:, :, :, :, u, v].transpose(0, 3, 1, 2)
    dx = dxp[:, :, p : p + h, p : p + wd] if p else dxp
    return np.ascontiguousarray(dx), dw


def correlate2d_vjp(x: np.ndarray, w: np.ndarray, dout: np.ndarray, spec: ConvSpec):
    """Gradients of correlate2d w.r.t. input and weights (batched input [N,C,H,W])."""
    cols, _, _ = _window_cols(x, spec)
    return correlate2d_vjp_from_cols(cols, x.shape, w, dout, spec)


def avgpool2x2(x: np.ndarray) -> np.ndarray:
    """Mean over aligned 2x2 blocks of the last two axes; dims must be even."""
    h, w = x.shape[-2], x.shape[-1]
    if h % 2 or w % 2:
        raise ShapeError(f"avgpool2x2 needs even spatial dims, got {h}x{w}")
    v = x.reshape(x.shape[:-2] + (h // 2, 2, w // 2, 2))
    return _finite((v.sum(axis=(-3, -1))) * x.dtype.type(0.25))


def avgpool2x2_vjp(dout: np.ndarray) -> np.ndarray:
    g = np.repeat(np.repeat(dout, 2, axis=-2), 2, axis=-1)
    return g * dout.dtype.type(0.25)


def upsample_nearest2x(x: np.ndarray) -> np.ndarray:
    """Each input pixel becomes a constant 2x2 block."""
    return _finite(np.repeat(np.repeat(x, 2, axis=-2), 2, axis=-1))


def upsample_nearest2x_vjp(dout: np.ndarray) -> np.ndarray:
    h, w = dout.shape[-2], dout.shape[-1]
    v = dout.reshape(dout.shape[:-2] + (h // 2, 2, w // 2, 2))
    return v.sum(axis=(-3, -1))


def _bilinear_matrix(size: int, dtype) -> np.ndarray:
    # rows: output coords 0..2*size-1; sampling point (i+0.5)/2 - 0.5, edge-clamped
    a = np.zeros((2 * size, size), dtype=dtype)
    for i in range(2 * size):
        src = (i + 0.5) / 2.0 - 0.5
        i0 = int(np.floor(src))
        frac = src - i0
        lo, hi = min(max(i0, 0), size - 1), min(max(i0 + 1, 0), size - 1)
        a[i, lo] += 1.0 - frac
        a[i, hi] += frac
    return a


def upsample_bilinear2x(x: np.ndarray) -> np.ndarray:
    """Factor-2 bilinear upsample (half-pixel centers, clamped borders)."""
    ah = _bilinear_matrix(x.shape[-2], x.dtype)
    aw = _bilinear_matrix(x.shape[-1], x.dtype)
    return _finite(np.einsum("ih,jw,...hw->...ij", ah, aw, x, optimize=True))


def upsample_bilinear2x_vjp(dout: np.ndarray) -> np.ndarray:
    ah = _bilinear_matrix(dout.shape[-2] // 2, dout.dtype)
    aw = _bilinear_matrix(dout.shape[-1] // 2, dout.dtype)
    return np.einsum("ih,jw,...ij->...hw", ah, aw, dout, optimize=True)


def reduce_mean(x: np.ndarray, axis: int) -> np.ndarray:
    return _finite(x.mean(axis=axis))


def relu(x: np.ndarray) -> np.ndarray:
    return _finite(np.maximum(x, 0))


def add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape != b.shape:
        raise ShapeError(f"add shape mismatch: {a.shape} vs {b.shape}")
    return _finite(a + b)


def mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape != b.shape:
        raise ShapeError(f"mul shape mismatch: {a.shape} vs {b.shape}")
    return _finite(a * b)


def scale(x: np.ndarray, s: float) -> np.ndarray:
    return _finite(x * x.dtype.type(s))


def concat(arrays: list[np.ndarray], axis: int) -> np.ndarray:
    ref = arrays[0].shape
    ax = axis % len(ref)
    for a in arrays[1:]:
        if len(a.shape) != len(ref) or any(
            d != ax and a.shape[d] != ref[d] for d in range(len(ref))
        ):
            raise ShapeError(f"concat shape mismatch along axis {axis}: {[a.shape for a in arrays]}")
    return _finite(np.concatenate(arrays, axis=ax))

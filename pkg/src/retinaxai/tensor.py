"""Dense tensor kernels on channels-first numpy arrays.

Tensors are plain ``numpy.ndarray`` values of rank <= 4 laid out as
``[N?, C, H, W]``. Kernels default to float32 outputs; reductions accumulate
in float64. A float64 input stays float64, which the gradient checks rely on.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class DimensionError(ValueError):
    """Raised when tensor extents are incompatible with an operation."""


def as_tensor(x, dtype=np.float32) -> np.ndarray:
    """Coerce ``x`` to a contiguous tensor, checking rank and extents."""
    arr = np.ascontiguousarray(x)
    if arr.dtype.kind != "f":
        arr = arr.astype(dtype)
    if arr.ndim > 4:
        raise DimensionError(f"rank {arr.ndim} exceeds 4")
    if any(n < 1 for n in arr.shape):
        raise DimensionError(f"all extents must be >= 1, got {arr.shape}")
    return arr


def _out_dtype(*arrays: np.ndarray):
    if any(a.dtype == np.float64 for a in arrays):
        return np.float64
    return np.float32


def flat_index(shape, c: int, h: int, w: int) -> int:
    """Row-major offset of element (c, h, w) in a [C, H, W] tensor."""
    _, H, W = shape
    return c * H * W + h * W + w


def conv_output_size(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def conv2d(x, kernel, bias, stride: int = 1, padding: int = 0) -> np.ndarray:
    """2-D cross-correlation with zero padding.

    ``x`` is [C, H, W], ``kernel`` is [K, C, kh, kw], ``bias`` has length K.
    """
    x = as_tensor(x)
    kernel = as_tensor(kernel)
    bias = np.asarray(bias)
    if x.ndim != 3:
        raise DimensionError(f"conv2d input must be [C,H,W], got rank {x.ndim}")
    if kernel.ndim != 4:
        raise DimensionError(f"conv2d kernel must be [K,C,kh,kw], got rank {kernel.ndim}")
    if stride < 1 or padding < 0:
        raise DimensionError(f"invalid stride={stride} / padding={padding}")
    C, H, W = x.shape
    K, kc, kh, kw = kernel.shape
    if kc != C:
        raise DimensionError(f"channel axis mismatch: input C={C}, kernel C={kc}")
    if bias.shape != (K,):
        raise DimensionError(f"bias axis mismatch: expected ({K},), got {bias.shape}")
    if kh > H + 2 * padding or kw > W + 2 * padding:
        raise DimensionError(
            f"kernel {kh}x{kw} larger than padded input {H + 2 * padding}x{W + 2 * padding} (H, W axes)"
        )
    xp = np.pad(x.astype(np.float64), ((0, 0), (padding, padding), (padding, padding)))
    # windows: [C, H', W', kh, kw] after striding
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    out = np.einsum("chwij,kcij->khw", win, kernel.astype(np.float64), optimize=True)
    out += bias.astype(np.float64)[:, None, None]
    return out.astype(_out_dtype(x, kernel))


def conv2d_backward_input(grad_out, kernel, input_shape, stride: int = 1, padding: int = 0) -> np.ndarray:
    """Gradient of a conv2d output w.r.t. its input (transpose convolution)."""
    grad_out = np.asarray(grad_out, dtype=np.float64)
    kernel = np.asarray(kernel, dtype=np.float64)
    C, H, W = input_shape
    K, _, kh, kw = kernel.shape
    Ho, Wo = grad_out.shape[1:]
    gp = np.zeros((C, H + 2 * padding, W + 2 * padding))
    for i in range(kh):
        for j in range(kw):
            # contribution of kernel tap (i, j) to every output location
            contrib = np.einsum("khw,kc->chw", grad_out, kernel[:, :, i, j])
            gp[:, i : i + stride * Ho : stride, j : j + stride * Wo : stride] += contrib
    return gp[:, padding : padding + H, padding : padding + W]


def relu(x) -> np.ndarray:
    x = as_tensor(x)
    return np.maximum(x, 0).astype(x.dtype)


def maxpool2d(x) -> np.ndarray:
    """2x2 max pooling with stride 2 on a [C, H, W] tensor."""
    out, _ = maxpool2d_with_argmax(x)
    return out


def maxpool2d_with_argmax(x):
    """Max pool that also returns the within-window argmax (0..3, row-major).

    Ties resolve to the first maximal element in row-major window order.
    """
    x = as_tensor(x)
    if x.ndim != 3:
        raise DimensionError(f"maxpool2d input must be [C,H,W], got rank {x.ndim}")
    C, H, W = x.shape
    if H % 2 or W % 2:
        raise DimensionError(f"maxpool2d needs even H and W, got H={H}, W={W}")
    win = x.reshape(C, H // 2, 2, W // 2, 2).transpose(0, 1, 3, 2, 4).reshape(C, H // 2, W // 2, 4)
    arg = np.argmax(win, axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    return out, arg


def maxpool2d_backward(grad_out, argmax, input_shape) -> np.ndarray:
    C, H, W = input_shape
    g = np.zeros((C, H // 2, W // 2, 4), dtype=np.float64)
    np.put_along_axis(g, argmax[..., None], np.asarray(grad_out, dtype=np.float64)[..., None], axis=-1)
    return g.reshape(C, H // 2, W // 2, 2, 2).transpose(0, 1, 3, 2, 4).reshape(C, H, W)


def linear(x, weight, bias) -> np.ndarray:
    """Affine map ``weight @ x + bias``; ``x`` is flattened first."""
    x = as_tensor(x)
    weight = as_tensor(weight)
    bias = np.asarray(bias)
    v = x.reshape(-1)
    if weight.ndim != 2 or weight.shape[1] != v.size:
        raise DimensionError(f"linear weight {weight.shape} does not accept input of length {v.size}")
    if bias.shape != (weight.shape[0],):
        raise DimensionError(f"linear bias {bias.shape} does not match output length {weight.shape[0]}")
    out = weight.astype(np.float64) @ v.astype(np.float64) + bias.astype(np.float64)
    return out.astype(_out_dtype(x, weight))


def global_avg_pool(x) -> np.ndarray:
    x = as_tensor(x)
    if x.ndim != 3:
        raise DimensionError(f"global_avg_pool input must be [C,H,W], got rank {x.ndim}")
    return x.astype(np.float64).mean(axis=(1, 2)).astype(x.dtype)


def _bilinear_coords(n_in: int, n_out: int):
    if n_out == 1:
        src = np.zeros(1)
    else:
        src = np.arange(n_out, dtype=np.float64) * (n_in - 1) / (n_out - 1)
    lo = np.floor(src).astype(np.int64)
    lo = np.minimum(lo, n_in - 1)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    return lo, hi, frac


def resize_bilinear(x, out_h: int, out_w: int) -> np.ndarray:
    """Align-corners bilinear resize of a [C, h, w] tensor to [C, out_h, out_w]."""
    x = as_tensor(x)
    if x.ndim != 3:
        raise DimensionError(f"resize_bilinear input must be [C,H,W], got rank {x.ndim}")
    if out_h < 1 or out_w < 1:
        raise DimensionError(f"output size must be >= 1, got {out_h}x{out_w}")
    _, h, w = x.shape
    y0, y1, fy = _bilinear_coords(h, out_h)
    x0, x1, fx = _bilinear_coords(w, out_w)
    v = x.astype(np.float64)
    top = v[:, y0, :] * (1.0 - fy)[None, :, None] + v[:, y1, :] * fy[None, :, None]
    out = top[:, :, x0] * (1.0 - fx)[None, None, :] + top[:, :, x1] * fx[None, None, :]
    return out.astype(x.dtype)


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    return np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))


def softmax(x) -> np.ndarray:
    z = np.asarray(x, dtype=np.float64)
    z = np.exp(z - z.max())
    return z / z.sum()

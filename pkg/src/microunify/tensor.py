"""Dense tensor helpers and the convolution-to-GEMM lowering.

Tensors are plain row-major numpy arrays.  Weights are stored as float32;
products and norms are accumulated in float64 and rounded at the end.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DTYPE = np.float32


class ShapeError(ValueError):
    """A tensor has a rank or extent the operation cannot handle."""


def as_tensor(x, dtype=DTYPE) -> np.ndarray:
    """Return `x` as a contiguous array of `dtype`, rejecting NaN/Inf."""
    t = np.ascontiguousarray(x, dtype=dtype)
    if not np.all(np.isfinite(t)):
        raise ValueError("tensor contains non-finite values")
    return t


def frobenius_norm(t) -> float:
    t = np.asarray(t, dtype=np.float64)
    return float(np.sqrt(np.sum(t * t)))


def matmul(a, b, out_dtype=DTYPE) -> np.ndarray:
    """Matrix product accumulated in float64 and rounded to `out_dtype`."""
    return (np.asarray(a, np.float64) @ np.asarray(b, np.float64)).astype(out_dtype)


@dataclass(frozen=True)
class GemmView:
    """Matrix view of a fc or conv weight tensor.

    Rows index output neurons/channels, columns the reduction axis.  For a
    conv tensor (Cout, Cin, Kh, Kw) the reduction axis flattens (Cin, Kh, Kw)
    in that order, so the flat row-major index of a coefficient is the same
    in the tensor and in the view.
    """

    rows: int
    cols: int
    shape: tuple[int, ...]
    origin: int | None = None

    def tensor_coord(self, row: int, col: int) -> tuple[int, ...]:
        if not (0 <= row < self.rows and 0 <= col < self.cols):
            raise IndexError(f"({row}, {col}) outside {self.rows}x{self.cols} view")
        return tuple(int(i) for i in np.unravel_index(row * self.cols + col, self.shape))

    def gemm_coord(self, coord) -> tuple[int, int]:
        flat = int(np.ravel_multi_index(tuple(coord), self.shape))
        return divmod(flat, self.cols)

    def matrix(self, t: np.ndarray) -> np.ndarray:
        return np.asarray(t).reshape(self.rows, self.cols)

    def tensor(self, m: np.ndarray) -> np.ndarray:
        return np.asarray(m).reshape(self.shape)


def as_gemm_view(weights, origin: int | None = None) -> GemmView:
    """Build the GEMM view of a weight tensor (or of a bare shape tuple)."""
    shape = tuple(int(s) for s in (weights.shape if hasattr(weights, "shape") else weights))
    if len(shape) == 2:
        return GemmView(shape[0], shape[1], shape, origin)
    if len(shape) == 4:
        return GemmView(shape[0], shape[1] * shape[2] * shape[3], shape, origin)
    raise ShapeError(f"unsupported rank {len(shape)}")


def conv_output_size(size: int, kernel: int, stride: int, pad: int) -> int:
    if stride < 1 or pad < 0:
        raise ShapeError(f"bad stride {stride} / pad {pad}")
    if size + 2 * pad < kernel:
        raise ShapeError(f"kernel {kernel} larger than padded input {size + 2 * pad}")
    return (size + 2 * pad - kernel) // stride + 1


def im2col_batch(x: np.ndarray, kernel: tuple[int, int], stride: int = 1, pad: int = 0) -> np.ndarray:
    """Lower a batch (N, C, H, W) to columns of shape (N, C*Kh*Kw, Ho*Wo)."""
    x = np.asarray(x)
    if x.ndim != 4:
        raise ShapeError(f"im2col_batch expects (N, C, H, W), got rank {x.ndim}")
    n, c, h, w = x.shape
    kh, kw = kernel
    ho = conv_output_size(h, kh, stride, pad)
    wo = conv_output_size(w, kw, stride, pad)
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    win = win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    # (N, C, Ho, Wo, Kh, Kw) -> (N, C, Kh, Kw, Ho, Wo)
    return np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(n, c * kh * kw, ho * wo)


def im2col(x: np.ndarray, kernel: tuple[int, int], stride: int = 1, pad: int = 0) -> np.ndarray:
    """Lower one input (C, H, W) to a (C*Kh*Kw, P) column matrix.

    Column p holds the receptive field of output position p (row-major over
    the output grid), zero-padded outside the input.
    """
    x = np.asarray(x)
    if x.ndim != 3:
        raise ShapeError(f"im2col expects (C, H, W), got rank {x.ndim}")
    return im2col_batch(x[None], kernel, stride, pad)[0]


def col2im_batch(cols: np.ndarray, x_shape: tuple[int, int, int, int], kernel: tuple[int, int],
                 stride: int = 1, pad: int = 0) -> np.ndarray:
    """Adjoint of `im2col_batch`: scatter-add columns back onto the input grid."""
    n, c, h, w = x_shape
    kh, kw = kernel
    ho = conv_output_size(h, kh, stride, pad)
    wo = conv_output_size(w, kw, stride, pad)
    cols = cols.reshape(n, c, kh, kw, ho, wo)
    out = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += cols[:, :, i, j]
    if pad:
        out = out[:, :, pad:-pad, pad:-pad]
    return out

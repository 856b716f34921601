"""Dense tensors and the float kernels shared by training and float inference.

Tensors are plain numpy arrays in row-major NCHW order (OIHW for conv
weights). Kernels accumulate in float64 and hand results back in the
precision of their inputs, float32 by default.
"""
from logging import getLogger
from typing import Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from qdistill.exceptions import DimensionError, NumericError, ShapeError

logger = getLogger(__name__)

MAX_RANK = 4


def as_tensor(data, dtype=np.float32) -> np.ndarray:
    """Convert data into a tensor and check the shape invariants."""
    array = np.asarray(data, dtype=dtype)
    if array.ndim > MAX_RANK:
        raise ShapeError(f"tensor rank {array.ndim} exceeds {MAX_RANK}")
    if any(dim < 1 for dim in array.shape):
        raise ShapeError(f"tensor shape {array.shape} has an empty dimension")
    return array


def _result_dtype(*arrays: np.ndarray):
    return np.result_type(np.float32, *[a.dtype for a in arrays])


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """c[i,k] = sum_j a[i,j] * b[j,k]."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply {tuple(a.shape)} by {tuple(b.shape)}")
    out = a.astype(np.float64) @ b.astype(np.float64)
    return out.astype(_result_dtype(a, b))


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    """Output extent of a convolution; must come out as a positive integer."""
    if stride < 1 or padding < 0:
        raise ShapeError(f"invalid stride {stride} / padding {padding}")
    span = size + 2 * padding - kernel
    if span < 0 or span % stride != 0:
        raise ShapeError(
            f"size {size} with kernel {kernel}, stride {stride}, padding {padding} "
            f"gives a non-integral output size"
        )
    return span // stride + 1


def pad2d(x: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int) -> np.ndarray:
    """Receptive-field view of x with shape (N, C, H', W', Kh, Kw).

    The result is a read-only strided view of the padded input, no copy.
    """
    if x.ndim != 4:
        raise ShapeError(f"expected an NCHW tensor, got shape {tuple(x.shape)}")
    conv_output_size(x.shape[2], kh, stride, padding)
    conv_output_size(x.shape[3], kw, stride, padding)
    windows = sliding_window_view(pad2d(x, padding), (kh, kw), axis=(2, 3))
    return windows[:, :, ::stride, ::stride]


def _col2im(dcols: np.ndarray, input_shape: Tuple[int, ...], stride: int, padding: int) -> np.ndarray:
    """Scatter-add receptive-field gradients (N, C, H', W', Kh, Kw) back onto the input."""
    n, c, h, w = input_shape
    _, _, out_h, out_w, kh, kw = dcols.shape
    dx = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=dcols.dtype)
    for i in range(kh):
        for j in range(kw):
            dx[:, :, i:i + stride * out_h:stride, j:j + stride * out_w:stride] += dcols[:, :, :, :, i, j]
    if padding:
        dx = dx[:, :, padding:-padding, padding:-padding]
    return dx


def conv2d(x: np.ndarray, weight: np.ndarray, bias: np.ndarray, stride: int = 1, padding: int = 0) -> np.ndarray:
    """Cross-correlation of an NCHW batch with OIHW filters plus per-channel bias."""
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise DimensionError(
            f"conv2d input {tuple(x.shape)} does not match weight {tuple(weight.shape)}"
        )
    if bias.shape != (weight.shape[0],):
        raise DimensionError(f"bias {tuple(bias.shape)} does not match weight {tuple(weight.shape)}")
    cols = im2col(x.astype(np.float64), weight.shape[2], weight.shape[3], stride, padding)
    out = np.tensordot(cols, weight.astype(np.float64), axes=([1, 4, 5], [1, 2, 3]))
    out = out.transpose(0, 3, 1, 2) + bias.astype(np.float64)[None, :, None, None]
    return np.ascontiguousarray(out, dtype=_result_dtype(x, weight))


def conv2d_backward(x: np.ndarray, weight: np.ndarray, grad_out: np.ndarray, stride: int = 1, padding: int = 0):
    """Gradients of conv2d with respect to input, weight and bias."""
    dtype = _result_dtype(x, weight, grad_out)
    g = grad_out.astype(np.float64)
    cols = im2col(x.astype(np.float64), weight.shape[2], weight.shape[3], stride, padding)
    dweight = np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3]))
    dbias = g.sum(axis=(0, 2, 3))
    dcols = np.einsum("nohw,ocij->nchwij", g, weight.astype(np.float64), optimize=True)
    dx = _col2im(dcols, x.shape, stride, padding)
    return dx.astype(dtype), dweight.astype(dtype), dbias.astype(dtype)


def depthwise_conv2d(x: np.ndarray, weight: np.ndarray, bias: np.ndarray, stride: int = 1, padding: int = 0) -> np.ndarray:
    """One filter per channel: output channel c sees only input channel c."""
    if x.ndim != 4 or weight.ndim != 4 or weight.shape[1] != 1 or x.shape[1] != weight.shape[0]:
        raise DimensionError(
            f"depthwise input {tuple(x.shape)} does not match weight {tuple(weight.shape)}"
        )
    if bias.shape != (weight.shape[0],):
        raise DimensionError(f"bias {tuple(bias.shape)} does not match weight {tuple(weight.shape)}")
    cols = im2col(x.astype(np.float64), weight.shape[2], weight.shape[3], stride, padding)
    out = np.einsum("nchwij,cij->nchw", cols, weight[:, 0].astype(np.float64), optimize=True)
    out = out + bias.astype(np.float64)[None, :, None, None]
    return np.ascontiguousarray(out, dtype=_result_dtype(x, weight))


def depthwise_conv2d_backward(x: np.ndarray, weight: np.ndarray, grad_out: np.ndarray, stride: int = 1, padding: int = 0):
    dtype = _result_dtype(x, weight, grad_out)
    g = grad_out.astype(np.float64)
    cols = im2col(x.astype(np.float64), weight.shape[2], weight.shape[3], stride, padding)
    dweight = np.einsum("nchw,nchwij->cij", g, cols, optimize=True)[:, None]
    dbias = g.sum(axis=(0, 2, 3))
    dcols = g[..., None, None] * weight[:, 0].astype(np.float64)[None, :, None, None]
    dx = _col2im(dcols, x.shape, stride, padding)
    return dx.astype(dtype), dweight.astype(dtype), dbias.astype(dtype)


def global_avg_pool(x: np.ndarray) -> np.ndarray:
    """Mean over the spatial dimensions: (N, C, H, W) -> (N, C)."""
    if x.ndim != 4:
        raise ShapeError(f"global average pool expects NCHW, got {tuple(x.shape)}")
    return x.astype(np.float64).mean(axis=(2, 3)).astype(x.dtype)


def softmax(z: np.ndarray) -> np.ndarray:
    """Row-wise softmax in float64, stabilised by the row maximum."""
    z = np.asarray(z, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise NumericError("softmax received non-finite logits")
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)

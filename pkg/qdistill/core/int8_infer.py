"""Integer-only inference.

Every layer accumulates (q_in - Z_in) * (q_w - Z_w) products in int32,
adds an int32 bias at scale S_in * S_w, and requantizes the accumulator
to the output scale with a fixed-point multiply and a rounding right
shift. The layer outputs between quantizing the input and dequantizing
the logits are 8-bit codes only.

Matrix products of centered codes run on the BLAS float kernels in a
precision where every partial sum is an exactly representable integer
(float32 up to a depth of 258, float64 beyond), so accumulators equal
the integer sums bit for bit.
"""
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from logging import getLogger
from typing import List, Optional, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from qdistill.core.quant import FIXED_POINT_BITS, QMAX, QMIN, QuantParams, RequantMultiplier, dequantize, quantize
from qdistill.core.tensor import conv_output_size, pad2d
from qdistill.exceptions import DimensionError, ModelIntegrityError, ShapeError

logger = getLogger(__name__)

EXACT_FLOAT32_LIMIT = 1 << 24


@dataclass
class QuantizedTensor:
    data: np.ndarray
    qp: QuantParams

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.dtype != np.uint8:
            raise ShapeError(f"quantized tensor data must be uint8, got {self.data.dtype}")

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape


class QuantizedLayerKind(str, Enum):
    CONV = "conv"
    DEPTHWISE = "depthwise"
    DENSE = "dense"
    GLOBAL_AVG_POOL = "gap"


@dataclass
class QuantizedLayer:
    kind: QuantizedLayerKind
    input_qp: QuantParams
    output_qp: QuantParams
    weight: Optional[np.ndarray] = None
    bias: Optional[np.ndarray] = None
    weight_qp: Optional[QuantParams] = None
    multiplier: Optional[RequantMultiplier] = None
    relu: bool = False
    stride: int = 1
    padding: int = 0

    @property
    def has_weights(self) -> bool:
        return self.kind != QuantizedLayerKind.GLOBAL_AVG_POOL


@dataclass
class QuantizedModel:
    layers: List[QuantizedLayer]
    input_qp: QuantParams
    family: str = "custom"
    width_multiplier: float = 1.0
    num_classes: int = 0
    input_shape: Tuple[int, int, int] = (1, 32, 32)

    def validate(self) -> None:
        """Every layer must consume exactly what the previous one produces."""
        expected = self.input_qp
        for index, layer in enumerate(self.layers):
            if layer.input_qp != expected:
                raise ModelIntegrityError(
                    f"layer {index} ({layer.kind.value}) input {layer.input_qp} does not match "
                    f"the preceding output {expected}"
                )
            if layer.kind == QuantizedLayerKind.GLOBAL_AVG_POOL and layer.output_qp != layer.input_qp:
                raise ModelIntegrityError(f"layer {index} average pool must keep its quantization")
            if layer.has_weights and (layer.weight is None or layer.bias is None or layer.multiplier is None):
                raise ModelIntegrityError(f"layer {index} ({layer.kind.value}) is missing weights")
            expected = layer.output_qp

    @property
    def output_qp(self) -> QuantParams:
        return self.layers[-1].output_qp if self.layers else self.input_qp

    def parameter_count(self) -> int:
        return sum(int(l.weight.size + l.bias.size) for l in self.layers if l.has_weights)


def requantize(acc, rm: RequantMultiplier, z3: int, relu: bool = False):
    """Scale int32 accumulators to 8-bit codes: z3 + round(acc * M0 / 2**(31 + n)).

    The product is formed in int64 and rounded half away from zero by an
    integer shift. A fused ReLU clamps the result at the zero-point.
    """
    acc = np.asarray(acc, dtype=np.int64)
    product = acc * np.int64(rm.m0_fixed)
    total_shift = np.int64(FIXED_POINT_BITS + rm.shift)
    magnitude = (np.abs(product) + (np.int64(1) << (total_shift - 1))) >> total_shift
    scaled = np.where(product < 0, -magnitude, magnitude)
    low = z3 if relu else QMIN
    codes = np.clip(scaled + z3, low, QMAX).astype(np.uint8)
    if codes.ndim == 0:
        return int(codes)
    return codes


def _centered(q: np.ndarray, zero_point: int) -> np.ndarray:
    return q.astype(np.int32) - np.int32(zero_point)


def _exact_float_dtype(depth: int):
    """float32 when every partial sum of depth code products is an exact float32 integer."""
    return np.float32 if depth * (QMAX - QMIN) ** 2 < EXACT_FLOAT32_LIMIT else np.float64


def _integer_gemm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Exact int64 product of two centered code matrices, computed by the BLAS float kernels."""
    dtype = _exact_float_dtype(a.shape[1])
    return (a.astype(dtype, copy=False) @ b.astype(dtype, copy=False)).astype(np.int64)


def qmatmul(
    q1: QuantizedTensor,
    q2: QuantizedTensor,
    out_qp: QuantParams,
    rm: RequantMultiplier,
    bias: Optional[np.ndarray] = None,
    relu: bool = False,
) -> QuantizedTensor:
    """Integer matrix product of two quantized matrices, requantized to out_qp."""
    if q1.data.ndim != 2 or q2.data.ndim != 2 or q1.shape[1] != q2.shape[0]:
        raise DimensionError(f"cannot multiply {q1.shape} by {q2.shape}")
    acc = _integer_gemm(_centered(q1.data, q1.qp.zero_point), _centered(q2.data, q2.qp.zero_point))
    if bias is not None:
        acc = acc + bias.astype(np.int64)
    return QuantizedTensor(requantize(acc, rm, out_qp.zero_point, relu), out_qp)


def _conv_accumulate(x: np.ndarray, layer: QuantizedLayer) -> np.ndarray:
    """Accumulators (N, O, H', W') of a convolution over zero-point-centered input codes.

    Regular convolutions run as one im2col matrix product; depthwise ones
    sum kh * kw shifted int32 products.
    """
    weight = _centered(layer.weight, layer.weight_qp.zero_point)
    out_channels, _, kh, kw = weight.shape
    s = layer.stride
    out_h = conv_output_size(x.shape[2], kh, s, layer.padding)
    out_w = conv_output_size(x.shape[3], kw, s, layer.padding)
    x = pad2d(x, layer.padding)
    n, c = x.shape[:2]
    if layer.kind == QuantizedLayerKind.DEPTHWISE:
        if c != out_channels:
            raise DimensionError(f"depthwise input {x.shape} does not match weight {weight.shape}")
        acc = np.zeros((n, c, out_h, out_w), dtype=np.int32)
        for i in range(kh):
            for j in range(kw):
                window = x[:, :, i:i + s * (out_h - 1) + 1:s, j:j + s * (out_w - 1) + 1:s]
                acc += window * weight[:, 0, i, j][None, :, None, None]
    else:
        if c != weight.shape[1]:
            raise DimensionError(f"conv input {x.shape} does not match weight {weight.shape}")
        dtype = _exact_float_dtype(c * kh * kw)
        cols = sliding_window_view(x.astype(dtype), (kh, kw), axis=(2, 3))[:, :, ::s, ::s]
        cols = cols.transpose(0, 2, 3, 1, 4, 5).reshape(n * out_h * out_w, c * kh * kw)
        acc = _integer_gemm(cols, weight.reshape(out_channels, -1).T)
        acc = acc.reshape(n, out_h, out_w, out_channels).transpose(0, 3, 1, 2)
    return acc + layer.bias.astype(np.int64)[None, :, None, None]


def qconv2d(inp: QuantizedTensor, layer: QuantizedLayer) -> QuantizedTensor:
    """Quantized convolution; zero padding is applied after removing the zero-point."""
    if inp.data.ndim != 4:
        raise ShapeError(f"quantized convolution expects NCHW, got {inp.shape}")
    acc = _conv_accumulate(_centered(inp.data, inp.qp.zero_point), layer)
    codes = requantize(acc, layer.multiplier, layer.output_qp.zero_point, layer.relu)
    return QuantizedTensor(np.ascontiguousarray(codes), layer.output_qp)


qdepthwise_conv2d = qconv2d


def qglobal_avg_pool(inp: QuantizedTensor) -> QuantizedTensor:
    """Integer mean over the spatial dimensions, rounded half up (codes are non-negative)."""
    n, c, h, w = inp.shape
    count = h * w
    total = inp.data.astype(np.int32).sum(axis=(2, 3))
    mean = (2 * total + count) // (2 * count)
    return QuantizedTensor(mean.astype(np.uint8), inp.qp)


def qdense(inp: QuantizedTensor, layer: QuantizedLayer) -> QuantizedTensor:
    weight = QuantizedTensor(layer.weight, layer.weight_qp)
    return qmatmul(inp, weight, layer.output_qp, layer.multiplier, layer.bias, layer.relu)


def run_layer(inp: QuantizedTensor, layer: QuantizedLayer) -> QuantizedTensor:
    if layer.kind == QuantizedLayerKind.GLOBAL_AVG_POOL:
        return qglobal_avg_pool(inp)
    if layer.kind == QuantizedLayerKind.DENSE:
        return qdense(inp, layer)
    return qconv2d(inp, layer)


def _forward_codes(qmodel: QuantizedModel, codes: np.ndarray) -> np.ndarray:
    x = QuantizedTensor(codes, qmodel.input_qp)
    for index, layer in enumerate(qmodel.layers):
        try:
            x = run_layer(x, layer)
        except ShapeError as e:
            raise ShapeError(f"layer {index} ({layer.kind.value}): {e}") from e
    return x.data


def quantized_forward(qmodel: QuantizedModel, images: np.ndarray, workers: int = 1) -> np.ndarray:
    """Quantize the input once, run every layer in integers, dequantize the logits.

    With workers > 1 the batch is split across a thread pool; integer
    arithmetic makes the result independent of the split.
    """
    qmodel.validate()
    if images.ndim != 4 or tuple(images.shape[1:]) != tuple(qmodel.input_shape):
        raise ShapeError(f"input batch {tuple(images.shape)} does not match model input {qmodel.input_shape}")
    codes = quantize(images, qmodel.input_qp)
    if workers > 1 and len(codes) > 1:
        chunks = np.array_split(codes, min(workers, len(codes)))
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outputs = list(pool.map(lambda chunk: _forward_codes(qmodel, chunk), chunks))
        out = np.concatenate(outputs, axis=0)
    else:
        out = _forward_codes(qmodel, codes)
    return dequantize(out, qmodel.output_qp).astype(np.float32)


def predict_quantized_logits(qmodel: QuantizedModel, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    outputs = [quantized_forward(qmodel, images[s:s + batch_size]) for s in range(0, len(images), batch_size)]
    return np.concatenate(outputs, axis=0)

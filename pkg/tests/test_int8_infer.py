import pytest
import os
import sys
from dataclasses import replace

import numpy as np

# Add parent directory to path to allow imports
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from qdistill.core import tensor as T
from qdistill.core.int8_infer import (
    QuantizedLayer,
    QuantizedLayerKind,
    QuantizedModel,
    QuantizedTensor,
    _conv_accumulate,
    qconv2d,
    qglobal_avg_pool,
    qmatmul,
    quantized_forward,
    requantize,
)
from qdistill.core.models import build_student
from qdistill.core.qat import calibrate, convert_to_int8, fuse_layers, prepare_qat
from qdistill.core.quant import QuantParams, compute_qparams, dequantize, derive_requant_multiplier, quantize
from qdistill.exceptions import DimensionError, ModelIntegrityError, ShapeError


@pytest.fixture(scope="module")
def qmodel():
    images = np.random.default_rng(0).random((32, 1, 32, 32)).astype(np.float32)
    return convert_to_int8(calibrate(prepare_qat(fuse_layers(build_student(5, 0.5))), images))


def test_requantize_examples():
    half = derive_requant_multiplier(1.0, 1.0, 2.0)
    assert requantize(0, half, 7) == 7
    assert requantize(2, half, 7) == 8
    # 0.5 * 3 = 1.5 rounds away from zero
    assert requantize(3, half, 7) == 9
    assert requantize(-3, half, 7) == 5
    assert requantize(10 ** 6, half, 7) == 255
    assert requantize(-(10 ** 6), half, 7) == 0
    assert requantize(-3, half, 7, relu=True) == 7
    assert requantize(np.array([0, 2]), half, 0).dtype == np.uint8


def test_requantize_at_the_largest_shift():
    rm = derive_requant_multiplier(1.0, 1.5 * 2.0 ** -32, 1.0)
    # 2^31 * 1.5 * 2^-32 = 0.75 and 2^30 * 1.5 * 2^-32 = 0.375
    assert requantize((1 << 31) - 1, rm, 3) == 4
    assert requantize(-((1 << 31) - 1), rm, 3) == 2
    assert requantize(1 << 30, rm, 3) == 3


def test_qmatmul_single_element():
    one = QuantParams(1.0, 3)
    rm = derive_requant_multiplier(1.0, 1.0, 2.0)
    out = qmatmul(QuantizedTensor(np.array([[5]], dtype=np.uint8), one),
                  QuantizedTensor(np.array([[4]], dtype=np.uint8), one), QuantParams(2.0, 10), rm)
    # (5 - 3) * (4 - 3) = 2 at scale 1 is 1 at scale 2
    assert out.data.tolist() == [[11]]


def test_qmatmul_zero_points_cancel():
    """Inputs sitting at their zero-points produce the output zero-point."""
    q1 = QuantizedTensor(np.full((3, 4), 17, dtype=np.uint8), QuantParams(0.1, 17))
    q2 = QuantizedTensor(np.full((4, 2), 200, dtype=np.uint8), QuantParams(0.05, 200))
    out = qmatmul(q1, q2, QuantParams(0.2, 42), derive_requant_multiplier(0.1, 0.05, 0.2))
    assert np.all(out.data == 42)


def test_qmatmul_matches_float_product():
    """Dequantized integer products stay within 1.5 output steps of the float product of the codes."""
    rng = np.random.default_rng(1)
    for _ in range(20):
        a = rng.uniform(-1, 2, (6, 9))
        b = rng.uniform(-3, 1, (9, 5))
        qa, qb = compute_qparams(a.min(), a.max()), compute_qparams(b.min(), b.max())
        ca, cb = quantize(a, qa), quantize(b, qb)
        exact = dequantize(ca, qa) @ dequantize(cb, qb)
        q3 = compute_qparams(exact.min(), exact.max())
        out = qmatmul(QuantizedTensor(ca, qa), QuantizedTensor(cb, qb), q3,
                      derive_requant_multiplier(qa.scale, qb.scale, q3.scale))
        assert np.abs(dequantize(out.data, q3) - exact).max() <= 1.5 * q3.scale


def test_qmatmul_rejects_mismatched_shapes():
    qp = QuantParams(1.0, 0)
    with pytest.raises(DimensionError):
        qmatmul(QuantizedTensor(np.zeros((2, 3), dtype=np.uint8), qp),
                QuantizedTensor(np.zeros((2, 3), dtype=np.uint8), qp), qp, derive_requant_multiplier(1, 1, 2))
    with pytest.raises(ShapeError):
        QuantizedTensor(np.zeros((2, 2), dtype=np.int32), qp)


def test_pointwise_identity_convolution_returns_its_input():
    qp = QuantParams(0.02, 30)
    codes = np.random.default_rng(2).integers(0, 256, (2, 3, 5, 5)).astype(np.uint8)
    weight_qp = compute_qparams(0.0, 1.0)
    layer = QuantizedLayer(
        kind=QuantizedLayerKind.CONV,
        input_qp=qp,
        output_qp=qp,
        weight=quantize(np.eye(3)[:, :, None, None], weight_qp),
        bias=np.zeros(3, dtype=np.int32),
        weight_qp=weight_qp,
        multiplier=derive_requant_multiplier(qp.scale, weight_qp.scale, qp.scale),
    )
    out = qconv2d(QuantizedTensor(codes, qp), layer)
    assert np.array_equal(out.data, codes)


def test_global_average_pool_rounds_to_nearest():
    qp = QuantParams(1.0, 0)
    data = np.array([[[[1, 2], [2, 2]]]], dtype=np.uint8)
    assert qglobal_avg_pool(QuantizedTensor(data, qp)).data.tolist() == [[2]]
    data = np.array([[[[1, 1], [1, 2]]]], dtype=np.uint8)
    assert qglobal_avg_pool(QuantizedTensor(data, qp)).data.tolist() == [[1]]


def test_quantized_forward_is_finite_and_in_range(qmodel):
    images = np.random.default_rng(3).random((10, 1, 32, 32)).astype(np.float32)
    logits = quantized_forward(qmodel, images)
    assert logits.shape == (10, 5)
    assert np.all(np.isfinite(logits))
    out = qmodel.output_qp
    assert logits.min() >= out.real_min - 1e-6 and logits.max() <= out.real_max + 1e-6


def test_worker_count_does_not_change_results(qmodel):
    images = np.random.default_rng(4).random((9, 1, 32, 32)).astype(np.float32)
    assert np.array_equal(quantized_forward(qmodel, images, workers=1), quantized_forward(qmodel, images, workers=4))


def test_broken_chain_is_rejected(qmodel):
    broken = replace(qmodel, layers=list(qmodel.layers))
    broken.layers[1] = replace(broken.layers[1], input_qp=QuantParams(0.5, 3))
    with pytest.raises(ModelIntegrityError):
        broken.validate()
    with pytest.raises(ModelIntegrityError):
        quantized_forward(broken, np.zeros((1, 1, 32, 32), dtype=np.float32))


def test_wrong_input_shape_is_rejected(qmodel):
    with pytest.raises(ShapeError):
        quantized_forward(qmodel, np.zeros((1, 1, 28, 28), dtype=np.float32))


def naive_accumulate(codes, layer):
    """Direct int64 loop over output positions; the accumulator the kernels must reproduce."""
    x = codes.astype(np.int64) - layer.input_qp.zero_point
    w = layer.weight.astype(np.int64) - layer.weight_qp.zero_point
    p, s = layer.padding, layer.stride
    x = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    kh, kw = w.shape[2:]
    out_h, out_w = (x.shape[2] - kh) // s + 1, (x.shape[3] - kw) // s + 1
    acc = np.zeros((x.shape[0], w.shape[0], out_h, out_w), dtype=np.int64)
    for i in range(out_h):
        for j in range(out_w):
            patch = x[:, :, i * s:i * s + kh, j * s:j * s + kw]
            if layer.kind == QuantizedLayerKind.DEPTHWISE:
                acc[:, :, i, j] = (patch * w[:, 0]).sum(axis=(2, 3))
            else:
                acc[:, :, i, j] = np.tensordot(patch, w, axes=([1, 2, 3], [1, 2, 3]))
    return acc + layer.bias.astype(np.int64)[None, :, None, None]


def conv_case(seed, n, channels, size, out_channels, kernel, stride, padding, depthwise=False, relu=False):
    """Random input codes, a random quantized layer and the float convolution of the dequantized values."""
    rng = np.random.default_rng(seed)
    input_qp = compute_qparams(-1.0, 2.0)
    codes = rng.integers(0, 256, (n, channels, size, size)).astype(np.uint8)
    shape = (channels, 1, kernel, kernel) if depthwise else (out_channels, channels, kernel, kernel)
    weight = rng.normal(0.0, 0.3, shape)
    weight_qp = compute_qparams(weight.min(), weight.max())
    weight_codes = quantize(weight, weight_qp)
    bias = rng.integers(-2000, 2000, shape[0]).astype(np.int32)
    conv = T.depthwise_conv2d if depthwise else T.conv2d
    reference = conv(dequantize(codes, input_qp), dequantize(weight_codes, weight_qp),
                     bias * (input_qp.scale * weight_qp.scale), stride, padding)
    output_qp = compute_qparams(reference.min(), reference.max())
    if relu:
        reference = np.maximum(reference, 0.0)
    layer = QuantizedLayer(
        kind=QuantizedLayerKind.DEPTHWISE if depthwise else QuantizedLayerKind.CONV,
        input_qp=input_qp,
        output_qp=output_qp,
        weight=weight_codes,
        bias=bias,
        weight_qp=weight_qp,
        multiplier=derive_requant_multiplier(input_qp.scale, weight_qp.scale, output_qp.scale),
        relu=relu,
        stride=stride,
        padding=padding,
    )
    return QuantizedTensor(codes, input_qp), layer, reference


CONV_SHAPES = [
    # n, channels, size, out_channels, kernel, stride, padding, depthwise
    (2, 3, 8, 4, 3, 1, 1, False),
    (1, 5, 9, 6, 3, 2, 1, False),
    (3, 4, 6, 8, 1, 1, 0, False),
    (2, 16, 16, 3, 4, 2, 1, False),
    (1, 40, 5, 4, 3, 1, 1, False),
    (2, 6, 8, 6, 3, 1, 1, True),
    (1, 4, 9, 4, 3, 2, 1, True),
]


@pytest.mark.parametrize("shape", CONV_SHAPES)
def test_convolution_accumulators_are_exact(shape):
    *dims, depthwise = shape
    inp, layer, _ = conv_case(11, *dims, depthwise=depthwise)
    expected = naive_accumulate(inp.data, layer)
    centered = inp.data.astype(np.int32) - np.int32(inp.qp.zero_point)
    assert np.array_equal(_conv_accumulate(centered, layer), expected)
    codes = requantize(expected, layer.multiplier, layer.output_qp.zero_point)
    assert np.array_equal(qconv2d(inp, layer).data, codes)


@pytest.mark.parametrize("channels", [258, 259])
def test_extreme_codes_accumulate_exactly(channels):
    """Every product at -255 * 255: the deepest float32 sum and the first float64 one stay exact."""
    input_qp, weight_qp = QuantParams(0.01, 0), QuantParams(0.01, 255)
    layer = QuantizedLayer(
        kind=QuantizedLayerKind.CONV,
        input_qp=input_qp,
        output_qp=QuantParams(1.0, 200),
        weight=np.zeros((2, channels, 1, 1), dtype=np.uint8),
        bias=np.array([0, 7], dtype=np.int32),
        weight_qp=weight_qp,
        multiplier=derive_requant_multiplier(1e-3, 1e-2, 1.0),
    )
    centered = np.full((1, channels, 3, 3), 255, dtype=np.int32)
    acc = _conv_accumulate(centered, layer)
    assert acc[0, 0, 0, 0] == -255 * 255 * channels
    assert acc[0, 1, 2, 2] == -255 * 255 * channels + 7


@pytest.mark.parametrize("seed", [0, 1, 2])
@pytest.mark.parametrize("shape", CONV_SHAPES)
def test_convolution_tracks_float_reference(shape, seed):
    """Every output within one output step of the float convolution, 99% within half a step."""
    *dims, depthwise = shape
    inp, layer, reference = conv_case(seed, *dims, depthwise=depthwise)
    out = qconv2d(inp, layer)
    error = np.abs(dequantize(out.data, layer.output_qp) - reference)
    step = layer.output_qp.scale
    assert error.max() <= step
    assert np.percentile(error, 99) <= step * (0.5 + 1e-6)


@pytest.mark.parametrize("shape", CONV_SHAPES)
def test_fused_relu_clamps_at_the_zero_point(shape):
    *dims, depthwise = shape
    inp, layer, reference = conv_case(5, *dims, depthwise=depthwise, relu=True)
    out = qconv2d(inp, layer)
    z = layer.output_qp.zero_point
    assert z > 0
    assert out.data.min() >= z
    plain = qconv2d(inp, replace(layer, relu=False))
    assert np.array_equal(out.data, np.maximum(plain.data, z))
    assert np.abs(dequantize(out.data, layer.output_qp) - reference).max() <= layer.output_qp.scale


def test_random_products_stay_within_one_and_a_half_steps():
    """Random shapes with depth up to 64 through qmatmul and a one-layer model split over 1 or 4 workers."""
    rng = np.random.default_rng(8)
    for trial in range(60):
        rows, depth, cols = (int(v) for v in rng.integers(1, [9, 65, 9]))
        a = rng.uniform(-1, 2, (rows, depth))
        b = rng.uniform(-1, 1, (depth, cols))
        qa, qb = compute_qparams(a.min(), a.max()), compute_qparams(b.min(), b.max())
        ca, cb = quantize(a, qa), quantize(b, qb)
        exact = dequantize(ca, qa) @ dequantize(cb, qb)
        q3 = compute_qparams(exact.min(), exact.max())
        out = qmatmul(QuantizedTensor(ca, qa), QuantizedTensor(cb, qb), q3,
                      derive_requant_multiplier(qa.scale, qb.scale, q3.scale))
        assert np.abs(dequantize(out.data, q3) - exact).max() <= 1.5 * q3.scale

        channels = int(rng.integers(1, 8))
        inp, layer, reference = conv_case(trial, 4, channels, 6, int(rng.integers(1, 6)), 3, 1, 1)
        model = QuantizedModel(layers=[layer], input_qp=inp.qp, input_shape=(channels, 6, 6))
        images = dequantize(inp.data, inp.qp)
        single = quantized_forward(model, images, workers=1)
        assert np.array_equal(single, quantized_forward(model, images, workers=4))
        assert np.abs(single - reference).max() <= 1.5 * layer.output_qp.scale

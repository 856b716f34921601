"""Teacher and student model families."""
import math
from logging import getLogger
from typing import List, Optional, Tuple

import numpy as np

from qdistill.core.nn import LayerKind, LayerSpec, Model, make_layer
from qdistill.core.tensor import conv_output_size
from qdistill.exceptions import ConfigurationError

logger = getLogger(__name__)

INPUT_SHAPE = (1, 32, 32)

# (out_channels, kernel, stride, padding)
TEACHER_CONVS = [
    (16, 3, 1, 1),
    (32, 4, 2, 1),
    (64, 3, 1, 1),
    (96, 4, 2, 1),
    (128, 4, 2, 1),
]

STUDENT_STEM = (16, 4, 2, 1)
# (out_channels, depthwise stride) per depthwise-separable block
STUDENT_BLOCKS = [
    (32, 1),
    (64, 1),
    (128, 1),
]


def scaled_channels(base: int, width_multiplier: float) -> int:
    """round(base * width_multiplier), at least one channel."""
    channels = int(math.floor(base * width_multiplier + 0.5))
    if channels < 1:
        logger.warning(f"width multiplier {width_multiplier} leaves {base} channels at 0; clamping to 1")
        channels = 1
    return channels


def _conv_bn_relu(in_ch: int, out_ch: int, kernel: int, stride: int, padding: int,
                  kind: LayerKind = LayerKind.CONV) -> List[LayerSpec]:
    return [
        LayerSpec(kind, in_channels=in_ch, out_channels=out_ch, kernel=kernel, stride=stride, padding=padding),
        LayerSpec(LayerKind.BATCH_NORM, in_channels=out_ch, out_channels=out_ch),
        LayerSpec(LayerKind.RELU),
    ]


def _head(channels: int, num_classes: int, dropout_p: float) -> List[LayerSpec]:
    head = [LayerSpec(LayerKind.GLOBAL_AVG_POOL)]
    if dropout_p > 0:
        head.append(LayerSpec(LayerKind.DROPOUT, dropout_p=dropout_p))
    head.append(LayerSpec(LayerKind.DENSE, in_channels=channels, out_channels=num_classes))
    return head


def _instantiate(specs: List[LayerSpec], seed: int, **metadata) -> Model:
    rng = np.random.default_rng(seed)
    return Model(layers=[make_layer(spec, rng) for spec in specs], input_shape=INPUT_SHAPE, **metadata)


def build_teacher(num_classes: int, dropout_p: float = 0.5, seed: int = 0) -> Model:
    """Plain Conv-BN-ReLU stack, global average pool and a dense classifier."""
    if num_classes < 2:
        raise ConfigurationError(f"num_classes must be at least 2, got {num_classes}")
    specs: List[LayerSpec] = []
    channels = INPUT_SHAPE[0]
    for out_ch, kernel, stride, padding in TEACHER_CONVS:
        specs += _conv_bn_relu(channels, out_ch, kernel, stride, padding)
        channels = out_ch
    specs += _head(channels, num_classes, dropout_p)
    return _instantiate(specs, seed, family="teacher", width_multiplier=1.0, num_classes=num_classes)


def build_student(num_classes: int, width_multiplier: float = 1.0, dropout_p: float = 0.2, seed: int = 0) -> Model:
    """Stem convolution followed by depthwise-separable blocks.

    Each block is a depthwise 3x3 Conv-BN-ReLU and a pointwise 1x1
    Conv-BN-ReLU. Every channel count is scaled by width_multiplier.
    """
    if num_classes < 2:
        raise ConfigurationError(f"num_classes must be at least 2, got {num_classes}")
    if not width_multiplier > 0:
        raise ConfigurationError(f"width_multiplier must be positive, got {width_multiplier}")
    stem_out, kernel, stride, padding = STUDENT_STEM
    channels = scaled_channels(stem_out, width_multiplier)
    specs = _conv_bn_relu(INPUT_SHAPE[0], channels, kernel, stride, padding)
    for base_out, dw_stride in STUDENT_BLOCKS:
        out_ch = scaled_channels(base_out, width_multiplier)
        specs += _conv_bn_relu(channels, channels, 3, dw_stride, 1, kind=LayerKind.DEPTHWISE_CONV)
        specs += _conv_bn_relu(channels, out_ch, 1, 1, 0, kind=LayerKind.POINTWISE_CONV)
        channels = out_ch
    specs += _head(channels, num_classes, dropout_p)
    return _instantiate(specs, seed, family="student", width_multiplier=width_multiplier, num_classes=num_classes)


def count_macs(model: Model, input_shape: Optional[Tuple[int, int, int]] = None) -> int:
    """Multiply-accumulate operations of one forward pass on a single sample."""
    channels, height, width = input_shape or model.input_shape
    macs = 0
    for layer in model.layers:
        spec = layer.spec
        if spec.is_conv:
            height = conv_output_size(height, spec.kernel, spec.stride, spec.padding)
            width = conv_output_size(width, spec.kernel, spec.stride, spec.padding)
            per_output = spec.kernel * spec.kernel * (1 if spec.is_depthwise else spec.in_channels)
            macs += per_output * spec.out_channels * height * width
            channels = spec.out_channels
        elif spec.kind == LayerKind.DENSE:
            macs += spec.in_channels * spec.out_channels
    return macs

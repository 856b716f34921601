"""Layer fusion, observer attachment, calibration and integer conversion.

The quantization-aware recipe is: attach observers and fake quantization,
train the model with batch norm folded on the fly (or only calibrate it),
then fold batch norm into constants and convert to a QuantizedModel.
"""
from logging import getLogger
from typing import List, Optional, Tuple

import numpy as np

from qdistill.core.int8_infer import QuantizedLayer, QuantizedLayerKind, QuantizedModel
from qdistill.core.nn import (
    COMPUTE_KINDS,
    BatchNormState,
    Layer,
    LayerKind,
    LayerSpec,
    Model,
    conv_bn_groups,
    forward,
)
from qdistill.core.quant import (
    ObserverState,
    QATState,
    compute_qparams,
    derive_requant_multiplier,
    quantize,
    round_half_away,
)
from qdistill.exceptions import ConversionError, InvariantError, QuantizationError, ShapeError

logger = getLogger(__name__)

INT32_MIN = -(1 << 31)
INT32_MAX = (1 << 31) - 1


def fold_batchnorm(conv_w: np.ndarray, conv_b: np.ndarray, bn: BatchNormState) -> Tuple[np.ndarray, np.ndarray]:
    """Fold an eval-mode batch norm into the preceding convolution's weight and bias."""
    channels = conv_w.shape[0]
    if bn.gamma.shape != (channels,) or bn.running_var.shape != (channels,):
        raise ShapeError(f"batch norm over {bn.gamma.shape[0]} channels cannot follow {channels} filters")
    if np.any(bn.running_var < 0):
        raise InvariantError("batch norm running variance is negative")
    scale = bn.gamma.astype(np.float64) / np.sqrt(bn.running_var.astype(np.float64) + bn.eps)
    w = conv_w.astype(np.float64) * scale.reshape((-1,) + (1,) * (conv_w.ndim - 1))
    b = bn.beta.astype(np.float64) + (conv_b.astype(np.float64) - bn.running_mean.astype(np.float64)) * scale
    return w.astype(conv_w.dtype), b.astype(conv_b.dtype)


def fuse_layers(model: Model) -> Model:
    """Replace every Conv-BN and Conv-BN-ReLU group with a single FusedConv layer."""
    layers: List[Layer] = []
    groups = conv_bn_groups(model.layers)
    for start, length in groups:
        layer = model.layers[start]
        spec = layer.spec
        if length == 1:
            layers.append(Layer(spec=spec, params={k: v.copy() for k, v in layer.params.items()},
                                buffers=dict(layer.buffers)))
            continue
        bn = BatchNormState.from_layer(model.layers[start + 1])
        weight, bias = fold_batchnorm(layer.params["weight"], layer.params["bias"], bn)
        fused_spec = LayerSpec(
            LayerKind.FUSED_CONV,
            in_channels=spec.in_channels,
            out_channels=spec.out_channels,
            kernel=spec.kernel,
            stride=spec.stride,
            padding=spec.padding,
            relu=length == 3,
            depthwise=spec.is_depthwise,
        )
        layers.append(Layer(spec=fused_spec, params={"weight": weight, "bias": bias}))
    logger.debug(f"fused {sum(1 for _, n in groups if n > 1)} Conv-BN groups; "
                 f"{len(model.layers)} -> {len(layers)} layers")
    return Model(
        layers=layers,
        family=model.family,
        width_multiplier=model.width_multiplier,
        num_classes=model.num_classes,
        input_shape=model.input_shape,
        bn_frozen=model.bn_frozen,
    )


def prepare_qat(model: Model) -> Model:
    """Copy of a model with an input observer and one observer per compute layer.

    Batch norm stays live: each Conv-BN(-ReLU) group trains as one folded
    layer whose observer sits on the group output.
    """
    conv_bn_groups(model.layers)
    prepared = model.copy()
    prepared.qat = QATState(
        observers={
            index: ObserverState()
            for index, layer in enumerate(prepared.layers)
            if layer.kind in COMPUTE_KINDS
        }
    )
    return prepared


def calibrate(model: Model, images: np.ndarray, batch_size: int = 256) -> Model:
    """Run eval-mode forwards that only feed the observers."""
    if model.qat is None:
        raise ConversionError("calibration needs a model prepared with prepare_qat")
    for start in range(0, len(images), batch_size):
        forward(model, images[start:start + batch_size], "eval", observe=True)
    logger.info(f"calibrated observers on {len(images)} images")
    return model


def _quantize_bias(bias: np.ndarray, scale: float) -> np.ndarray:
    codes = round_half_away(bias.astype(np.float64) / scale)
    return np.clip(codes, INT32_MIN, INT32_MAX).astype(np.int32)


def _observed(observer: Optional[ObserverState], what: str) -> ObserverState:
    if observer is None or observer.sample_count < 1:
        raise ConversionError(f"{what} has no observed statistics")
    return observer


def convert_to_int8(model: Model, qat_state: Optional[QATState] = None) -> QuantizedModel:
    """Quantize weights, biases and activations of an observed model.

    Batch norm is folded into the convolutions with its running statistics
    first; observers keyed by the first layer of each group carry over to
    the fused layer.
    """
    qat_state = qat_state or model.qat
    if qat_state is None:
        raise ConversionError("model has no observers; run prepare_qat first")
    groups = conv_bn_groups(model.layers)
    fused_model = fuse_layers(model)
    observers = {position: qat_state.observers.get(start) for position, (start, _) in enumerate(groups)}
    input_qp = _observed(qat_state.input_observer, "model input").qparams()
    current = input_qp
    layers: List[QuantizedLayer] = []
    for index, layer in enumerate(fused_model.layers):
        spec = layer.spec
        if spec.kind == LayerKind.DROPOUT:
            continue
        if spec.kind == LayerKind.GLOBAL_AVG_POOL:
            layers.append(QuantizedLayer(QuantizedLayerKind.GLOBAL_AVG_POOL, current, current))
            continue
        if spec.kind not in COMPUTE_KINDS:
            raise ConversionError(f"layer {index} ({spec.kind.value}) has no integer form")
        observer = _observed(observers.get(index), f"layer {index} ({spec.kind.value})")
        weight = layer.params["weight"]
        weight_qp = compute_qparams(float(weight.min()), float(weight.max()))
        output_qp = observer.qparams()
        try:
            multiplier = derive_requant_multiplier(current.scale, weight_qp.scale, output_qp.scale)
        except QuantizationError as e:
            raise ConversionError(f"layer {index} ({spec.kind.value}): {e}") from e
        if spec.kind == LayerKind.DENSE:
            kind = QuantizedLayerKind.DENSE
        elif spec.is_depthwise:
            kind = QuantizedLayerKind.DEPTHWISE
        else:
            kind = QuantizedLayerKind.CONV
        layers.append(
            QuantizedLayer(
                kind=kind,
                input_qp=current,
                output_qp=output_qp,
                weight=quantize(weight, weight_qp),
                bias=_quantize_bias(layer.params["bias"], current.scale * weight_qp.scale),
                weight_qp=weight_qp,
                multiplier=multiplier,
                relu=spec.relu,
                stride=spec.stride,
                padding=spec.padding,
            )
        )
        current = output_qp
    qmodel = QuantizedModel(
        layers=layers,
        input_qp=input_qp,
        family=fused_model.family,
        width_multiplier=fused_model.width_multiplier,
        num_classes=fused_model.num_classes,
        input_shape=fused_model.input_shape,
    )
    qmodel.validate()
    logger.info(f"converted {len(layers)} layers to int8 ({qmodel.parameter_count()} parameters)")
    return qmodel

"""Layer graph with analytic per-layer forward and backward passes.

A Model is an ordered list of layers. Each layer pairs a LayerSpec with
its trainable parameters and, for batch normalization, its running
statistics. Models prepared for quantization-aware training carry a
QATState; their forward pass fake-quantizes weights and activations and
their backward pass applies the clipped straight-through estimator.
In such models every Conv-BN(-ReLU) group runs as one folded layer with
live batch norm until the statistics are frozen.
"""
import copy
from dataclasses import dataclass, field
from enum import Enum
from logging import getLogger
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from qdistill.core import tensor as T
from qdistill.core.quant import (
    QATState,
    QuantParams,
    compute_qparams,
    fake_quantize_backward,
    fake_quantize_with_mask,
    observer_update,
)
from qdistill.exceptions import ConfigurationError, NumericError, ShapeError, StructureError

logger = getLogger(__name__)

PROB_FLOOR = 1e-12


class LayerKind(str, Enum):
    CONV = "Conv"
    DEPTHWISE_CONV = "DepthwiseConv"
    POINTWISE_CONV = "PointwiseConv"
    BATCH_NORM = "BatchNorm"
    RELU = "ReLU"
    GLOBAL_AVG_POOL = "GlobalAvgPool"
    DENSE = "Dense"
    DROPOUT = "Dropout"
    FUSED_CONV = "FusedConv"


CONV_KINDS = (LayerKind.CONV, LayerKind.DEPTHWISE_CONV, LayerKind.POINTWISE_CONV)
COMPUTE_KINDS = CONV_KINDS + (LayerKind.FUSED_CONV, LayerKind.DENSE)


@dataclass(frozen=True)
class LayerSpec:
    kind: LayerKind
    in_channels: int = 0
    out_channels: int = 0
    kernel: int = 1
    stride: int = 1
    padding: int = 0
    dropout_p: float = 0.0
    relu: bool = False
    depthwise: bool = False

    @property
    def is_depthwise(self) -> bool:
        return self.kind == LayerKind.DEPTHWISE_CONV or (self.kind == LayerKind.FUSED_CONV and self.depthwise)

    @property
    def is_conv(self) -> bool:
        return self.kind in CONV_KINDS or self.kind == LayerKind.FUSED_CONV

    def weight_shape(self) -> Tuple[int, ...]:
        if self.kind == LayerKind.DENSE:
            return (self.in_channels, self.out_channels)
        if self.is_depthwise:
            return (self.out_channels, 1, self.kernel, self.kernel)
        return (self.out_channels, self.in_channels, self.kernel, self.kernel)


@dataclass
class BatchNormState:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5
    momentum: float = 0.1

    @classmethod
    def from_layer(cls, layer: "Layer") -> "BatchNormState":
        return cls(
            gamma=layer.params["gamma"],
            beta=layer.params["beta"],
            running_mean=layer.buffers["running_mean"],
            running_var=layer.buffers["running_var"],
            eps=layer.buffers["eps"],
            momentum=layer.buffers["momentum"],
        )


@dataclass
class Layer:
    spec: LayerSpec
    params: Dict[str, np.ndarray] = field(default_factory=dict)
    buffers: Dict[str, Any] = field(default_factory=dict)

    @property
    def kind(self) -> LayerKind:
        return self.spec.kind


def make_layer(spec: LayerSpec, rng: Optional[np.random.Generator] = None) -> Layer:
    """Create a layer with He-initialised weights, zero biases and identity batch norm."""
    rng = rng or np.random.default_rng(0)
    layer = Layer(spec=spec)
    if spec.kind in COMPUTE_KINDS:
        shape = spec.weight_shape()
        fan_in = int(np.prod(shape[1:])) if spec.kind != LayerKind.DENSE else shape[0]
        std = np.sqrt(2.0 / fan_in)
        layer.params["weight"] = (rng.standard_normal(shape) * std).astype(np.float32)
        layer.params["bias"] = np.zeros(spec.out_channels, dtype=np.float32)
    elif spec.kind == LayerKind.BATCH_NORM:
        c = spec.out_channels
        layer.params["gamma"] = np.ones(c, dtype=np.float32)
        layer.params["beta"] = np.zeros(c, dtype=np.float32)
        layer.buffers.update(
            running_mean=np.zeros(c, dtype=np.float32),
            running_var=np.ones(c, dtype=np.float32),
            eps=1e-5,
            momentum=0.1,
        )
    return layer


@dataclass
class Model:
    layers: List[Layer]
    family: str = "custom"
    width_multiplier: float = 1.0
    num_classes: int = 0
    input_shape: Tuple[int, int, int] = (1, 32, 32)
    bn_frozen: bool = False
    qat: Optional[QATState] = None

    def __post_init__(self):
        if not self.num_classes and self.layers:
            last = self.layers[-1].spec
            self.num_classes = last.out_channels
        self.validate()

    def validate(self) -> None:
        """Check that adjacent layers agree on channel counts."""
        channels = self.input_shape[0]
        for index, layer in enumerate(self.layers):
            spec = layer.spec
            if spec.kind in COMPUTE_KINDS or spec.kind == LayerKind.BATCH_NORM:
                expected = spec.in_channels if spec.kind != LayerKind.BATCH_NORM else spec.out_channels
                if expected != channels:
                    raise StructureError(
                        f"layer {index} ({spec.kind.value}) expects {expected} channels, gets {channels}"
                    )
                if spec.is_depthwise and spec.in_channels != spec.out_channels:
                    raise StructureError(f"layer {index} is depthwise but changes the channel count")
                channels = spec.out_channels

    def parameter_count(self) -> int:
        return sum(int(p.size) for layer in self.layers for p in layer.params.values())

    def named_parameters(self):
        for index, layer in enumerate(self.layers):
            for name, value in layer.params.items():
                yield index, name, value

    def copy(self) -> "Model":
        return copy.deepcopy(self)

    def astype(self, dtype) -> "Model":
        """Copy of the model with every parameter and statistic cast to dtype."""
        clone = self.copy()
        for layer in clone.layers:
            for name, value in layer.params.items():
                layer.params[name] = value.astype(dtype)
            for name, value in layer.buffers.items():
                if isinstance(value, np.ndarray):
                    layer.buffers[name] = value.astype(dtype)
        return clone

    def freeze_batchnorm(self) -> None:
        self.bn_frozen = True


# -- per-layer kernels ---------------------------------------------------


def _weight_for_forward(layer: Layer, qat: bool, cache: Dict[str, Any]) -> np.ndarray:
    weight = layer.params["weight"]
    if not qat:
        return weight
    w_qp = compute_qparams(float(weight.min()), float(weight.max()))
    weight_fq, in_range = fake_quantize_with_mask(weight, w_qp)
    cache["weight_mask"] = in_range
    return weight_fq


def _compute_forward(layer: Layer, x: np.ndarray, weight: np.ndarray, bias: Optional[np.ndarray] = None) -> np.ndarray:
    spec = layer.spec
    bias = layer.params["bias"] if bias is None else bias
    if spec.kind == LayerKind.DENSE:
        if x.ndim != 2:
            raise ShapeError(f"dense layer expects (N, F) input, got {tuple(x.shape)}")
        return T.matmul(x, weight) + bias.astype(x.dtype)
    if spec.is_depthwise:
        return T.depthwise_conv2d(x, weight, bias, spec.stride, spec.padding)
    return T.conv2d(x, weight, bias, spec.stride, spec.padding)


def _compute_backward(layer: Layer, x: np.ndarray, weight: np.ndarray, grad: np.ndarray):
    spec = layer.spec
    if spec.kind == LayerKind.DENSE:
        dx = T.matmul(grad, weight.T)
        dweight = T.matmul(x.T, grad)
        return dx, dweight, grad.sum(axis=0)
    if spec.is_depthwise:
        return T.depthwise_conv2d_backward(x, weight, grad, spec.stride, spec.padding)
    return T.conv2d_backward(x, weight, grad, spec.stride, spec.padding)


def _batch_statistics(layer: Layer, x64: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Per-channel batch mean and variance; folds them into the running statistics."""
    bn = BatchNormState.from_layer(layer)
    mean = x64.mean(axis=(0, 2, 3))
    var = x64.var(axis=(0, 2, 3))
    count = x64.size // x64.shape[1]
    unbiased = var * count / max(count - 1, 1)
    m = bn.momentum
    layer.buffers["running_mean"] = ((1 - m) * bn.running_mean + m * mean).astype(bn.running_mean.dtype)
    layer.buffers["running_var"] = ((1 - m) * bn.running_var + m * unbiased).astype(bn.running_var.dtype)
    return mean, var


def _batchnorm_forward(layer: Layer, x: np.ndarray, train: bool, frozen: bool, cache: Dict[str, Any]):
    bn = BatchNormState.from_layer(layer)
    dtype = x.dtype
    shape = (1, -1, 1, 1)
    x64 = x.astype(np.float64)
    if train and not frozen:
        mean, var = _batch_statistics(layer, x64)
        cache["batch_stats"] = True
    else:
        mean = bn.running_mean.astype(np.float64)
        var = bn.running_var.astype(np.float64)
        cache["batch_stats"] = False
    inv_std = 1.0 / np.sqrt(var + bn.eps)
    x_hat = (x64 - mean.reshape(shape)) * inv_std.reshape(shape)
    cache["x_hat"] = x_hat
    cache["inv_std"] = inv_std
    out = bn.gamma.astype(np.float64).reshape(shape) * x_hat + bn.beta.astype(np.float64).reshape(shape)
    return out.astype(dtype)


def _batchnorm_backward(layer: Layer, grad: np.ndarray, cache: Dict[str, Any]):
    shape = (1, -1, 1, 1)
    g = grad.astype(np.float64)
    x_hat = cache["x_hat"]
    inv_std = cache["inv_std"].reshape(shape)
    gamma = layer.params["gamma"].astype(np.float64).reshape(shape)
    dgamma = (g * x_hat).sum(axis=(0, 2, 3))
    dbeta = g.sum(axis=(0, 2, 3))
    dx_hat = g * gamma
    if cache["batch_stats"]:
        count = g.size // g.shape[1]
        dx = inv_std / count * (
            count * dx_hat
            - dx_hat.sum(axis=(0, 2, 3), keepdims=True)
            - x_hat * (dx_hat * x_hat).sum(axis=(0, 2, 3), keepdims=True)
        )
    else:
        dx = dx_hat * inv_std
    dtype = grad.dtype
    return dx.astype(dtype), {"gamma": dgamma.astype(dtype), "beta": dbeta.astype(dtype)}


def conv_bn_groups(layers: List[Layer]) -> List[Tuple[int, int]]:
    """Split a layer list into (start, length) runs that become one layer once fused.

    A convolution followed by batch norm (and optionally ReLU) forms one
    run; every other layer is a run of its own.
    """
    groups: List[Tuple[int, int]] = []
    index = 0
    while index < len(layers):
        kind = layers[index].kind
        if kind == LayerKind.BATCH_NORM:
            raise StructureError(f"layer {index}: BatchNorm is not preceded by a convolution")
        length = 1
        if kind in CONV_KINDS and index + 1 < len(layers) and layers[index + 1].kind == LayerKind.BATCH_NORM:
            length = 3 if index + 2 < len(layers) and layers[index + 2].kind == LayerKind.RELU else 2
        groups.append((index, length))
        index += length
    return groups


def _folded_forward(model: Model, start: int, x: np.ndarray, train: bool, cache: Dict[str, Any]) -> np.ndarray:
    """Conv-BN with the batch norm folded into fake-quantized weights.

    The weights are always folded with the running deviation. While batch
    norm is live in training, batch statistics are measured on a raw
    convolution, the running statistics are updated, and the output is
    rescaled by sigma_running / sigma_batch so it stays normalised by the
    batch. Frozen or in eval mode the group computes exactly what the
    converted integer layer computes.
    """
    conv, bn_layer = model.layers[start], model.layers[start + 1]
    if x.ndim != 4 or x.shape[1] != conv.spec.in_channels:
        raise ShapeError(f"convolution over {conv.spec.in_channels} channels got {tuple(x.shape)}")
    bn = BatchNormState.from_layer(bn_layer)
    gamma = bn.gamma.astype(np.float64)
    sigma_running = np.sqrt(bn.running_var.astype(np.float64) + bn.eps)
    if train and not model.bn_frozen:
        raw = _compute_forward(conv, x, conv.params["weight"]).astype(np.float64)
        mean, var = _batch_statistics(bn_layer, raw)
        sigma = np.sqrt(var + bn.eps)
    else:
        mean, sigma = bn.running_mean.astype(np.float64), sigma_running
    scale = gamma / sigma_running
    weight = conv.params["weight"]
    folded = (weight.astype(np.float64) * scale.reshape(-1, 1, 1, 1)).astype(weight.dtype)
    w_qp = compute_qparams(float(folded.min()), float(folded.max()))
    weight_fq, cache["weight_mask"] = fake_quantize_with_mask(folded, w_qp)
    cache["weight"] = weight_fq
    correction = sigma_running / sigma
    bias = bn.beta.astype(np.float64) + (conv.params["bias"].astype(np.float64) - mean) * gamma / sigma
    cache["fold"] = {"scale": scale, "sigma_running": sigma_running, "sigma": sigma, "mean": mean,
                     "correction": correction}
    out = _compute_forward(conv, x, weight_fq, np.zeros_like(conv.params["bias"])).astype(np.float64)
    shape = (1, -1, 1, 1)
    out = out * correction.reshape(shape) + bias.reshape(shape)
    return out.astype(x.dtype)


def _folded_backward(model: Model, start: int, cache: Dict[str, Any], grad: np.ndarray):
    """Gradients of a folded Conv-BN group; batch statistics are treated as constants."""
    conv, bn_layer = model.layers[start], model.layers[start + 1]
    fold = cache["fold"]
    g = grad.astype(np.float64)
    dbias_folded = g.sum(axis=(0, 2, 3))
    dx, dweight_fq, _ = _compute_backward(conv, cache["input"], cache["weight"],
                                          g * fold["correction"].reshape(1, -1, 1, 1))
    dfolded = fake_quantize_backward(dweight_fq, cache["weight_mask"]).astype(np.float64)
    weight = conv.params["weight"].astype(np.float64)
    gamma = bn_layer.params["gamma"].astype(np.float64)
    centered_bias = conv.params["bias"].astype(np.float64) - fold["mean"]
    dgamma = (dfolded * weight).sum(axis=(1, 2, 3)) / fold["sigma_running"] + dbias_folded * centered_bias / fold["sigma"]
    conv_grads = {
        "weight": (dfolded * fold["scale"].reshape(-1, 1, 1, 1)).astype(conv.params["weight"].dtype),
        "bias": (dbias_folded * gamma / fold["sigma"]).astype(conv.params["bias"].dtype),
    }
    bn_grads = {"gamma": dgamma.astype(bn_layer.params["gamma"].dtype),
                "beta": dbias_folded.astype(bn_layer.params["beta"].dtype)}
    return dx.astype(grad.dtype), conv_grads, bn_grads


def _activation_qparams(model: Model, index: int, out: np.ndarray, observe: bool) -> QuantParams:
    observer = model.qat.observers[index]
    if observe:
        observer_update(observer, out)
    return observer.qparams()


# -- model passes ----------------------------------------------------------


def forward(
    model: Model,
    batch: np.ndarray,
    mode: str = "eval",
    rng: Optional[np.random.Generator] = None,
    observe: Optional[bool] = None,
):
    """Run the model on a batch and return (logits, cache).

    mode is "train" (dropout, batch statistics, observer updates) or
    "eval" (running statistics, no dropout). observe overrides whether
    QAT observers collect statistics; by default they do in train mode.
    """
    if mode not in ("train", "eval"):
        raise ConfigurationError(f"unknown forward mode {mode!r}")
    train = mode == "train"
    observe = train if observe is None else observe
    qat = model.qat is not None
    if batch.ndim != 4 or tuple(batch.shape[1:]) != tuple(model.input_shape):
        raise ShapeError(
            f"input batch {tuple(batch.shape)} does not match model input (N, {', '.join(map(str, model.input_shape))})"
        )
    caches: List[Dict[str, Any]] = []
    x = batch
    if qat:
        if observe:
            observer_update(model.qat.input_observer, x)
        current_qp = model.qat.input_observer.qparams()
        x, input_mask = fake_quantize_with_mask(x, current_qp)
    else:
        current_qp = None
        input_mask = None

    groups = conv_bn_groups(model.layers) if qat else [(i, 1) for i in range(len(model.layers))]
    for index, length in groups:
        layer = model.layers[index]
        spec = layer.spec
        cache: Dict[str, Any] = {"input": x}
        try:
            if length > 1:
                out = _folded_forward(model, index, x, train, cache)
                if length == 3:
                    cache["relu_mask"] = out > 0
                    out = out * cache["relu_mask"]
                current_qp = _activation_qparams(model, index, out, observe)
                out, cache["act_mask"] = fake_quantize_with_mask(out, current_qp)
            elif spec.kind in COMPUTE_KINDS:
                weight = _weight_for_forward(layer, qat, cache)
                cache["weight"] = weight
                out = _compute_forward(layer, x, weight)
                if spec.relu:
                    cache["relu_mask"] = out > 0
                    out = out * cache["relu_mask"]
                if qat:
                    current_qp = _activation_qparams(model, index, out, observe)
                    out, cache["act_mask"] = fake_quantize_with_mask(out, current_qp)
            elif spec.kind == LayerKind.BATCH_NORM:
                if x.ndim != 4 or x.shape[1] != spec.out_channels:
                    raise ShapeError(f"batch norm over {spec.out_channels} channels got {tuple(x.shape)}")
                out = _batchnorm_forward(layer, x, train, model.bn_frozen, cache)
            elif spec.kind == LayerKind.RELU:
                cache["relu_mask"] = x > 0
                out = x * cache["relu_mask"]
            elif spec.kind == LayerKind.GLOBAL_AVG_POOL:
                out = T.global_avg_pool(x)
                if qat:
                    out, cache["act_mask"] = fake_quantize_with_mask(out, current_qp)
            elif spec.kind == LayerKind.DROPOUT:
                if train and spec.dropout_p > 0:
                    rng = rng if rng is not None else np.random.default_rng()
                    keep = rng.random(x.shape) >= spec.dropout_p
                    cache["dropout_mask"] = keep / (1.0 - spec.dropout_p)
                    out = (x * cache["dropout_mask"]).astype(x.dtype)
                else:
                    out = x
            else:
                raise StructureError(f"unsupported layer kind {spec.kind}")
        except ShapeError as e:
            raise ShapeError(f"layer {index} ({spec.kind.value}): {e}") from e
        caches.append(cache)
        caches.extend({"folded_into": index} for _ in range(length - 1))
        x = out
    return x, {"layers": caches, "input_mask": input_mask, "mode": mode}


def backward(model: Model, cache: Dict[str, Any], loss_grad: np.ndarray) -> List[Dict[str, np.ndarray]]:
    """Gradients of the loss for every parameter, given dL/dlogits."""
    grads: List[Dict[str, np.ndarray]] = [dict() for _ in model.layers]
    dtype = next((p.dtype for _, _, p in model.named_parameters()), np.float32)
    grad = np.asarray(loss_grad, dtype=dtype)
    for index in range(len(model.layers) - 1, -1, -1):
        layer = model.layers[index]
        spec = layer.spec
        layer_cache = cache["layers"][index]
        if "folded_into" in layer_cache:
            continue
        x = layer_cache["input"]
        if "fold" in layer_cache:
            grad = fake_quantize_backward(grad, layer_cache["act_mask"])
            if "relu_mask" in layer_cache:
                grad = grad * layer_cache["relu_mask"]
            grad, grads[index], grads[index + 1] = _folded_backward(model, index, layer_cache, grad)
        elif spec.kind in COMPUTE_KINDS:
            if "act_mask" in layer_cache:
                grad = fake_quantize_backward(grad, layer_cache["act_mask"])
            if "relu_mask" in layer_cache:
                grad = grad * layer_cache["relu_mask"]
            dx, dweight, dbias = _compute_backward(layer, x, layer_cache["weight"], grad)
            if "weight_mask" in layer_cache:
                dweight = fake_quantize_backward(dweight, layer_cache["weight_mask"])
            grads[index] = {"weight": dweight.astype(layer.params["weight"].dtype),
                            "bias": np.asarray(dbias).astype(layer.params["bias"].dtype)}
            grad = dx
        elif spec.kind == LayerKind.BATCH_NORM:
            grad, grads[index] = _batchnorm_backward(layer, grad, layer_cache)
        elif spec.kind == LayerKind.RELU:
            grad = grad * layer_cache["relu_mask"]
        elif spec.kind == LayerKind.GLOBAL_AVG_POOL:
            if "act_mask" in layer_cache:
                grad = fake_quantize_backward(grad, layer_cache["act_mask"])
            n, c, h, w = x.shape
            grad = np.broadcast_to(grad[:, :, None, None] / (h * w), (n, c, h, w)).astype(grad.dtype)
        elif spec.kind == LayerKind.DROPOUT:
            if "dropout_mask" in layer_cache:
                grad = (grad * layer_cache["dropout_mask"]).astype(grad.dtype)
    return grads


def predict_logits(model: Model, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Eval-mode logits for a batch of model-sized images, in chunks."""
    outputs = []
    for start in range(0, len(images), batch_size):
        logits, _ = forward(model, images[start:start + batch_size], "eval", observe=False)
        outputs.append(logits)
    return np.concatenate(outputs, axis=0)


# -- losses ------------------------------------------------------------------


def one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ConfigurationError(f"labels must lie in [0, {num_classes})")
    out = np.zeros((labels.size, num_classes), dtype=np.float64)
    out[np.arange(labels.size), labels] = 1.0
    return out


def cross_entropy(target_dist: np.ndarray, probs: np.ndarray) -> float:
    """Mean over the batch of -sum_j target[j] * log(probs[j])."""
    target = np.asarray(target_dist, dtype=np.float64)
    p = np.asarray(probs, dtype=np.float64)
    if np.isnan(target).any() or np.isnan(p).any():
        raise NumericError("cross entropy received NaN")
    if target.shape != p.shape or target.ndim != 2:
        raise ShapeError(f"cross entropy needs matching (N, C) inputs, got {target.shape} and {p.shape}")
    for name, dist in (("target", target), ("probs", p)):
        if not np.allclose(dist.sum(axis=1), 1.0, rtol=0.0, atol=1e-5):
            raise NumericError(f"{name} rows must sum to 1")
    return float(-(target * np.log(np.maximum(p, PROB_FLOOR))).sum(axis=1).mean())

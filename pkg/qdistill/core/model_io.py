"""Reading and writing `.qdk` model files.

One little-endian container holds either a float Model or a
QuantizedModel; bit 0 of the flags byte tells them apart. See README.md
for the byte layout.
"""
import struct
from logging import getLogger
from pathlib import Path
from typing import List, Tuple, Union

import numpy as np

from qdistill.core.int8_infer import QuantizedLayer, QuantizedLayerKind, QuantizedModel
from qdistill.core.nn import Layer, LayerKind, LayerSpec, Model, COMPUTE_KINDS
from qdistill.core.quant import QuantParams, RequantMultiplier
from qdistill.exceptions import ModelFormatError, QDistillError

logger = getLogger(__name__)

MAGIC = b"QDK1"
FLAG_QUANTIZED = 0x01
FLAG_BN_FROZEN = 0x02

HEADER = struct.Struct("<4sBBdH3HH")
QPARAMS = struct.Struct("<dB")
MULTIPLIER = struct.Struct("<IB")
FLOAT_LAYER = struct.Struct("<BHHBBBBd")
QUANT_LAYER = struct.Struct("<BHHBBBB")

FAMILIES = ["custom", "teacher", "student"]
FLOAT_KINDS = list(LayerKind)
QUANT_KINDS = list(QuantizedLayerKind)
BN_ARRAYS = ("gamma", "beta", "running_mean", "running_var")

AnyModel = Union[Model, QuantizedModel]


# -- writing -------------------------------------------------------------------


def _header(model: AnyModel, flags: int) -> bytes:
    family = FAMILIES.index(model.family) if model.family in FAMILIES else 0
    return HEADER.pack(MAGIC, flags, family, float(model.width_multiplier), int(model.num_classes),
                       *map(int, model.input_shape), len(model.layers))


def _float_layer(layer: Layer) -> bytes:
    spec = layer.spec
    flags = int(spec.relu) | int(spec.depthwise) << 1
    out = [FLOAT_LAYER.pack(FLOAT_KINDS.index(spec.kind), spec.in_channels, spec.out_channels,
                            spec.kernel, spec.stride, spec.padding, flags, spec.dropout_p)]
    if spec.kind in COMPUTE_KINDS:
        out += [layer.params["weight"].astype("<f4").tobytes(), layer.params["bias"].astype("<f4").tobytes()]
    elif spec.kind == LayerKind.BATCH_NORM:
        arrays = {**layer.params, **layer.buffers}
        out += [arrays[name].astype("<f4").tobytes() for name in BN_ARRAYS]
        out.append(struct.pack("<dd", float(layer.buffers["eps"]), float(layer.buffers["momentum"])))
    return b"".join(out)


def _channels(layer: QuantizedLayer) -> Tuple[int, int, int]:
    if layer.kind == QuantizedLayerKind.DENSE:
        return layer.weight.shape[0], layer.weight.shape[1], 1
    if layer.kind == QuantizedLayerKind.DEPTHWISE:
        return layer.weight.shape[0], layer.weight.shape[0], layer.weight.shape[2]
    return layer.weight.shape[1], layer.weight.shape[0], layer.weight.shape[2]


def _quant_layer(layer: QuantizedLayer) -> bytes:
    kind = QUANT_KINDS.index(layer.kind)
    if not layer.has_weights:
        return QUANT_LAYER.pack(kind, 0, 0, 0, 0, 0, 0)
    in_ch, out_ch, kernel = _channels(layer)
    return b"".join([
        QUANT_LAYER.pack(kind, in_ch, out_ch, kernel, layer.stride, layer.padding, int(layer.relu)),
        QPARAMS.pack(layer.weight_qp.scale, layer.weight_qp.zero_point),
        QPARAMS.pack(layer.output_qp.scale, layer.output_qp.zero_point),
        MULTIPLIER.pack(layer.multiplier.m0_fixed, layer.multiplier.shift),
        layer.weight.astype(np.uint8).tobytes(),
        layer.bias.astype("<i4").tobytes(),
    ])


def dumps(model: AnyModel) -> bytes:
    if isinstance(model, QuantizedModel):
        model.validate()
        parts = [_header(model, FLAG_QUANTIZED),
                 QPARAMS.pack(model.input_qp.scale, model.input_qp.zero_point)]
        parts += [_quant_layer(layer) for layer in model.layers]
    else:
        parts = [_header(model, FLAG_BN_FROZEN if model.bn_frozen else 0)]
        parts += [_float_layer(layer) for layer in model.layers]
    return b"".join(parts)


def save(model: AnyModel, path: Union[str, Path]) -> int:
    """Write model to path and return the number of bytes written."""
    data = dumps(model)
    Path(path).write_bytes(data)
    logger.info(f"saved {'quantized' if isinstance(model, QuantizedModel) else 'float'} model "
                f"to {path} ({len(data)} bytes)")
    return len(data)


# -- reading -------------------------------------------------------------------


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.offset = 0

    def unpack(self, fmt: struct.Struct, what: str) -> tuple:
        if self.offset + fmt.size > len(self.data):
            raise ModelFormatError(f"file truncated while reading {what}", offset=self.offset)
        values = fmt.unpack_from(self.data, self.offset)
        self.offset += fmt.size
        return values

    def array(self, dtype: str, shape: Tuple[int, ...], what: str) -> np.ndarray:
        count = int(np.prod(shape))
        size = count * np.dtype(dtype).itemsize
        if self.offset + size > len(self.data):
            raise ModelFormatError(f"file truncated while reading {what}", offset=self.offset)
        values = np.frombuffer(self.data, dtype=dtype, count=count, offset=self.offset).reshape(shape)
        self.offset += size
        return values.astype(np.dtype(dtype).newbyteorder("="))

    def qparams(self, what: str) -> QuantParams:
        start = self.offset
        scale, zero_point = self.unpack(QPARAMS, what)
        try:
            return QuantParams(scale, zero_point)
        except QDistillError as e:
            raise ModelFormatError(f"{what}: {e}", offset=start) from e


def _read_float_layer(reader: _Reader, index: int) -> Layer:
    start = reader.offset
    kind, in_ch, out_ch, kernel, stride, padding, flags, dropout = reader.unpack(FLOAT_LAYER, f"layer {index}")
    if kind >= len(FLOAT_KINDS):
        raise ModelFormatError(f"layer {index} has unknown kind code {kind}", offset=start)
    spec = LayerSpec(FLOAT_KINDS[kind], in_channels=in_ch, out_channels=out_ch, kernel=kernel, stride=stride,
                     padding=padding, dropout_p=dropout, relu=bool(flags & 1), depthwise=bool(flags & 2))
    layer = Layer(spec=spec)
    what = f"layer {index} ({spec.kind.value}) parameters"
    if spec.kind in COMPUTE_KINDS:
        layer.params["weight"] = reader.array("<f4", spec.weight_shape(), what)
        layer.params["bias"] = reader.array("<f4", (out_ch,), what)
    elif spec.kind == LayerKind.BATCH_NORM:
        gamma, beta, mean, var = (reader.array("<f4", (out_ch,), what) for _ in BN_ARRAYS)
        eps, momentum = reader.unpack(struct.Struct("<dd"), what)
        if np.any(var < 0) or not eps > 0:
            raise ModelFormatError(f"layer {index}: invalid batch-norm statistics", offset=start)
        layer.params.update(gamma=gamma, beta=beta)
        layer.buffers.update(running_mean=mean, running_var=var, eps=eps, momentum=momentum)
    return layer


def _read_quant_layer(reader: _Reader, index: int, input_qp: QuantParams) -> QuantizedLayer:
    start = reader.offset
    kind_code, in_ch, out_ch, kernel, stride, padding, relu = reader.unpack(QUANT_LAYER, f"layer {index}")
    if kind_code >= len(QUANT_KINDS):
        raise ModelFormatError(f"layer {index} has unknown kind code {kind_code}", offset=start)
    kind = QUANT_KINDS[kind_code]
    if kind == QuantizedLayerKind.GLOBAL_AVG_POOL:
        return QuantizedLayer(kind, input_qp, input_qp)
    weight_qp = reader.qparams(f"layer {index} weight quantization")
    output_qp = reader.qparams(f"layer {index} output quantization")
    mult_start = reader.offset
    m0_fixed, shift = reader.unpack(MULTIPLIER, f"layer {index} multiplier")
    try:
        multiplier = RequantMultiplier(m0_fixed, shift)
    except QDistillError as e:
        raise ModelFormatError(f"layer {index}: {e}", offset=mult_start) from e
    if kind == QuantizedLayerKind.DENSE:
        shape = (in_ch, out_ch)
    elif kind == QuantizedLayerKind.DEPTHWISE:
        shape = (out_ch, 1, kernel, kernel)
    else:
        shape = (out_ch, in_ch, kernel, kernel)
    what = f"layer {index} ({kind.value}) parameters"
    weight = reader.array("u1", shape, what)
    bias = reader.array("<i4", (out_ch,), what)
    return QuantizedLayer(kind, input_qp, output_qp, weight, bias, weight_qp, multiplier,
                          relu=bool(relu), stride=stride, padding=padding)


def loads(data: bytes) -> AnyModel:
    """Parse a `.qdk` byte string; ModelFormatError carries the failing byte offset."""
    if data[:4] != MAGIC:
        raise ModelFormatError(f"bad magic {data[:4]!r}, expected {MAGIC!r}", offset=0)
    reader = _Reader(data)
    _, flags, family, width, num_classes, c, h, w, count = reader.unpack(HEADER, "header")
    if family >= len(FAMILIES):
        raise ModelFormatError(f"unknown model family code {family}", offset=5)
    meta = dict(family=FAMILIES[family], width_multiplier=width, num_classes=num_classes, input_shape=(c, h, w))
    try:
        if flags & FLAG_QUANTIZED:
            input_qp = reader.qparams("input quantization")
            layers: List[QuantizedLayer] = []
            current = input_qp
            for index in range(count):
                layer = _read_quant_layer(reader, index, current)
                layers.append(layer)
                current = layer.output_qp
            model: AnyModel = QuantizedModel(layers=layers, input_qp=input_qp, **meta)
            model.validate()
        else:
            layers = [_read_float_layer(reader, index) for index in range(count)]
            model = Model(layers=layers, bn_frozen=bool(flags & FLAG_BN_FROZEN), **meta)
    except ModelFormatError:
        raise
    except QDistillError as e:
        raise ModelFormatError(str(e), offset=reader.offset) from e
    if reader.offset != len(data):
        raise ModelFormatError(f"{len(data) - reader.offset} trailing bytes after the last layer",
                               offset=reader.offset)
    return model


def load(path: Union[str, Path]) -> AnyModel:
    model = loads(Path(path).read_bytes())
    logger.debug(f"loaded {type(model).__name__} with {len(model.layers)} layers from {path}")
    return model

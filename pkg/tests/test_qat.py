import pytest
import os
import sys

import numpy as np

# Add parent directory to path to allow imports
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from qdistill.core.data import generate_shapes_dataset
from qdistill.core.int8_infer import QuantizedLayerKind, quantized_forward
from qdistill.core.models import build_student, build_teacher
from qdistill.core.nn import (
    BatchNormState,
    LayerKind,
    LayerSpec,
    Model,
    backward,
    conv_bn_groups,
    forward,
    make_layer,
)
from qdistill.core.optim import TrainConfig
from qdistill.core.qat import calibrate, convert_to_int8, fold_batchnorm, fuse_layers, prepare_qat
from qdistill.core.quant import QATState, dequantize
from qdistill.core.training import train
from qdistill.exceptions import ConversionError, InvariantError, StructureError


def randomize_batchnorm(model, seed=0):
    """Give every BatchNorm layer non-trivial statistics and affine parameters."""
    rng = np.random.default_rng(seed)
    for layer in model.layers:
        if layer.kind == LayerKind.BATCH_NORM:
            c = layer.spec.out_channels
            layer.params["gamma"] = rng.uniform(0.5, 1.5, c).astype(np.float32)
            layer.params["beta"] = rng.uniform(-0.2, 0.2, c).astype(np.float32)
            layer.buffers["running_mean"] = rng.uniform(-0.3, 0.3, c).astype(np.float32)
            layer.buffers["running_var"] = rng.uniform(0.5, 2.0, c).astype(np.float32)
    return model


def images(n=16, seed=0):
    return np.random.default_rng(seed).random((n, 1, 32, 32)).astype(np.float32)


def test_fold_batchnorm_examples():
    rng = np.random.default_rng(0)
    w = rng.standard_normal((3, 2, 3, 3)).astype(np.float32)
    b = rng.standard_normal(3).astype(np.float32)
    eps = 1e-5
    identity = BatchNormState(np.ones(3), np.zeros(3), np.zeros(3), np.full(3, 1 - eps), eps)
    w2, b2 = fold_batchnorm(w, b, identity)
    assert np.allclose(w2, w, atol=1e-6) and np.allclose(b2, b, atol=1e-6)

    double = BatchNormState(np.full(3, 2.0), np.zeros(3), np.zeros(3), np.full(3, 1 - eps), eps)
    w2, _ = fold_batchnorm(w, b, double)
    assert np.allclose(w2, 2 * w, atol=1e-5)

    with pytest.raises(InvariantError):
        fold_batchnorm(w, b, BatchNormState(np.ones(3), np.zeros(3), np.zeros(3), np.array([1.0, -1.0, 1.0])))


@pytest.mark.parametrize("builder", [build_teacher, build_student])
def test_fused_model_matches_unfused(builder):
    """Eval-mode outputs agree within 1e-5 and every Conv-BN-ReLU triple becomes one layer."""
    model = randomize_batchnorm(builder(5)).astype(np.float64)
    fused = fuse_layers(model)
    triples = sum(1 for layer in model.layers if layer.kind == LayerKind.BATCH_NORM)
    assert len(fused.layers) == len(model.layers) - 2 * triples
    assert all(layer.kind != LayerKind.BATCH_NORM for layer in fused.layers)
    for seed in range(5):
        x = images(20, seed).astype(np.float64)
        expected, _ = forward(model, x, "eval")
        actual, _ = forward(fused, x, "eval")
        assert np.allclose(actual, expected, atol=1e-5)


def test_fuse_keeps_models_without_batchnorm():
    rng = np.random.default_rng(1)
    model = Model(
        layers=[make_layer(LayerSpec(LayerKind.CONV, in_channels=1, out_channels=2, kernel=1), rng),
                make_layer(LayerSpec(LayerKind.GLOBAL_AVG_POOL)),
                make_layer(LayerSpec(LayerKind.DENSE, in_channels=2, out_channels=3), rng)],
        input_shape=(1, 4, 4),
    )
    fused = fuse_layers(model)
    assert [l.kind for l in fused.layers] == [l.kind for l in model.layers]


def test_fuse_rejects_orphan_batchnorm():
    model = Model(layers=[make_layer(LayerSpec(LayerKind.BATCH_NORM, in_channels=1, out_channels=1))],
                  input_shape=(1, 4, 4))
    with pytest.raises(StructureError):
        fuse_layers(model)


def test_conversion_needs_observed_statistics():
    prepared = prepare_qat(fuse_layers(build_student(4)))
    with pytest.raises(ConversionError):
        convert_to_int8(prepared)
    with pytest.raises(ConversionError):
        convert_to_int8(fuse_layers(build_student(4)))
    with pytest.raises(ConversionError):
        convert_to_int8(prepare_qat(build_student(4)))


def test_prepare_qat_rejects_orphan_batchnorm():
    model = Model(layers=[make_layer(LayerSpec(LayerKind.BATCH_NORM, in_channels=1, out_channels=1))],
                  input_shape=(1, 4, 4))
    with pytest.raises(StructureError):
        prepare_qat(model)


def test_prepare_qat_keeps_batchnorm_live():
    """Batch norm layers survive; observers sit on every convolution and the classifier."""
    student = build_student(4, 0.5)
    prepared = prepare_qat(student)
    kinds = [layer.kind for layer in prepared.layers]
    assert kinds == [layer.kind for layer in student.layers]
    compute = [i for i, kind in enumerate(kinds) if kind not in (LayerKind.BATCH_NORM, LayerKind.RELU,
                                                                   LayerKind.GLOBAL_AVG_POOL, LayerKind.DROPOUT)]
    assert sorted(prepared.qat.observers) == compute

    x = images(8)
    logits, cache = forward(prepared, x, "train", np.random.default_rng(0))
    bn_layers = [layer for layer in prepared.layers if layer.kind == LayerKind.BATCH_NORM]
    assert all(np.any(layer.buffers["running_mean"] != 0) for layer in bn_layers)
    grads = backward(prepared, cache, np.ones_like(logits) / len(logits))
    for index, layer in enumerate(prepared.layers):
        assert set(grads[index]) == set(layer.params)
        for name, grad in grads[index].items():
            assert grad.shape == layer.params[name].shape and np.all(np.isfinite(grad))
    assert any(np.any(grads[i]["gamma"] != 0) for i, layer in enumerate(prepared.layers)
               if layer.kind == LayerKind.BATCH_NORM)


def test_frozen_batchnorm_group_matches_fused_layer():
    """With frozen statistics a folded group computes the same pre-activation as the fused model."""
    model = randomize_batchnorm(build_student(4, 0.5, dropout_p=0.0)).astype(np.float64)
    model.freeze_batchnorm()
    prepared = calibrate(prepare_qat(model), images(8).astype(np.float64))
    fused = fuse_layers(model)
    fused.qat = QATState(
        input_observer=prepared.qat.input_observer,
        observers={position: prepared.qat.observers[start]
                   for position, (start, _) in enumerate(conv_bn_groups(model.layers))
                   if start in prepared.qat.observers},
    )
    x = images(6, seed=3).astype(np.float64)
    train_out, _ = forward(prepared, x, "train", observe=False)
    eval_out, _ = forward(prepared, x, "eval", observe=False)
    fused_out, _ = forward(fused, x, "eval", observe=False)
    assert np.allclose(train_out, eval_out)
    assert np.allclose(eval_out, fused_out, atol=1e-6)


def test_batchnorm_statistics_update_until_freeze_epoch():
    train_split = generate_shapes_dataset(4, [12, 12, 10, 10], seed=3)[0]
    prepared = prepare_qat(build_student(4, 0.5))
    bn_index = next(i for i, layer in enumerate(prepared.layers) if layer.kind == LayerKind.BATCH_NORM)
    bn = prepared.layers[bn_index]
    initial = bn.buffers["running_mean"].copy()

    live = TrainConfig(epochs=1, milestones=[1], freeze_epoch=5, batch_size=16, seed=7)
    train(prepared, train_split, live, phase="qat")
    assert not np.array_equal(bn.buffers["running_mean"], initial)
    assert not prepared.bn_frozen and not prepared.qat.frozen

    snapshot = (bn.buffers["running_mean"].copy(), bn.buffers["running_var"].copy())
    observer = prepared.qat.observers[0]
    observed = (observer.running_min, observer.running_max)
    gamma = bn.params["gamma"].copy()
    frozen = TrainConfig(epochs=1, milestones=[1], freeze_epoch=0, batch_size=16, seed=8)
    train(prepared, train_split, frozen, phase="qat")
    assert prepared.bn_frozen and prepared.qat.frozen
    assert np.array_equal(bn.buffers["running_mean"], snapshot[0])
    assert np.array_equal(bn.buffers["running_var"], snapshot[1])
    assert (observer.running_min, observer.running_max) == observed
    assert not np.array_equal(bn.params["gamma"], gamma)


def test_conversion_folds_live_batchnorm():
    """Converting an unfused QAT model folds batch norm with its running statistics."""
    model = randomize_batchnorm(build_student(6, 0.5))
    prepared = calibrate(prepare_qat(model), images(32))
    qmodel = convert_to_int8(prepared)
    fused = fuse_layers(model)
    compute = [l for l in fused.layers if l.kind in (LayerKind.FUSED_CONV, LayerKind.DENSE)]
    quantized = [l for l in qmodel.layers if l.has_weights]
    assert len(compute) == len(quantized)
    for float_layer, qlayer in zip(compute, quantized):
        assert qlayer.relu == float_layer.spec.relu
        restored = dequantize(qlayer.weight, qlayer.weight_qp)
        assert np.abs(restored - float_layer.params["weight"]).max() <= qlayer.weight_qp.scale / 2 + 1e-7

    x = images(16, seed=4)
    simulated, _ = forward(prepared, x, "eval", observe=False)
    integer = quantized_forward(qmodel, x)
    assert np.abs(integer - simulated).mean() <= 2 * qmodel.output_qp.scale


def test_convert_to_int8_layer_chain():
    """Weights dequantize within S_w/2, biases are int32, dropout disappears, the chain validates."""
    fused = fuse_layers(randomize_batchnorm(build_student(6, 0.5)))
    prepared = calibrate(prepare_qat(fused), images(32))
    qmodel = convert_to_int8(prepared)
    qmodel.validate()
    compute = [l for l in fused.layers if l.kind in (LayerKind.FUSED_CONV, LayerKind.DENSE)]
    quantized = [l for l in qmodel.layers if l.has_weights]
    assert len(compute) == len(quantized)
    assert [l.kind for l in qmodel.layers].count(QuantizedLayerKind.GLOBAL_AVG_POOL) == 1
    for float_layer, qlayer in zip(compute, quantized):
        assert qlayer.weight.dtype == np.uint8 and qlayer.bias.dtype == np.int32
        restored = dequantize(qlayer.weight, qlayer.weight_qp)
        assert np.abs(restored - float_layer.params["weight"]).max() <= qlayer.weight_qp.scale / 2 + 1e-7
    kinds = [l.kind for l in qmodel.layers]
    assert QuantizedLayerKind.DEPTHWISE in kinds and kinds[-1] == QuantizedLayerKind.DENSE


def test_zero_weights_quantize_to_zero_point():
    rng = np.random.default_rng(2)
    conv = make_layer(LayerSpec(LayerKind.CONV, in_channels=1, out_channels=2, kernel=1), rng)
    conv.params["weight"][:] = 0
    model = Model(
        layers=[conv, make_layer(LayerSpec(LayerKind.GLOBAL_AVG_POOL)),
                make_layer(LayerSpec(LayerKind.DENSE, in_channels=2, out_channels=3), rng)],
        input_shape=(1, 32, 32),
    )
    qmodel = convert_to_int8(calibrate(prepare_qat(model), images(8)))
    first = qmodel.layers[0]
    assert np.all(first.weight == first.weight_qp.zero_point)


def test_calibration_freezes_nothing_and_counts_batches():
    prepared = prepare_qat(fuse_layers(build_student(4)))
    calibrate(prepared, images(20), batch_size=8)
    assert prepared.qat.input_observer.sample_count == 3
    assert not prepared.qat.frozen
    assert prepared.qat.input_observer.running_min == 0.0

import pytest
import os
import sys

import numpy as np

# Add parent directory to path to allow imports
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from qdistill.core import model_io
from qdistill.core.int8_infer import QuantizedModel, quantized_forward
from qdistill.core.models import build_student, build_teacher
from qdistill.core.nn import forward
from qdistill.core.qat import calibrate, convert_to_int8, fuse_layers, prepare_qat
from qdistill.exceptions import ModelFormatError


@pytest.fixture(scope="module")
def student():
    model = build_student(6, 0.5)
    model.freeze_batchnorm()
    return model


@pytest.fixture(scope="module")
def quantized(student):
    images = np.random.default_rng(0).random((16, 1, 32, 32)).astype(np.float32)
    return convert_to_int8(calibrate(prepare_qat(fuse_layers(student)), images))


def test_float_model_round_trip(student, tmp_path):
    path = tmp_path / "student.qdk"
    size = model_io.save(student, path)
    assert size == path.stat().st_size
    loaded = model_io.load(path)
    assert model_io.dumps(loaded) == path.read_bytes()
    assert loaded.bn_frozen and loaded.family == "student" and loaded.num_classes == 6
    x = np.random.default_rng(1).random((3, 1, 32, 32)).astype(np.float32)
    assert np.array_equal(forward(loaded, x)[0], forward(student, x)[0])


def test_teacher_round_trip_keeps_layer_specs():
    teacher = build_teacher(4)
    loaded = model_io.loads(model_io.dumps(teacher))
    assert [l.spec for l in loaded.layers] == [l.spec for l in teacher.layers]


def test_quantized_model_round_trip(quantized, tmp_path):
    path = tmp_path / "student-int8.qdk"
    model_io.save(quantized, path)
    loaded = model_io.load(path)
    assert isinstance(loaded, QuantizedModel)
    assert model_io.dumps(loaded) == path.read_bytes()
    x = np.random.default_rng(2).random((4, 1, 32, 32)).astype(np.float32)
    assert np.array_equal(quantized_forward(loaded, x), quantized_forward(quantized, x))


def test_quantized_file_is_much_smaller(student, quantized):
    assert len(model_io.dumps(quantized)) <= 0.35 * len(model_io.dumps(student))


def test_bad_magic_fails_at_offset_zero(student):
    data = bytearray(model_io.dumps(student))
    data[:4] = b"NOPE"
    with pytest.raises(ModelFormatError) as exc:
        model_io.loads(bytes(data))
    assert exc.value.offset == 0


def test_truncated_and_padded_files(quantized):
    data = model_io.dumps(quantized)
    with pytest.raises(ModelFormatError) as exc:
        model_io.loads(data[:-3])
    assert exc.value.offset is not None and exc.value.offset < len(data)
    with pytest.raises(ModelFormatError) as exc:
        model_io.loads(data + b"\x00\x00")
    assert exc.value.offset == len(data)
    with pytest.raises(ModelFormatError):
        model_io.loads(data[:10])


def test_unknown_layer_kind(student):
    data = bytearray(model_io.dumps(student))
    data[model_io.HEADER.size] = 250
    with pytest.raises(ModelFormatError) as exc:
        model_io.loads(bytes(data))
    assert exc.value.offset == model_io.HEADER.size
